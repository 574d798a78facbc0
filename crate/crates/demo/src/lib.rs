//! WebAssembly bindings behind `www/index.html`.
//!
//! Each export is a thin wrapper over a plain function so the logic can be
//! tested natively.

use std::collections::BTreeMap;

use metafsod::episodes::ClassSplit;
use metafsod::infer::dmp_select;
use metafsod::metrics::{eces, eces_weights, map_groups};
use metafsod::synth::{generate_scene, SceneConfig};
use wasm_bindgen::prelude::*;

/// Row-major `n x n` grid to the selected class, if any.
pub fn select_class(values: &[f64], n: usize) -> Result<Option<usize>, String> {
    if n == 0 || values.len() != n * n {
        return Err(format!("expected {} values for a {n}x{n} grid, got {}", n * n, values.len()));
    }
    let grid: Vec<Vec<f64>> = values.chunks(n).map(<[f64]>::to_vec).collect();
    dmp_select(&grid).map_err(|e| e.to_string())
}

/// Which entries of the grid are row maxima and column maxima, as bit flags
/// (1 = row max, 2 = column max).
pub fn max_flags(values: &[f64], n: usize) -> Vec<u8> {
    let at = |r: usize, c: usize| values[r * n + c];
    let mut flags = vec![0u8; n * n];
    for r in 0..n {
        for c in 0..n {
            let v = at(r, c);
            if (0..n).all(|k| at(r, k) <= v) {
                flags[r * n + c] |= 1;
            }
            if (0..n).all(|k| at(k, c) <= v) {
                flags[r * n + c] |= 2;
            }
        }
    }
    flags
}

pub struct RenderedScene {
    pub size: usize,
    pub rgba: Vec<u8>,
    /// JSON array of `{class, bbox}` with pixel boxes `[x0, y0, x1, y1]`.
    pub boxes: String,
}

pub fn render(seed: u64, classes: usize, index: usize) -> Result<RenderedScene, String> {
    let config = SceneConfig::with_classes(classes, seed);
    let scene = generate_scene(&config, index).map_err(|e| e.to_string())?;
    let size = config.image_size;
    let mut rgba = Vec::with_capacity(size * size * 4);
    for y in 0..size {
        for x in 0..size {
            rgba.extend_from_slice(&scene.image.pixel(x, y));
            rgba.push(255);
        }
    }
    let boxes: Vec<serde_json::Value> = scene
        .instances
        .iter()
        .map(|i| {
            let b = i.bbox.to_bbox().to_array();
            serde_json::json!({ "class": i.class_id, "bbox": b })
        })
        .collect();
    Ok(RenderedScene {
        size,
        rgba,
        boxes: serde_json::Value::Array(boxes).to_string(),
    })
}

/// `[map_base, map_novel, map_all, w_base, w_novel, eces]` for per-class APs.
pub fn balance(base: &[f64], novel: &[f64]) -> Result<Vec<f64>, String> {
    if base.is_empty() || novel.is_empty() {
        return Err("need at least one base and one novel class".into());
    }
    if let Some(v) = base.iter().chain(novel).find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(format!("AP values must lie in [0, 1], got {v}"));
    }
    let split = ClassSplit {
        base: (0..base.len() as u32).collect(),
        novel: (base.len() as u32..(base.len() + novel.len()) as u32).collect(),
    };
    let ap: BTreeMap<u32, Option<f64>> = base.iter().chain(novel).enumerate().map(|(i, &v)| (i as u32, Some(v))).collect();
    let means = map_groups(&ap, &split).map_err(|e| e.to_string())?;
    let (w_b, w_n) = eces_weights(base.len(), novel.len()).map_err(|e| e.to_string())?;
    let score = eces(&ap, &split).map_err(|e| e.to_string())?;
    Ok(vec![means.base, means.novel, means.all, w_b as f64, w_n as f64, score])
}

/// Selected class index, or -1 when no diagonal entry qualifies.
#[wasm_bindgen(js_name = selectClass)]
pub fn select_class_js(values: Vec<f64>, n: usize) -> Result<i32, JsError> {
    select_class(&values, n)
        .map(|s| s.map_or(-1, |i| i as i32))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = maxFlags)]
pub fn max_flags_js(values: Vec<f64>, n: usize) -> Result<Vec<u8>, JsError> {
    if values.len() != n * n {
        return Err(JsError::new("grid is not square"));
    }
    Ok(max_flags(&values, n))
}

#[wasm_bindgen]
pub struct Scene {
    inner: RenderedScene,
}

#[wasm_bindgen]
impl Scene {
    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.inner.size
    }

    pub fn rgba(&self) -> Vec<u8> {
        self.inner.rgba.clone()
    }

    #[wasm_bindgen(js_name = boxesJson)]
    pub fn boxes_json(&self) -> String {
        self.inner.boxes.clone()
    }
}

#[wasm_bindgen(js_name = renderScene)]
pub fn render_scene_js(seed: u32, classes: usize, index: usize) -> Result<Scene, JsError> {
    render(u64::from(seed), classes, index)
        .map(|inner| Scene { inner })
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = balance)]
pub fn balance_js(base: Vec<f64>, novel: Vec<f64>) -> Result<Vec<f64>, JsError> {
    balance(&base, &novel).map_err(|e| JsError::new(&e))
}

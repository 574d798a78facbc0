//! Deterministic synthetic scenes: flat-colored geometric shapes on a noisy
//! background, one class per shape kind.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::Tensor;

const PLACEMENT_ATTEMPTS: usize = 1000;
const BACKGROUND: [f64; 3] = [0.18, 0.18, 0.2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Disk,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Cross,
        ShapeKind::Ring,
        ShapeKind::Bar,
    ];

    fn covers(self, u: f64, v: f64) -> bool {
        // (u, v) in [0, 1]^2, pixel center relative to the box
        match self {
            ShapeKind::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            ShapeKind::Square | ShapeKind::Bar => true,
            ShapeKind::Triangle => (u - 0.5).abs() <= v / 2.0 + 0.5 / 8.0 * (1.0 - v),
            ShapeKind::Cross => (u - 0.5).abs() <= 1.0 / 6.0 || (v - 0.5).abs() <= 1.0 / 6.0,
            ShapeKind::Ring => {
                let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
                (0.09..=0.25).contains(&r2)
            }
        }
    }
}

/// Flat per-class base colors.
pub const PALETTE: [[f64; 3]; 10] = [
    [0.95, 0.25, 0.2],
    [0.2, 0.85, 0.3],
    [0.25, 0.4, 0.95],
    [0.95, 0.9, 0.2],
    [0.9, 0.3, 0.9],
    [0.2, 0.9, 0.9],
    [0.95, 0.6, 0.15],
    [0.6, 0.35, 0.15],
    [0.95, 0.95, 0.95],
    [0.55, 0.2, 0.6],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    /// Shape painted for class id `i`.
    pub class_shapes: Vec<ShapeKind>,
    /// Inclusive object count range.
    pub objects_per_image: (usize, usize),
    /// Inclusive object diameter range in pixels.
    pub size_range: (usize, usize),
    pub noise_std: f64,
    pub seed: u64,
}

impl SceneConfig {
    pub fn with_classes(num_classes: usize, seed: u64) -> Self {
        Self {
            image_size: 64,
            class_shapes: (0..num_classes).map(|i| ShapeKind::ALL[i % ShapeKind::ALL.len()]).collect(),
            objects_per_image: (1, 3),
            size_range: (10, 24),
            noise_std: 0.04,
            seed,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.class_shapes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "image_size must be at least 32, got {}",
                self.image_size
            )));
        }
        if self.class_shapes.len() < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.class_shapes.len() > PALETTE.len() {
            return Err(Error::InvalidArgument(format!(
                "at most {} classes are supported",
                PALETTE.len()
            )));
        }
        let (lo, hi) = self.size_range;
        if lo < 3 || lo > hi || hi > self.image_size / 2 {
            return Err(Error::InvalidArgument(format!(
                "size range {lo}..={hi} must be positive, ordered and at most image_size/2"
            )));
        }
        if self.objects_per_image.0 > self.objects_per_image.1 {
            return Err(Error::InvalidArgument("objects_per_image range is reversed".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidArgument("noise_std must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelBox {
    pub fn to_bbox(self) -> BBox {
        BBox::new(self.x0 as f64, self.y0 as f64, self.x1 as f64, self.y1 as f64)
    }

    pub fn area(self) -> u32 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    fn overlaps(self, o: PixelBox) -> bool {
        self.x0 < o.x1 && o.x0 < self.x1 && self.y0 < o.y1 && o.y0 < self.y1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AnnotatedInstance {
    pub class_id: u32,
    pub bbox: PixelBox,
}

/// 8-bit RGB image, interleaved, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// `[3, h, w]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; 3 * plane];
        for (i, px) in self.pixels.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::new(vec![3, self.height, self.width], data).expect("consistent image shape")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub index: usize,
    pub image: RgbImage,
    pub instances: Vec<AnnotatedInstance>,
}

impl Scene {
    pub fn file_name(&self) -> String {
        image_file_name(self.index)
    }
}

pub fn image_file_name(index: usize) -> String {
    format!("{index:06}.ppm")
}

/// Binary `{0, 1}` mask over an image, row-major `[h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskImage {
    pub size: usize,
    pub data: Vec<f64>,
}

impl MaskImage {
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.size + x]
    }

    /// Max-pools the mask down to a `grid x grid` map, shaped `[1, grid, grid]`.
    pub fn downsample(&self, grid: usize) -> Tensor {
        let cell = self.size / grid;
        let mut out = vec![0.0; grid * grid];
        for gy in 0..grid {
            for gx in 0..grid {
                let hit = (gy * cell..(gy + 1) * cell)
                    .any(|y| (gx * cell..(gx + 1) * cell).any(|x| self.get(x, y) > 0.0));
                out[gy * grid + gx] = if hit { 1.0 } else { 0.0 };
            }
        }
        Tensor::new(vec![1, grid, grid], out).expect("grid shape")
    }
}

/// Mask that is 1 inside `instance`'s box.
pub fn render_mask(image_size: usize, instance: &AnnotatedInstance) -> Result<MaskImage> {
    let b = instance.bbox;
    if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 as usize > image_size || b.y1 as usize > image_size {
        return Err(Error::InvalidArgument(format!(
            "box {b:?} lies outside a {image_size}x{image_size} image"
        )));
    }
    let mut data = vec![0.0; image_size * image_size];
    for y in b.y0..b.y1 {
        for x in b.x0..b.x1 {
            data[y as usize * image_size + x as usize] = 1.0;
        }
    }
    Ok(MaskImage {
        size: image_size,
        data,
    })
}

fn scene_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // splitmix-style mixing keeps neighbouring indices decorrelated
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn object_extent(kind: ShapeKind, size: u32) -> (u32, u32) {
    match kind {
        ShapeKind::Bar => (size, (size / 3).max(3)),
        _ => (size, size),
    }
}

pub fn generate_scene(config: &SceneConfig, index: usize) -> Result<Scene> {
    config.validate()?;
    let mut rng = scene_rng(config.seed, index);
    let n = config.image_size;
    let (lo, hi) = config.objects_per_image;
    let count = rng.random_range(lo..=hi);

    let mut instances: Vec<AnnotatedInstance> = Vec::with_capacity(count);
    let mut attempts = 0;
    while instances.len() < count {
        if attempts >= PLACEMENT_ATTEMPTS {
            return Err(Error::Placement {
                requested: count,
                attempts,
            });
        }
        attempts += 1;
        let class_id = rng.random_range(0..config.num_classes()) as u32;
        let size = rng.random_range(config.size_range.0..=config.size_range.1) as u32;
        let kind = config.class_shapes[class_id as usize];
        let (w, h) = object_extent(kind, size);
        let x0 = rng.random_range(0..=(n as u32 - w));
        let y0 = rng.random_range(0..=(n as u32 - h));
        let bbox = PixelBox {
            x0,
            y0,
            x1: x0 + w,
            y1: y0 + h,
        };
        if instances.iter().any(|o| o.bbox.overlaps(bbox)) {
            continue;
        }
        instances.push(AnnotatedInstance { class_id, bbox });
    }

    let mut canvas: Vec<[f64; 3]> = vec![BACKGROUND; n * n];
    for inst in &instances {
        let color = PALETTE[inst.class_id as usize];
        let kind = config.class_shapes[inst.class_id as usize];
        let b = inst.bbox;
        let (bw, bh) = ((b.x1 - b.x0) as f64, (b.y1 - b.y0) as f64);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let u = (x - b.x0) as f64 / bw + 0.5 / bw;
                let v = (y - b.y0) as f64 / bh + 0.5 / bh;
                if kind.covers(u, v) {
                    canvas[y as usize * n + x as usize] = color;
                }
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut image = RgbImage::new(n, n);
    for (i, px) in canvas.iter().enumerate() {
        for c in 0..3 {
            let jitter = if config.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let v = (px[c] + jitter).clamp(0.0, 1.0);
            image.pixels[i * 3 + c] = (v * 255.0).round() as u8;
        }
    }
    Ok(Scene {
        index,
        image,
        instances,
    })
}

/// Generates scenes `0..count`.
pub fn generate_scenes(config: &SceneConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count).map(|i| generate_scene(config, i)).collect()
}

//! `checkpoint.json` lists tensors by name with their shapes and byte ranges in
//! `weights.bin`, which holds little-endian f64 values in listed order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig, Params};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub model: ModelConfig,
    pub classes: Vec<u32>,
    pub tensors: Vec<TensorEntry>,
}

pub fn encode(detector: &Detector) -> (CheckpointManifest, Vec<u8>) {
    let mut weights = Vec::with_capacity(detector.params.count() * 8);
    let mut tensors = Vec::with_capacity(detector.params.len());
    for (name, t) in detector.params.iter() {
        let bytes = t.to_le_bytes();
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: weights.len(),
            bytes: bytes.len(),
        });
        weights.extend_from_slice(&bytes);
    }
    let manifest = CheckpointManifest {
        model: detector.config.clone(),
        classes: detector.classes.clone(),
        tensors,
    };
    (manifest, weights)
}

pub fn decode(manifest: &CheckpointManifest, weights: &[u8]) -> Result<Detector> {
    let mut params = Params::new();
    for e in &manifest.tensors {
        let count: usize = e.shape.iter().product();
        if e.bytes != count * 8 {
            return Err(Error::Format(format!("{}: {} bytes for shape {:?}", e.name, e.bytes, e.shape)));
        }
        let raw = weights
            .get(e.offset..e.offset + e.bytes)
            .ok_or_else(|| Error::Format(format!("{}: byte range past end of weights", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    let expected = Detector::init(manifest.model.clone(), manifest.classes.clone(), 0)?;
    for (name, t) in expected.params.iter() {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            Some(p) => {
                return Err(Error::Format(format!(
                    "{name}: shape {:?}, model expects {:?}",
                    p.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Format(format!("checkpoint lacks {name}"))),
        }
    }
    if params.len() != expected.params.len() {
        return Err(Error::Format("checkpoint holds unexpected tensors".into()));
    }
    Ok(Detector {
        config: manifest.model.clone(),
        classes: manifest.classes.clone(),
        params,
    })
}

pub fn save(dir: &Path, detector: &Detector) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (manifest, weights) = encode(detector);
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    let wpath = dir.join(WEIGHTS_FILE);
    fs::write(&wpath, weights).map_err(|e| Error::io(&wpath, e))
}

pub fn load(dir: &Path) -> Result<Detector> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text)?;
    let wpath = dir.join(WEIGHTS_FILE);
    let weights = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    decode(&manifest, &weights)
}

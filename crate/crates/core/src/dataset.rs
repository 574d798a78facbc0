//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json        {"image_size":64,"image_count":N,"classes":[{"id":0,"shape":"disk"},...]}
//! <dir>/annotations.jsonl    {"image":"000017.ppm","class":3,"bbox":[x0,y0,x1,y1]}  one per line
//! <dir>/images/000000.ppm    binary P6, 8-bit channels
//! ```
//!
//! All integers are decimal; files are UTF-8 with LF line endings.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{image_file_name, AnnotatedInstance, PixelBox, RgbImage, Scene, SceneConfig, ShapeKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub shape: ShapeKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub image_size: usize,
    pub image_count: usize,
    pub classes: Vec<ClassInfo>,
}

impl Manifest {
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub scenes: Vec<Scene>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationLine {
    image: String,
    class: u32,
    bbox: [u32; 4],
}

impl Dataset {
    pub fn from_scenes(config: &SceneConfig, scenes: Vec<Scene>) -> Self {
        let classes = config
            .class_shapes
            .iter()
            .enumerate()
            .map(|(id, &shape)| ClassInfo { id: id as u32, shape })
            .collect();
        Self {
            manifest: Manifest {
                image_size: config.image_size,
                image_count: scenes.len(),
                classes,
            },
            scenes,
        }
    }

    /// Generates `count` scenes and wraps them with a manifest.
    pub fn generate(config: &SceneConfig, count: usize) -> Result<Self> {
        let scenes = crate::synth::generate_scenes(config, count)?;
        Ok(Self::from_scenes(config, scenes))
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }

    /// Scenes are stored in index order, so `index` is also the position.
    pub fn scene(&self, index: usize) -> Option<&Scene> {
        self.scenes.get(index)
    }
}

pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let bad = |m: &str| Error::Format(format!("ppm: {m}"));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P6" {
        return Err(bad("magic must be P6"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header integer"));
    let (w, h, max) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
    if max != 255 {
        return Err(bad("only 8-bit channels are supported"));
    }
    pos += 1; // single whitespace byte after maxval
    let body = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    if body.len() != w * h * 3 {
        return Err(bad(&format!("expected {} pixel bytes, found {}", w * h * 3, body.len())));
    }
    Ok(RgbImage {
        width: w,
        height: h,
        pixels: body.to_vec(),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = serde_json::to_string_pretty(&dataset.manifest)?;
    manifest.push('\n');
    write_file(&dir.join("manifest.json"), manifest.as_bytes())?;

    let mut ann = Vec::new();
    for scene in &dataset.scenes {
        write_file(&images.join(scene.file_name()), &encode_ppm(&scene.image))?;
        for inst in &scene.instances {
            let line = AnnotationLine {
                image: scene.file_name(),
                class: inst.class_id,
                bbox: [inst.bbox.x0, inst.bbox.y0, inst.bbox.x1, inst.bbox.y1],
            };
            serde_json::to_writer(&mut ann, &line)?;
            ann.write_all(b"\n").expect("vec write");
        }
    }
    write_file(&dir.join("annotations.jsonl"), &ann)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let images_dir = dir.join("images");
    let on_disk = match fs::read_dir(&images_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok())
            .filter(|e| e.path().extension().is_some_and(|x| x == "ppm"))
            .count(),
        Err(_) if manifest.image_count == 0 => 0,
        Err(e) => return Err(Error::io(&images_dir, e)),
    };
    if on_disk != manifest.image_count {
        return Err(Error::Format(format!(
            "manifest declares {} images but {} were found in {}",
            manifest.image_count,
            on_disk,
            images_dir.display()
        )));
    }

    let mut scenes = Vec::with_capacity(manifest.image_count);
    for index in 0..manifest.image_count {
        let path = images_dir.join(image_file_name(index));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let image = decode_ppm(&bytes)?;
        if image.width != manifest.image_size || image.height != manifest.image_size {
            return Err(Error::Format(format!(
                "{} is {}x{}, manifest says {}",
                path.display(),
                image.width,
                image.height,
                manifest.image_size
            )));
        }
        scenes.push(Scene {
            index,
            image,
            instances: Vec::new(),
        });
    }

    let ann_path = dir.join("annotations.jsonl");
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let known: Vec<u32> = manifest.class_ids();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: ann_path.clone(),
            line: lineno,
            msg,
        };
        let rec: AnnotationLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let index = rec
            .image
            .strip_suffix(".ppm")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&i| i < manifest.image_count && image_file_name(i) == rec.image)
            .ok_or_else(|| parse_err(format!("unknown image {}", rec.image)))?;
        if !known.contains(&rec.class) {
            return Err(parse_err(format!("unknown class {}", rec.class)));
        }
        let [x0, y0, x1, y1] = rec.bbox;
        let size = manifest.image_size as u32;
        if !(x0 < x1 && x1 <= size && y0 < y1 && y1 <= size) {
            return Err(parse_err(format!("invalid bbox {:?}", rec.bbox)));
        }
        scenes[index].instances.push(AnnotatedInstance {
            class_id: rec.class,
            bbox: PixelBox { x0, y0, x1, y1 },
        });
    }
    Ok(Dataset { manifest, scenes })
}

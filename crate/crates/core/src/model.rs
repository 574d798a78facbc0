//! Feature-reweighting detector.
//!
//! A stem plus three stride-2 stages produce feature maps at three scales. The
//! same extractor runs on query images and on masked support images; pooled
//! support features become per-class reweighting vectors that scale the query
//! features channel-wise, one group per class. A shared 1x1 head per scale
//! turns every group into `[tx, ty, tw, th, o, s_1 .. s_N]` per cell.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Graph, NodeId, Padding};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::synth::MaskImage;
use crate::tensor::Tensor;

pub const NUM_SCALES: usize = 3;
/// Channels per head cell ahead of the class logits.
pub const BOX_CHANNELS: usize = 5;
pub const OBJ_CHANNEL: usize = 4;
/// Box-size exponent clamp.
pub const EXP_CLAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    /// Stride of the stem convolution; a 2x2 max-pool follows it.
    pub stem_stride: usize,
    pub channels: [usize; NUM_SCALES],
    /// Extra stride-1 3x3 convolutions after each stage's downsampling conv.
    #[serde(default)]
    pub stage_refine: usize,
    /// One anchor side length per scale, in pixels.
    pub anchors: [f64; NUM_SCALES],
    pub leaky_slope: f64,
}

impl ModelConfig {
    /// 16x16 configuration small enough for finite-difference checks.
    pub fn micro() -> Self {
        Self {
            image_size: 16,
            stem_channels: 3,
            stem_stride: 1,
            channels: [4, 4, 4],
            stage_refine: 0,
            anchors: [4.0, 8.0, 16.0],
            leaky_slope: 0.1,
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            stem_channels: 16,
            stem_stride: 2,
            channels: [32, 64, 128],
            stage_refine: 0,
            anchors: [8.0, 16.0, 32.0],
            leaky_slope: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn strides(&self) -> [usize; NUM_SCALES] {
        let base = self.stem_stride * 2;
        [base * 2, base * 4, base * 8]
    }

    pub fn grids(&self) -> [usize; NUM_SCALES] {
        self.strides().map(|s| self.image_size / s)
    }

    pub fn validate(&self) -> Result<()> {
        let strides = self.strides();
        if self.stem_stride == 0 || self.image_size % strides[2] != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} must be divisible by the coarsest stride {}",
                self.image_size, strides[2]
            )));
        }
        Ok(())
    }

    pub fn layout(&self, num_classes: usize) -> HeadLayout {
        let strides = self.strides();
        let grids = self.grids();
        HeadLayout {
            num_classes,
            image_size: self.image_size,
            scales: std::array::from_fn(|j| ScaleSpec {
                grid: grids[j],
                stride: strides[j] as f64,
                anchor: self.anchors[j],
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    pub grid: usize,
    pub stride: f64,
    pub anchor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLayout {
    pub num_classes: usize,
    pub image_size: usize,
    pub scales: [ScaleSpec; NUM_SCALES],
}

impl HeadLayout {
    pub fn channels(&self) -> usize {
        BOX_CHANNELS + self.num_classes
    }

    pub fn cells(&self, scale: usize) -> usize {
        self.scales[scale].grid * self.scales[scale].grid
    }

    /// Flat index of `channel` at `cell` within one `[C, G, G]` head map.
    pub fn index(&self, scale: usize, channel: usize, cell: usize) -> usize {
        channel * self.cells(scale) + cell
    }
}

/// Box decode: center `(cell + sigmoid(t)) * stride`, size `anchor * exp(clamp(t))`.
pub fn decode_box(spec: &ScaleSpec, cell_x: usize, cell_y: usize, t: [f64; 4]) -> BBox {
    let cx = (cell_x as f64 + sigmoid(t[0])) * spec.stride;
    let cy = (cell_y as f64 + sigmoid(t[1])) * spec.stride;
    let w = spec.anchor * t[2].clamp(-EXP_CLAMP, EXP_CLAMP).exp();
    let h = spec.anchor * t[3].clamp(-EXP_CLAMP, EXP_CLAMP).exp();
    BBox::from_center(cx, cy, w, h)
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    entries: Vec<(String, Tensor)>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }
}

fn conv_params(params: &mut Params, name: &str, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) {
    params.insert(
        format!("{name}.weight"),
        Tensor::fan_in_uniform(&[c_out, c_in, k, k], c_in * k * k, rng),
    );
    params.insert(format!("{name}.bias"), Tensor::zeros(&[c_out]));
}

pub fn stage_name(j: usize) -> String {
    format!("stage{}", j + 1)
}

pub fn refine_name(j: usize, r: usize) -> String {
    format!("stage{}.refine{}", j + 1, r + 1)
}

pub fn neck_name(j: usize) -> String {
    format!("neck{}", j + 1)
}

pub fn head_name(j: usize) -> String {
    format!("head{}", j + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: ModelConfig,
    /// Training classes in group order.
    pub classes: Vec<u32>,
    pub params: Params,
}

impl Detector {
    /// Seeded initialization: weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(config: ModelConfig, classes: Vec<u32>, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes.is_empty() {
            return Err(Error::InvalidArgument("detector needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        conv_params(&mut params, "stem", config.stem_channels, 3, 3, &mut rng);
        let mut c_in = config.stem_channels;
        for j in 0..NUM_SCALES {
            conv_params(&mut params, &stage_name(j), config.channels[j], c_in, 3, &mut rng);
            c_in = config.channels[j];
            for r in 0..config.stage_refine {
                conv_params(&mut params, &refine_name(j, r), c_in, c_in, 3, &mut rng);
            }
        }
        for j in 0..NUM_SCALES {
            let c = config.channels[j];
            conv_params(&mut params, &neck_name(j), c, c, 1, &mut rng);
        }
        for j in 0..NUM_SCALES {
            let c = config.channels[j];
            conv_params(&mut params, &head_name(j), BOX_CHANNELS + classes.len(), c, 1, &mut rng);
        }
        Ok(Self {
            config,
            classes,
            params,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn layout(&self) -> HeadLayout {
        self.config.layout(self.classes.len())
    }

    /// Widens the head to `new_classes`, copying the rows of classes already
    /// known and initializing the rest from `seed`.
    pub fn grow_classes(&self, new_classes: &[u32], seed: u64) -> Result<Detector> {
        let fresh = Detector::init(self.config.clone(), new_classes.to_vec(), seed)?;
        let mut params = self.params.clone();
        for j in 0..NUM_SCALES {
            let c = self.config.channels[j];
            let wname = format!("{}.weight", head_name(j));
            let bname = format!("{}.bias", head_name(j));
            let (old_w, old_b) = (self.params.require(&wname)?, self.params.require(&bname)?);
            let mut w = fresh.params.require(&wname)?.clone();
            let mut b = fresh.params.require(&bname)?.clone();
            let mut copy_row = |from: usize, to: usize| {
                w.data_mut()[to * c..(to + 1) * c].copy_from_slice(&old_w.data()[from * c..(from + 1) * c]);
                b.data_mut()[to] = old_b.data()[from];
            };
            for ch in 0..BOX_CHANNELS {
                copy_row(ch, ch);
            }
            for (old_pos, class) in self.classes.iter().enumerate() {
                if let Some(new_pos) = new_classes.iter().position(|c| c == class) {
                    copy_row(BOX_CHANNELS + old_pos, BOX_CHANNELS + new_pos);
                }
            }
            params.insert(wname, w);
            params.insert(bname, b);
        }
        Ok(Detector {
            config: self.config.clone(),
            classes: new_classes.to_vec(),
            params,
        })
    }

    /// Places every parameter on `graph`; names for which `trainable` is false
    /// become constants.
    pub fn bind(&self, graph: &mut Graph, trainable: impl Fn(&str) -> bool) -> BoundParams {
        let nodes = self
            .params
            .iter()
            .map(|(name, t)| (name.to_string(), graph.leaf(t.clone(), trainable(name))))
            .collect();
        BoundParams {
            config: self.config.clone(),
            num_classes: self.classes.len(),
            nodes,
        }
    }
}

/// Parameter nodes of a [`Detector`] placed on one graph.
#[derive(Debug, Clone)]
pub struct BoundParams {
    config: ModelConfig,
    num_classes: usize,
    nodes: Vec<(String, NodeId)>,
}

impl BoundParams {
    /// Wraps nodes already on a graph, in the detector's parameter order.
    pub fn from_nodes(detector: &Detector, ids: &[NodeId]) -> Result<Self> {
        if ids.len() != detector.params.len() {
            return Err(Error::shape(
                "bind",
                format!("{} nodes for {} parameters", ids.len(), detector.params.len()),
            ));
        }
        Ok(Self {
            config: detector.config.clone(),
            num_classes: detector.classes.len(),
            nodes: detector.params.names().into_iter().zip(ids.iter().copied()).collect(),
        })
    }

    pub fn node(&self, name: &str) -> Result<NodeId> {
        self.nodes
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn nodes(&self) -> &[(String, NodeId)] {
        &self.nodes
    }

    pub fn layout(&self) -> HeadLayout {
        self.config.layout(self.num_classes)
    }

    fn conv(&self, g: &mut Graph, name: &str, x: NodeId, stride: usize, act: bool) -> Result<NodeId> {
        let w = self.node(&format!("{name}.weight"))?;
        let b = self.node(&format!("{name}.bias"))?;
        let y = g.conv2d(x, w, b, stride, Padding::Same)?;
        Ok(if act { g.leaky_relu(y, self.config.leaky_slope) } else { y })
    }

    /// Per-scale feature maps `[c_j, G_j, G_j]`.
    pub fn features(&self, g: &mut Graph, image: NodeId) -> Result<[NodeId; NUM_SCALES]> {
        let shape = g.value(image).shape();
        let s = self.config.image_size;
        if shape != [3, s, s] {
            return Err(Error::shape("features", format!("expected image [3, {s}, {s}], got {shape:?}")));
        }
        let stem = self.conv(g, "stem", image, self.config.stem_stride, true)?;
        let mut x = g.max_pool2(stem)?;
        let mut out = [x; NUM_SCALES];
        for (j, slot) in out.iter_mut().enumerate() {
            x = self.conv(g, &stage_name(j), x, 2, true)?;
            for r in 0..self.config.stage_refine {
                x = self.conv(g, &refine_name(j, r), x, 1, true)?;
            }
            *slot = self.conv(g, &neck_name(j), x, 1, true)?;
        }
        Ok(out)
    }

    /// Pooled masked support features, one vector per scale.
    pub fn support_vectors(&self, g: &mut Graph, image: NodeId, mask: &MaskImage) -> Result<[NodeId; NUM_SCALES]> {
        if mask.size != self.config.image_size {
            return Err(Error::shape(
                "extract_support",
                format!("mask is {0}x{0}, image is {1}x{1}", mask.size, self.config.image_size),
            ));
        }
        let feats = self.features(g, image)?;
        let grids = self.config.grids();
        let mut out = feats;
        for j in 0..NUM_SCALES {
            let m = g.constant(mask.downsample(grids[j]));
            let masked = g.spatial_mul(feats[j], m)?;
            out[j] = g.global_avg_pool(masked)?;
        }
        Ok(out)
    }

    /// Channel-wise products: `groups[i][j] = features[j] * vectors[i][j]`.
    pub fn reweight(
        &self,
        g: &mut Graph,
        features: &[NodeId; NUM_SCALES],
        vectors: &[[NodeId; NUM_SCALES]],
    ) -> Result<Vec<[NodeId; NUM_SCALES]>> {
        vectors
            .iter()
            .map(|v| {
                let mut group = *features;
                for j in 0..NUM_SCALES {
                    group[j] = g.channel_mul(features[j], v[j])?;
                }
                Ok(group)
            })
            .collect()
    }

    /// Raw head maps `[5 + N, G_j, G_j]` per group and scale.
    pub fn head(&self, g: &mut Graph, groups: &[[NodeId; NUM_SCALES]]) -> Result<HeadNodes> {
        if groups.len() != self.num_classes {
            return Err(Error::shape(
                "head_forward",
                format!("{} groups for {} classes", groups.len(), self.num_classes),
            ));
        }
        let maps = groups
            .iter()
            .map(|group| {
                let mut out = *group;
                for j in 0..NUM_SCALES {
                    out[j] = self.conv(g, &head_name(j), group[j], 1, false)?;
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(HeadNodes {
            layout: self.layout(),
            maps,
        })
    }
}

/// Head maps on a graph, `maps[group][scale]`.
#[derive(Debug, Clone)]
pub struct HeadNodes {
    pub layout: HeadLayout,
    pub maps: Vec<[NodeId; NUM_SCALES]>,
}

impl HeadNodes {
    pub fn values(&self, g: &Graph) -> HeadOutput {
        HeadOutput {
            layout: self.layout,
            maps: self
                .maps
                .iter()
                .map(|m| m.map(|id| g.value(id).clone()))
                .collect(),
        }
    }
}

/// Head predictions as plain values, `maps[group][scale]` of shape `[5 + N, G, G]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub layout: HeadLayout,
    pub maps: Vec<[Tensor; NUM_SCALES]>,
}

/// One group's prediction at one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    pub bbox: BBox,
    pub objectness: f64,
    pub class_logits: Vec<f64>,
}

impl HeadOutput {
    pub fn num_groups(&self) -> usize {
        self.maps.len()
    }

    pub fn raw(&self, group: usize, scale: usize, channel: usize, cell: usize) -> f64 {
        self.maps[group][scale].data()[self.layout.index(scale, channel, cell)]
    }

    pub fn cell(&self, group: usize, scale: usize, cell: usize) -> CellPrediction {
        let spec = &self.layout.scales[scale];
        let t = std::array::from_fn(|c| self.raw(group, scale, c, cell));
        let (gx, gy) = (cell % spec.grid, cell / spec.grid);
        CellPrediction {
            bbox: decode_box(spec, gx, gy, t),
            objectness: self.raw(group, scale, OBJ_CHANNEL, cell),
            class_logits: (0..self.layout.num_classes)
                .map(|c| self.raw(group, scale, BOX_CHANNELS + c, cell))
                .collect(),
        }
    }
}

/// Per-scale reweighting vectors for one class.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightVector {
    pub class_id: u32,
    pub scales: [Tensor; NUM_SCALES],
}

impl ReweightVector {
    pub fn is_finite(&self) -> bool {
        self.scales.iter().all(Tensor::is_finite)
    }
}

impl Detector {
    pub fn extract_support(&self, class_id: u32, image: &Tensor, mask: &MaskImage) -> Result<ReweightVector> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let x = g.constant(image.clone());
        let v = bound.support_vectors(&mut g, x, mask)?;
        Ok(ReweightVector {
            class_id,
            scales: v.map(|id| g.value(id).clone()),
        })
    }

    pub fn extract_meta_features(&self, image: &Tensor) -> Result<[Tensor; NUM_SCALES]> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let x = g.constant(image.clone());
        let f = bound.features(&mut g, x)?;
        Ok(f.map(|id| g.value(id).clone()))
    }

    /// Group features for each vector, `out[group][scale]`.
    pub fn reweight(
        &self,
        features: &[Tensor; NUM_SCALES],
        vectors: &[ReweightVector],
    ) -> Result<Vec<[Tensor; NUM_SCALES]>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let f = features.clone().map(|t| g.constant(t));
        let v: Vec<[NodeId; NUM_SCALES]> = vectors
            .iter()
            .map(|rv| rv.scales.clone().map(|t| g.constant(t)))
            .collect();
        let groups = bound.reweight(&mut g, &f, &v)?;
        Ok(groups.iter().map(|grp| grp.map(|id| g.value(id).clone())).collect())
    }

    pub fn head_forward(&self, groups: &[[Tensor; NUM_SCALES]]) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let nodes: Vec<[NodeId; NUM_SCALES]> = groups.iter().map(|grp| grp.clone().map(|t| g.constant(t))).collect();
        Ok(bound.head(&mut g, &nodes)?.values(&g))
    }

    /// Full query pass against fixed reweighting vectors.
    pub fn forward(&self, image: &Tensor, vectors: &[ReweightVector]) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, |_| false);
        let x = g.constant(image.clone());
        let f = bound.features(&mut g, x)?;
        let v: Vec<[NodeId; NUM_SCALES]> = vectors
            .iter()
            .map(|rv| rv.scales.clone().map(|t| g.constant(t)))
            .collect();
        let groups = bound.reweight(&mut g, &f, &v)?;
        Ok(bound.head(&mut g, &groups)?.values(&g))
    }
}

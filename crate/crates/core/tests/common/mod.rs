//! Gradient-check cases shared by the op suites and the acceptance run.
#![allow(dead_code)]

use metafsod::autodiff::{Graph, NodeId, Padding};
use metafsod::geometry::BBox;
use metafsod::gradcheck::grad_check;
use metafsod::loss::{image_loss, LossConfig, Target};
use metafsod::model::{BoundParams, Detector, ModelConfig};
use metafsod::synth::MaskImage;
use metafsod::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-6;
pub const TOL: f64 = 1e-5;
pub const SEEDS: u64 = 10;

type Inputs = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;
type Build = Box<dyn Fn(&mut Graph, &[NodeId], u64) -> Result<NodeId>>;

pub struct OpCase {
    pub name: String,
    inputs: Inputs,
    build: Build,
}

impl OpCase {
    /// Max relative gradient error for one seed.
    pub fn error(&self, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (self.inputs)(&mut rng);
        grad_check(|g, ids| (self.build)(g, ids, seed), &xs, EPS).unwrap()
    }

    pub fn worst(&self) -> f64 {
        (0..SEEDS).map(|s| self.error(s)).fold(0.0, f64::max)
    }
}

fn case(
    name: impl Into<String>,
    inputs: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> + 'static,
    build: impl Fn(&mut Graph, &[NodeId], u64) -> Result<NodeId> + 'static,
) -> OpCase {
    OpCase {
        name: name.into(),
        inputs: Box::new(inputs),
        build: Box::new(build),
    }
}

/// Random constant weights so every output element reaches the loss.
fn project(g: &mut Graph, x: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = Tensor::uniform(g.value(x).shape(), -1.0, 1.0, &mut rng);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    Ok(g.sum(p))
}

/// Values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, -2.0, 2.0, rng);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v = 0.05_f64.copysign(*v);
        }
    }
    t
}

/// Distinct values at least 0.01 apart, for max pooling.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.3).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn uniform(shape: &'static [usize]) -> impl Fn(&mut ChaCha8Rng) -> Vec<Tensor> {
    move |rng| vec![Tensor::uniform(shape, -1.0, 1.0, rng)]
}

fn pair(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![Tensor::uniform(&[2, 3], -1.0, 1.0, rng), Tensor::uniform(&[2, 3], -1.0, 1.0, rng)]
}

fn kinked(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![away_from_zero(&[8], rng)]
}

/// A predicted box overlapping `gt` with no edge near a `gt` edge.
fn overlapping_box(rng: &mut ChaCha8Rng, gt: [f64; 4]) -> Tensor {
    loop {
        let x0 = rng.random_range(0.0..20.0);
        let y0 = rng.random_range(0.0..20.0);
        let w = rng.random_range(4.0..20.0);
        let h = rng.random_range(4.0..20.0);
        let b = [x0, y0, x0 + w, y0 + h];
        let clear = (0..4).all(|i| (0..4).all(|j| (b[i] - gt[j]).abs() > 0.05));
        let overlaps = b[0] < gt[2] && gt[0] < b[2] && b[1] < gt[3] && gt[1] < b[3];
        if clear && overlaps {
            return Tensor::from_vec(b.to_vec());
        }
    }
}

const GT: [f64; 4] = [6.0, 8.0, 18.0, 20.0];

/// Every differentiable primitive of the graph.
pub fn op_cases() -> Vec<OpCase> {
    let mut out = Vec::new();
    for (stride, padding) in [(1, Padding::Same), (2, Padding::Same), (1, Padding::Valid), (2, Padding::Valid)] {
        for k in [1usize, 3] {
            out.push(case(
                format!("conv2d k{k} s{stride} {padding:?}"),
                move |rng| {
                    vec![
                        Tensor::uniform(&[2, 7, 6], -1.0, 1.0, rng),
                        Tensor::uniform(&[3, 2, k, k], -1.0, 1.0, rng),
                        Tensor::uniform(&[3], -1.0, 1.0, rng),
                    ]
                },
                move |g, ids, seed| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride, padding)?;
                    project(g, y, seed)
                },
            ));
        }
    }
    out.push(case("add", pair, |g, ids, s| {
        let y = g.add(ids[0], ids[1])?;
        project(g, y, s)
    }));
    out.push(case("sub", pair, |g, ids, s| {
        let y = g.sub(ids[0], ids[1])?;
        project(g, y, s)
    }));
    out.push(case("mul", pair, |g, ids, s| {
        let y = g.mul(ids[0], ids[1])?;
        project(g, y, s)
    }));
    out.push(case("scale", uniform(&[5]), |g, ids, s| {
        let y = g.scale(ids[0], -2.5);
        project(g, y, s)
    }));
    out.push(case("offset", uniform(&[5]), |g, ids, s| {
        let y = g.offset(ids[0], 0.7);
        project(g, y, s)
    }));
    out.push(case("sigmoid", uniform(&[5]), |g, ids, s| {
        let y = g.sigmoid(ids[0]);
        project(g, y, s)
    }));
    out.push(case("exp", uniform(&[5]), |g, ids, s| {
        let y = g.exp(ids[0]);
        project(g, y, s)
    }));
    out.push(case("leaky_relu", kinked, |g, ids, s| {
        let y = g.leaky_relu(ids[0], 0.1);
        project(g, y, s)
    }));
    out.push(case("clamp", kinked, |g, ids, s| {
        let y = g.clamp(ids[0], -1.025, 1.025);
        project(g, y, s)
    }));
    out.push(case(
        "ln_floor",
        |rng| vec![Tensor::uniform(&[6], 0.2, 3.0, rng)],
        |g, ids, s| {
            let y = g.ln_floor(ids[0], 0.1);
            project(g, y, s)
        },
    ));
    out.push(case("max_pool2", |rng| vec![distinct(&[2, 6, 5], rng)], |g, ids, s| {
        let y = g.max_pool2(ids[0])?;
        project(g, y, s)
    }));
    out.push(case("global_avg_pool", uniform(&[3, 4, 5]), |g, ids, s| {
        let y = g.global_avg_pool(ids[0])?;
        project(g, y, s)
    }));
    out.push(case(
        "channel_mul",
        |rng| vec![Tensor::uniform(&[3, 4, 4], -1.0, 1.0, rng), Tensor::uniform(&[3], -1.0, 1.0, rng)],
        |g, ids, s| {
            let y = g.channel_mul(ids[0], ids[1])?;
            project(g, y, s)
        },
    ));
    out.push(case(
        "spatial_mul",
        |rng| vec![Tensor::uniform(&[3, 4, 4], -1.0, 1.0, rng), Tensor::uniform(&[1, 4, 4], -1.0, 1.0, rng)],
        |g, ids, s| {
            let y = g.spatial_mul(ids[0], ids[1])?;
            project(g, y, s)
        },
    ));
    out.push(case("softmax", uniform(&[5]), |g, ids, s| {
        let y = g.softmax(ids[0])?;
        project(g, y, s)
    }));
    out.push(case("gather", uniform(&[6]), |g, ids, s| {
        let y = g.gather(ids[0], &[4, 0, 4, 2])?;
        project(g, y, s)
    }));
    out.push(case(
        "concat",
        |rng| vec![Tensor::uniform(&[3], -1.0, 1.0, rng), Tensor::uniform(&[2], -1.0, 1.0, rng)],
        |g, ids, s| {
            let y = g.concat(&[ids[0], ids[1], ids[0]])?;
            project(g, y, s)
        },
    ));
    out.push(case("sum", uniform(&[2, 3]), |g, ids, _| Ok(g.sum(ids[0]))));
    out.push(case("mean", uniform(&[2, 3]), |g, ids, _| Ok(g.mean(ids[0]))));
    out.push(case("bce_with_logits", |rng| vec![Tensor::uniform(&[6], -4.0, 4.0, rng)], |g, ids, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 50);
        let t: Vec<f64> = (0..6).map(|_| rng.random_range(0.0..1.0)).collect();
        g.bce_with_logits(ids[0], &t)
    }));
    out.push(case("bce_weighted", |rng| vec![Tensor::uniform(&[6], -4.0, 4.0, rng)], |g, ids, s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s + 60);
        let t: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.random_range(0.5..5.0)).collect();
        g.bce_weighted(ids[0], &t, &w)
    }));
    out.push(case("iou", |rng| vec![overlapping_box(rng, GT)], |g, ids, _| g.iou(ids[0], GT)));
    out.push(case("center_penalty", |rng| vec![overlapping_box(rng, GT)], |g, ids, _| {
        g.center_penalty(ids[0], GT)
    }));
    // disjoint boxes: iou is flat, the center term still pulls
    out.push(case(
        "center_penalty disjoint",
        |rng| {
            let x0 = rng.random_range(25.0..30.0);
            vec![Tensor::from_vec(vec![x0, 1.0, x0 + 5.0, 4.0])]
        },
        |g, ids, _| g.center_penalty(ids[0], GT),
    ));
    out
}

fn box_mask(size: usize, b: BBox) -> MaskImage {
    let mut data = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64, y as f64);
            if fx >= b.x0 && fx < b.x1 && fy >= b.y0 && fy < b.y1 {
                data[y * size + x] = 1.0;
            }
        }
    }
    MaskImage { size, data }
}

/// Gradient error of the full weighted loss on a 2-class 16x16 detector,
/// taken over every parameter.
pub fn full_loss_error(seed: u64) -> f64 {
    let det = Detector::init(ModelConfig::micro(), vec![0, 1], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let img = |rng: &mut ChaCha8Rng| Tensor::uniform(&[3, 16, 16], 0.0, 1.0, rng);
    let supports = [img(&mut rng), img(&mut rng)];
    let masks = [box_mask(16, BBox::new(2.0, 3.0, 9.0, 10.0)), box_mask(16, BBox::new(6.0, 5.0, 15.0, 13.0))];
    let query = img(&mut rng);
    let targets = vec![
        Target { group: 0, bbox: BBox::new(1.0, 2.0, 6.0, 8.0) },
        Target { group: 1, bbox: BBox::new(rng.random_range(5.0..7.0), 6.0, 15.0, 15.0) },
    ];
    let inputs: Vec<Tensor> = det.params.iter().map(|(_, t)| t.clone()).collect();
    let f = |g: &mut Graph, ids: &[NodeId]| {
        let bound = BoundParams::from_nodes(&det, ids)?;
        let mut vectors = Vec::new();
        for (s, m) in supports.iter().zip(&masks) {
            let x = g.constant(s.clone());
            vectors.push(bound.support_vectors(g, x, m)?);
        }
        let q = g.constant(query.clone());
        let feats = bound.features(g, q)?;
        let groups = bound.reweight(g, &feats, &vectors)?;
        let head = bound.head(g, &groups)?;
        Ok(image_loss(g, &head, &targets, &LossConfig::new(0.1))?.total)
    };
    grad_check(f, &inputs, EPS).unwrap()
}

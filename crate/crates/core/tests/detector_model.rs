use metafsod::checkpoint::{self, MANIFEST_FILE, WEIGHTS_FILE};
use metafsod::model::{head_name, Detector, ModelConfig, ReweightVector, BOX_CHANNELS, NUM_SCALES, OBJ_CHANNEL};
use metafsod::synth::MaskImage;
use metafsod::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Tensor {
    Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn model(classes: usize, seed: u64) -> Detector {
    Detector::init(ModelConfig::default(), (0..classes as u32).collect(), seed).unwrap()
}

fn filled_mask(value: f64) -> MaskImage {
    MaskImage { size: 64, data: vec![value; 64 * 64] }
}

/// Per-channel mean of `features * max_pool(mask)` written out directly.
fn pooled_masked(features: &Tensor, mask: &MaskImage) -> Vec<f64> {
    let (c, g) = (features.shape()[0], features.shape()[1]);
    let cell = 64 / g;
    let mut small = vec![0.0; g * g];
    for y in 0..64 {
        for x in 0..64 {
            let k = (y / cell) * g + x / cell;
            small[k] = f64::max(small[k], mask.data[y * 64 + x]);
        }
    }
    (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for (k, m) in small.iter().enumerate() {
                s += features.data()[ch * g * g + k] * m;
            }
            s / (g * g) as f64
        })
        .collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol * y.abs().max(1.0))
}

#[test]
fn zero_mask_gives_zero_vectors() {
    let m = model(3, 1);
    let v = m.extract_support(2, &image(3), &filled_mask(0.0)).unwrap();
    assert_eq!(v.class_id, 2);
    for j in 0..NUM_SCALES {
        assert_eq!(v.scales[j].shape(), &[m.config.channels[j]]);
        assert!(v.scales[j].data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn full_mask_is_plain_average_pool() {
    let m = model(3, 1);
    let img = image(4);
    let v = m.extract_support(0, &img, &filled_mask(1.0)).unwrap();
    let f = m.extract_meta_features(&img).unwrap();
    for j in 0..NUM_SCALES {
        let g2 = f[j].shape()[1] * f[j].shape()[2];
        let mean: Vec<f64> = f[j].data().chunks(g2).map(|c| c.iter().sum::<f64>() / g2 as f64).collect();
        assert!(close(v.scales[j].data(), &mean, 1e-12));
    }
}

#[test]
fn random_masks_match_elementwise_oracle() {
    let m = model(2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for trial in 0..8 {
        let img = image(100 + trial);
        let x0 = rng.random_range(0..50);
        let y0 = rng.random_range(0..50);
        let (x1, y1) = (rng.random_range(x0 + 1..=64), rng.random_range(y0 + 1..=64));
        let mut mask = filled_mask(0.0);
        for y in y0..y1 {
            for x in x0..x1 {
                mask.data[y * 64 + x] = 1.0;
            }
        }
        let v = m.extract_support(1, &img, &mask).unwrap();
        let f = m.extract_meta_features(&img).unwrap();
        for j in 0..NUM_SCALES {
            assert!(close(v.scales[j].data(), &pooled_masked(&f[j], &mask), 1e-12), "trial {trial} scale {j}");
        }
    }
}

#[test]
fn mask_size_mismatch_is_an_error() {
    let m = model(2, 5);
    let small = MaskImage { size: 32, data: vec![1.0; 32 * 32] };
    assert!(m.extract_support(0, &image(1), &small).is_err());
}

#[test]
fn feature_shapes_and_determinism() {
    let m = model(3, 2);
    let f = m.extract_meta_features(&image(1)).unwrap();
    let shapes: Vec<&[usize]> = f.iter().map(|t| t.shape()).collect();
    assert_eq!(shapes, vec![&[32, 8, 8][..], &[64, 4, 4][..], &[128, 2, 2][..]]);
    assert_eq!(m.extract_meta_features(&image(1)).unwrap(), f);
    let wrong = Tensor::uniform(&[3, 48, 48], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(m.extract_meta_features(&wrong).is_err());
}

#[test]
fn single_pixel_perturbation_reaches_every_scale() {
    let m = model(2, 3);
    let img = image(8);
    let base = m.extract_meta_features(&img).unwrap();
    for &(x, y) in &[(0usize, 0usize), (31, 40), (63, 63)] {
        let mut bumped = img.clone();
        bumped.data_mut()[y * 64 + x] += 0.7;
        let f = m.extract_meta_features(&bumped).unwrap();
        for j in 0..NUM_SCALES {
            assert_ne!(f[j], base[j], "pixel ({x},{y}) scale {j}");
        }
    }
}

fn vectors(m: &Detector, fill: impl Fn(usize, usize) -> f64) -> ReweightVector {
    ReweightVector {
        class_id: 0,
        scales: std::array::from_fn(|j| Tensor::from_vec((0..m.config.channels[j]).map(|c| fill(j, c)).collect())),
    }
}

#[test]
fn reweight_identity_zero_and_broadcast() {
    let m = model(3, 4);
    let f = m.extract_meta_features(&image(2)).unwrap();
    let ones = vectors(&m, |_, _| 1.0);
    let zeros = vectors(&m, |_, _| 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let coeffs: Vec<Vec<f64>> = (0..NUM_SCALES).map(|j| (0..m.config.channels[j]).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let random = vectors(&m, |j, c| coeffs[j][c]);
    let groups = m.reweight(&f, &[ones, zeros, random]).unwrap();
    assert_eq!(groups.len(), 3);
    for j in 0..NUM_SCALES {
        assert_eq!(groups[0][j], f[j]);
        assert!(groups[1][j].data().iter().all(|&x| x == 0.0));
        let g2 = f[j].shape()[1] * f[j].shape()[2];
        let want: Vec<f64> = f[j].data().iter().enumerate().map(|(k, x)| x * coeffs[j][k / g2]).collect();
        assert_eq!(groups[2][j].data(), &want[..]);
    }
    let short = ReweightVector { class_id: 0, scales: std::array::from_fn(|_| Tensor::from_vec(vec![1.0; 3])) };
    assert!(m.reweight(&f, &[short]).is_err());
}

#[test]
fn zero_head_decodes_anchor_boxes() {
    let mut m = model(2, 6);
    for j in 0..NUM_SCALES {
        for part in ["weight", "bias"] {
            let t = m.params.get_mut(&format!("{}.{part}", head_name(j))).unwrap();
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let v = m.extract_support(0, &image(1), &filled_mask(1.0)).unwrap();
    let head = m.forward(&image(2), &[v.clone(), v]).unwrap();
    let layout = head.layout;
    for g in 0..2 {
        for j in 0..NUM_SCALES {
            let spec = layout.scales[j];
            for cell in 0..layout.cells(j) {
                let p = head.cell(g, j, cell);
                let (cx, cy) = ((cell % spec.grid) as f64 + 0.5, (cell / spec.grid) as f64 + 0.5);
                assert_eq!(p.bbox.center(), (cx * spec.stride, cy * spec.stride));
                assert_eq!((p.bbox.width(), p.bbox.height()), (spec.anchor, spec.anchor));
                assert_eq!(1.0 / (1.0 + (-p.objectness).exp()), 0.5);
            }
        }
    }
}

#[test]
fn four_classes_give_four_groups_of_nine_channels() {
    let m = model(4, 7);
    let v = m.extract_support(0, &image(1), &filled_mask(1.0)).unwrap();
    let vs: Vec<ReweightVector> = (0..4).map(|_| v.clone()).collect();
    let head = m.forward(&image(2), &vs).unwrap();
    assert_eq!(head.maps.len(), 4);
    for g in &head.maps {
        for (j, t) in g.iter().enumerate() {
            let grid = [8, 4, 2][j];
            assert_eq!(t.shape(), &[9, grid, grid]);
        }
    }
    assert!(m.forward(&image(2), &vs[..3]).is_err());
}

#[test]
fn head_matches_pointwise_conv_and_decode_oracle() {
    let m = model(3, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = m.extract_meta_features(&image(5)).unwrap();
    let vs: Vec<ReweightVector> = (0..3)
        .map(|_| ReweightVector {
            class_id: 0,
            scales: std::array::from_fn(|j| Tensor::uniform(&[m.config.channels[j]], 0.0, 2.0, &mut rng)),
        })
        .collect();
    let groups = m.reweight(&f, &vs).unwrap();
    let head = m.head_forward(&groups).unwrap();
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    for (gi, group) in groups.iter().enumerate() {
        for j in 0..NUM_SCALES {
            let w = m.params.get(&format!("{}.weight", head_name(j))).unwrap().data();
            let b = m.params.get(&format!("{}.bias", head_name(j))).unwrap().data();
            let (c_in, grid) = (m.config.channels[j], [8usize, 4, 2][j]);
            let cells = grid * grid;
            let raw = |ch: usize, cell: usize| {
                let mut s = b[ch];
                for c in 0..c_in {
                    s += w[ch * c_in + c] * group[j].data()[c * cells + cell];
                }
                s
            };
            for cell in 0..cells {
                for ch in 0..BOX_CHANNELS + 3 {
                    let got = head.maps[gi][j].data()[ch * cells + cell];
                    assert!((got - raw(ch, cell)).abs() <= 1e-10 * got.abs().max(1.0));
                }
                let (stride, anchor) = ([8.0, 16.0, 32.0][j], [8.0, 16.0, 32.0][j]);
                let cx = ((cell % grid) as f64 + sig(raw(0, cell))) * stride;
                let cy = ((cell / grid) as f64 + sig(raw(1, cell))) * stride;
                let bw = anchor * raw(2, cell).clamp(-4.0, 4.0).exp();
                let bh = anchor * raw(3, cell).clamp(-4.0, 4.0).exp();
                let p = head.cell(gi, j, cell);
                let want = [cx - bw / 2.0, cy - bh / 2.0, cx + bw / 2.0, cy + bh / 2.0];
                assert!(close(&p.bbox.to_array(), &want, 1e-9));
                assert!(p.bbox.is_finite());
                assert!((p.objectness - raw(OBJ_CHANNEL, cell)).abs() <= 1e-10 * p.objectness.abs().max(1.0));
                let (px, py) = p.bbox.center();
                assert!((0.0..=64.0).contains(&px) && (0.0..=64.0).contains(&py));
            }
        }
    }
}

#[test]
fn backbone_is_shared_between_branches() {
    let mut m = model(2, 9);
    let img = image(3);
    let v0 = m.extract_support(0, &img, &filled_mask(1.0)).unwrap();
    let f0 = m.extract_meta_features(&img).unwrap();
    m.params.get_mut("stage1.weight").unwrap().data_mut()[0] += 0.3;
    let v1 = m.extract_support(0, &img, &filled_mask(1.0)).unwrap();
    let f1 = m.extract_meta_features(&img).unwrap();
    assert_ne!(v0.scales[0], v1.scales[0]);
    assert_ne!(f0[0], f1[0]);
    assert!(m.params.names().iter().all(|n| !n.starts_with("support")));
}

#[test]
fn head_growth_keeps_known_rows() {
    let base = model(3, 10);
    let grown = base.grow_classes(&[0, 1, 2, 3, 4], 11).unwrap();
    assert_eq!(grown.num_classes(), 5);
    for j in 0..NUM_SCALES {
        let c = base.config.channels[j];
        let name = format!("{}.weight", head_name(j));
        let (old, new) = (base.params.get(&name).unwrap(), grown.params.get(&name).unwrap());
        assert_eq!(new.shape(), &[10, c, 1, 1]);
        assert_eq!(&new.data()[..8 * c], &old.data()[..8 * c]);
    }
    for (name, t) in base.params.iter() {
        if !name.starts_with("head") {
            assert_eq!(grown.params.get(name).unwrap(), t);
        }
    }
    let v = grown.extract_support(0, &image(1), &filled_mask(1.0)).unwrap();
    let head = grown.forward(&image(2), &vec![v; 5]).unwrap();
    assert_eq!(head.maps.len(), 5);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let m = model(3, 12);
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &m).unwrap();
    assert_eq!(checkpoint::load(dir.path()).unwrap(), m);
    let bytes = std::fs::read(dir.path().join(WEIGHTS_FILE)).unwrap();
    assert_eq!(bytes.len(), 8 * m.params.count());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
    let first = &manifest["tensors"][0];
    let name = first["name"].as_str().unwrap();
    assert_eq!(first["offset"], 0);
    let value = f64::from_le_bytes(bytes[..8].try_into().unwrap());
    assert_eq!(value, m.params.get(name).unwrap().data()[0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn scaling_a_vector_scales_its_group(alpha in 0.01f64..10.0, seed in any::<u64>()) {
        let m = model(2, 1);
        let f = m.extract_meta_features(&image(seed % 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = ReweightVector {
            class_id: 0,
            scales: std::array::from_fn(|j| Tensor::uniform(&[m.config.channels[j]], -1.0, 1.0, &mut rng)),
        };
        let scaled = ReweightVector {
            class_id: 0,
            scales: std::array::from_fn(|j| Tensor::from_vec(v.scales[j].data().iter().map(|x| x * alpha).collect())),
        };
        let g = m.reweight(&f, &[v, scaled]).unwrap();
        for j in 0..NUM_SCALES {
            let want: Vec<f64> = g[0][j].data().iter().map(|x| x * alpha).collect();
            prop_assert!(close(g[1][j].data(), &want, 1e-12));
        }
    }
}

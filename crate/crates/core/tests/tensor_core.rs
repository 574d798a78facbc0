use metafsod::autodiff::{softmax, Graph, Padding};
use metafsod::gradcheck::grad_check;
use metafsod::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Direct five-loop convolution written against the shape law alone.
fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kk) = (k.shape()[0], k.shape()[2]);
    let ho = (h + 2 * pad - kk) / stride + 1;
    let wo = (w + 2 * pad - kk) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for ky in 0..kk {
                        for kx in 0..kk {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += x.at3(c, iy as usize, ix as usize) * k.data()[((o * ci + c) * kk + ky) * kk + kx];
                        }
                    }
                }
                out[(o * ho + oy) * wo + ox] = acc;
            }
        }
    }
    (vec![co, ho, wo], out)
}

fn conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: Padding) -> Tensor {
    let mut g = Graph::new();
    let (xi, ki, bi) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(xi, ki, bi, stride, padding).unwrap();
    g.value(y).clone()
}

#[test]
fn conv_identity_and_constant_field() {
    let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
    let y = conv(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), 1, Padding::Same);
    assert_eq!(y, x);
    let y = conv(&Tensor::full(&[1, 4, 4], 1.0), &Tensor::full(&[1, 1, 3, 3], 1.0), &Tensor::zeros(&[1]), 1, Padding::Valid);
    assert_eq!(y.shape(), &[1, 2, 2]);
    assert!(y.data().iter().all(|&v| v == 9.0));
}

#[test]
fn conv_matches_naive_loops() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng);
        let k = Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut rng);
        let b = Tensor::uniform(&[3], -1.0, 1.0, &mut rng);
        for (stride, padding, pad) in [(1, Padding::Same, 1), (1, Padding::Valid, 0), (2, Padding::Same, 1), (2, Padding::Valid, 0)] {
            let y = conv(&x, &k, &b, stride, padding);
            let (shape, want) = naive_conv(&x, &k, &b, stride, pad);
            assert_eq!(y.shape(), shape.as_slice());
            for (a, e) in y.data().iter().zip(&want) {
                assert!((a - e).abs() <= 1e-12, "seed {seed} stride {stride}: {a} vs {e}");
            }
        }
    }
}

#[test]
fn softmax_cases() {
    assert_eq!(softmax(&[0.0; 4]), vec![0.25; 4]);
    assert_eq!(softmax(&[-3.7]), vec![1.0]);
    // 50-digit evaluation rounded to f64
    let want = [0.09003057317038046, 0.24472847105479764, 0.6652409557748219];
    for (a, e) in softmax(&[1.0, 2.0, 3.0]).iter().zip(want) {
        assert!((a - e).abs() <= 2e-16, "{a} vs {e}");
    }
}

#[test]
fn global_avg_pool_cases() {
    let pool = |t: Tensor| {
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.global_avg_pool(x).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(pool(Tensor::full(&[3, 2, 5], 7.0)), vec![7.0; 3]);
    assert_eq!(pool(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()), vec![2.5]);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let t = Tensor::uniform(&[4, 6, 6], -5.0, 5.0, &mut rng);
    let got = pool(t.clone());
    for c in 0..4 {
        let mut s = 0.0;
        for y in 0..6 {
            for x in 0..6 {
                s += t.at3(c, y, x);
            }
        }
        assert!((got[c] - s / 36.0).abs() <= 1e-14);
    }
}

#[test]
fn backward_linear_and_quadratic() {
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.5, -2.0, 3.0]));
    let s = g.sum(x);
    assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(vec![0.5, -2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let s = g.sum(sq);
    let half = g.scale(s, 0.5);
    assert_eq!(g.backward(half).unwrap().get(x).unwrap(), &[0.5, -2.0, 3.0]);
}

#[test]
fn grad_check_softmax_cross_entropy() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::uniform(&[6], -3.0, 3.0, &mut rng);
        let err = grad_check(
            |g, ids| {
                let p = g.softmax(ids[0])?;
                let pt = g.gather(p, &[(seed % 6) as usize])?;
                let lp = g.ln_floor(pt, 1e-12);
                Ok(g.scale(lp, -1.0))
            },
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "seed {seed}: {err:e}");
    }
}

proptest! {
    #[test]
    fn conv_output_size_law(c in 1usize..3, h in 3usize..9, w in 3usize..9, k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3, same in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64((h * 31 + w) as u64);
        let x = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let kt = Tensor::uniform(&[2, c, k, k], -1.0, 1.0, &mut rng);
        let (padding, pad) = if same { (Padding::Same, k / 2) } else { (Padding::Valid, 0) };
        let y = conv(&x, &kt, &Tensor::zeros(&[2]), stride, padding);
        prop_assert_eq!(y.shape(), &[2, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1][..]);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = v.iter().map(|x| x + 7.5).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic(v in prop::collection::vec(-3.0f64..3.0, 1..8)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(Tensor::from_vec(v.clone()));
            let e = g.sigmoid(x);
            let m = g.mul(e, x).unwrap();
            let s = g.mean(m);
            g.backward(s).unwrap().get(x).unwrap().to_vec()
        };
        prop_assert_eq!(run(), run());
    }
}

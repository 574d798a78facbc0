use std::fs;

use metafsod::dataset::{read_dataset, write_dataset, Dataset};
use metafsod::synth::{
    generate_scene, render_mask, AnnotatedInstance, PixelBox, SceneConfig, ShapeKind, PALETTE,
};
use metafsod::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn to_u8(c: f64) -> u8 {
    (c * 255.0).round() as u8
}

/// Paints disks and squares from the annotations alone.
fn repaint(size: usize, instances: &[AnnotatedInstance], shapes: &[ShapeKind]) -> Vec<[u8; 3]> {
    let bg = [to_u8(0.18), to_u8(0.18), to_u8(0.2)];
    let mut out = vec![bg; size * size];
    for inst in instances {
        let b = inst.bbox;
        let (w, h) = ((b.x1 - b.x0) as f64, (b.y1 - b.y0) as f64);
        let (cx, cy) = ((b.x0 + b.x1) as f64 / 2.0, (b.y0 + b.y1) as f64 / 2.0);
        let color = PALETTE[inst.class_id as usize].map(to_u8);
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                let dx = (x as f64 + 0.5 - cx) / w;
                let dy = (y as f64 + 0.5 - cy) / h;
                let inside = match shapes[inst.class_id as usize] {
                    ShapeKind::Disk => dx * dx + dy * dy <= 0.25,
                    ShapeKind::Square => true,
                    other => panic!("no reference painter for {other:?}"),
                };
                if inside {
                    out[y as usize * size + x as usize] = color;
                }
            }
        }
    }
    out
}

#[test]
fn seed_42_scene_matches_independent_repaint() {
    let cfg = SceneConfig { noise_std: 0.0, ..SceneConfig::with_classes(2, 42) };
    assert_eq!(cfg.class_shapes, vec![ShapeKind::Disk, ShapeKind::Square]);
    for index in 0..25 {
        let s = generate_scene(&cfg, index).unwrap();
        if index == 0 {
            assert!(!s.instances.is_empty());
        }
        let want = repaint(64, &s.instances, &cfg.class_shapes);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(s.image.pixel(x, y), want[y * 64 + x], "scene {index} at ({x},{y})");
            }
        }
        for inst in &s.instances {
            let b = inst.bbox;
            assert!(b.x0 < b.x1 && b.x1 <= 64 && b.y0 < b.y1 && b.y1 <= 64);
            assert!(inst.class_id < 2);
        }
    }
}

#[test]
fn noisy_scenes_stay_in_unit_range_and_repeat() {
    let cfg = SceneConfig::with_classes(5, 42);
    let a = generate_scene(&cfg, 0).unwrap();
    assert_eq!(a, generate_scene(&cfg, 0).unwrap());
    assert!(a.image.to_tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.image.to_tensor().shape(), &[3, 64, 64]);
}

#[test]
fn empty_object_range_is_background() {
    let cfg = SceneConfig { objects_per_image: (0, 0), noise_std: 0.0, ..SceneConfig::with_classes(2, 5) };
    let s = generate_scene(&cfg, 7).unwrap();
    assert!(s.instances.is_empty());
    let bg = s.image.pixel(0, 0);
    assert!((0..64).all(|y| (0..64).all(|x| s.image.pixel(x, y) == bg)));
}

#[test]
fn crowded_scene_reports_placement_failure() {
    let cfg = SceneConfig { objects_per_image: (30, 30), size_range: (20, 20), ..SceneConfig::with_classes(2, 0) };
    assert!(matches!(generate_scene(&cfg, 0), Err(Error::Placement { .. })));
}

#[test]
fn mask_examples() {
    let inst = |x0, y0, x1, y1| AnnotatedInstance { class_id: 0, bbox: PixelBox { x0, y0, x1, y1 } };
    let full = render_mask(64, &inst(0, 0, 64, 64)).unwrap();
    assert!(full.data.iter().all(|&v| v == 1.0));
    let dot = render_mask(64, &inst(0, 0, 1, 1)).unwrap();
    assert_eq!(dot.get(0, 0), 1.0);
    assert_eq!(dot.sum(), 1.0);
    assert!(render_mask(64, &inst(60, 60, 65, 62)).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let x0 = rng.random_range(0..63);
        let y0 = rng.random_range(0..63);
        let b = inst(x0, y0, rng.random_range(x0 + 1..=64), rng.random_range(y0 + 1..=64));
        let m = render_mask(64, &b).unwrap();
        assert_eq!(m.sum() as u32, b.bbox.area());
        assert!(m.data.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn write_read_ten_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(&SceneConfig::with_classes(4, 3), 10).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    assert_eq!(read_dataset(dir.path()).unwrap(), ds);
}

#[test]
fn empty_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let ds = Dataset::generate(&SceneConfig::with_classes(3, 3), 0).unwrap();
    write_dataset(dir.path(), &ds).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest.image_count, 0);
    assert_eq!(back, ds);
}

fn write_fixture(dir: &std::path::Path, annotations: &str) {
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::write(
        dir.join("manifest.json"),
        r#"{"image_size":32,"image_count":1,"classes":[{"id":0,"shape":"disk"},{"id":1,"shape":"ring"}]}"#,
    )
    .unwrap();
    let mut ppm = b"P6\n32 32\n255\n".to_vec();
    for i in 0..32 * 32 {
        ppm.extend_from_slice(&[(i % 256) as u8, 7, 200]);
    }
    fs::write(dir.join("images/000000.ppm"), ppm).unwrap();
    fs::write(dir.join("annotations.jsonl"), annotations).unwrap();
}

#[test]
fn hand_written_fixture() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(
        dir.path(),
        "{\"image\":\"000000.ppm\",\"class\":1,\"bbox\":[2,3,12,15]}\n{\"image\":\"000000.ppm\",\"class\":0,\"bbox\":[20,20,32,30]}\n",
    );
    let ds = read_dataset(dir.path()).unwrap();
    assert_eq!(ds.manifest.image_size, 32);
    assert_eq!(ds.manifest.classes[1].shape, ShapeKind::Ring);
    let s = &ds.scenes[0];
    assert_eq!(s.image.pixel(5, 1), [37, 7, 200]);
    assert_eq!(
        s.instances,
        vec![
            AnnotatedInstance { class_id: 1, bbox: PixelBox { x0: 2, y0: 3, x1: 12, y1: 15 } },
            AnnotatedInstance { class_id: 0, bbox: PixelBox { x0: 20, y0: 20, x1: 32, y1: 30 } },
        ]
    );
}

#[test]
fn malformed_annotation_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "{\"image\":\"000000.ppm\",\"class\":1,\"bbox\":[2,3,12,15]}\n{\"image\":\"000000.ppm\",\"class\":0}\n");
    match read_dataset(dir.path()) {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("expected parse error, got {other:?}"),
    }
    write_fixture(dir.path(), "{\"image\":\"000000.ppm\",\"class\":9,\"bbox\":[2,3,12,15]}\n");
    assert!(matches!(read_dataset(dir.path()), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn image_count_mismatch_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), "");
    fs::copy(dir.path().join("images/000000.ppm"), dir.path().join("images/000001.ppm")).unwrap();
    assert!(matches!(read_dataset(dir.path()), Err(Error::Format(_))));
}

#[test]
fn class_shares_near_uniform() {
    let cfg = SceneConfig::with_classes(4, 99);
    let mut counts = [0usize; 4];
    let mut index = 0;
    while counts.iter().sum::<usize>() < 2000 {
        for inst in generate_scene(&cfg, index).unwrap().instances {
            counts[inst.class_id as usize] += 1;
        }
        index += 1;
    }
    let total: usize = counts.iter().sum();
    for c in counts {
        assert!((c as f64 / total as f64 - 0.25).abs() < 0.05, "{counts:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn round_trip_any_dataset(seed in any::<u64>(), classes in 2usize..7, count in 0usize..5, hi in 1usize..5) {
        let cfg = SceneConfig { objects_per_image: (0, hi), ..SceneConfig::with_classes(classes, seed) };
        let ds = Dataset::generate(&cfg, count).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        prop_assert_eq!(read_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn boxes_disjoint_and_in_bounds(seed in any::<u64>(), index in 0usize..1000) {
        let cfg = SceneConfig { objects_per_image: (2, 4), ..SceneConfig::with_classes(6, seed) };
        let s = generate_scene(&cfg, index).unwrap();
        for (k, a) in s.instances.iter().enumerate() {
            prop_assert!(a.bbox.x1 <= 64 && a.bbox.y1 <= 64);
            for b in &s.instances[k + 1..] {
                prop_assert!(a.bbox.to_bbox().iou(&b.bbox.to_bbox()) < 0.1);
            }
        }
    }
}

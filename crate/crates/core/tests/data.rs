use emanet::data::{
    generate_scene, generate_scene_with, scene_seed, Batch, BatchIter, DataDims, Scene,
    SceneOptions,
};

fn normal_at(s: &Scene, p: usize) -> [f32; 3] {
    let n = s.height * s.width;
    [
        s.normals.data()[p],
        s.normals.data()[n + p],
        s.normals.data()[2 * n + p],
    ]
}

#[test]
fn invariants_hold_over_100_seeds() {
    for seed in 0..100 {
        let s = generate_scene(scene_seed(1, seed), 64, 64, 5).unwrap();
        let n = 64 * 64;
        assert!(s.seg.iter().all(|&c| c < 5));
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let holes = s.valid.iter().filter(|v| !**v).count() as f64 / n as f64;
        assert!(
            (0.05..=0.15).contains(&holes),
            "seed {seed}: hole fraction {holes}"
        );
        for p in 0..n {
            let d = s.depth.data()[p];
            let len = normal_at(&s, p).iter().map(|v| v * v).sum::<f32>().sqrt();
            if s.valid[p] {
                assert!(d > 0.0, "seed {seed}: depth {d}");
                assert!((len - 1.0).abs() < 1e-5, "seed {seed}: normal length {len}");
            } else {
                assert_eq!((d, len), (0.0, 0.0));
            }
        }
        let classes: std::collections::BTreeSet<_> = s.seg.iter().collect();
        assert!(classes.len() >= 2, "seed {seed}: only {classes:?}");
    }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(
        generate_scene(42, 32, 64, 4).unwrap(),
        generate_scene(42, 32, 64, 4).unwrap()
    );
    assert_ne!(
        generate_scene(42, 32, 64, 4).unwrap(),
        generate_scene(43, 32, 64, 4).unwrap()
    );
}

#[test]
fn class_boundaries_are_depth_discontinuities() {
    let (mut jumps, mut edges) = (0, 0);
    for seed in 0..20 {
        let s = generate_scene(seed, 64, 64, 5).unwrap();
        let w = s.width;
        for i in 0..s.height {
            for j in 0..w {
                let p = i * w + j;
                for q in [
                    (j + 1 < w).then_some(p + 1),
                    (i + 1 < s.height).then_some(p + w),
                ]
                .into_iter()
                .flatten()
                {
                    if s.valid[p] && s.valid[q] && s.seg[p] != s.seg[q] {
                        edges += 1;
                        jumps += usize::from((s.depth.data()[p] - s.depth.data()[q]).abs() >= 0.1);
                    }
                }
            }
        }
    }
    assert!(edges > 100);
    assert!(jumps as f64 >= 0.9 * edges as f64, "{jumps}/{edges}");
}

#[test]
fn normals_match_finite_differences_of_depth() {
    let opts = SceneOptions {
        hole_fraction: (0.0, 0.0),
        ..SceneOptions::default()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..10 {
        let s = generate_scene_with(seed, 64, 64, 4, &opts).unwrap();
        let (h, w) = (s.height, s.width);
        let pitch = 1.0 / h.max(w) as f64;
        let d = |p: usize| s.depth.data()[p] as f64;
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let p = i * w + j;
                let plane = normal_at(&s, p);
                if [p - 1, p + 1, p - w, p + w]
                    .iter()
                    .any(|&q| normal_at(&s, q) != plane)
                {
                    continue;
                }
                let sx = (d(p + 1) - d(p - 1)) / (2.0 * pitch);
                let sy = (d(p + w) - d(p - w)) / (2.0 * pitch);
                let len = (sx * sx + sy * sy + 1.0).sqrt();
                let est = [-sx / len, -sy / len, 1.0 / len];
                let cos: f64 = est.iter().zip(&plane).map(|(a, &b)| a * b as f64).sum();
                worst = worst.max(cos.clamp(-1.0, 1.0).acos().to_degrees());
                checked += 1;
            }
        }
    }
    assert!(checked > 10_000);
    assert!(worst < 1.0, "worst angle {worst}°");
}

#[test]
fn downsampled_labels_are_consistent() {
    for seed in 0..10 {
        let s = generate_scene(seed, 64, 64, 5).unwrap();
        let l = s.labels_at_stride(4).unwrap();
        assert_eq!((l.height, l.width), (16, 16));
        let n = 16 * 16;
        for p in 0..n {
            let len = (0..3)
                .map(|c| l.normals[c * n + p].powi(2))
                .sum::<f32>()
                .sqrt();
            if l.valid[p] {
                assert!((len - 1.0).abs() < 1e-5, "seed {seed} pixel {p}: {len}");
                assert!(l.depth[p] > 0.0);
                assert!(l.seg[p] < 5);
            }
        }
    }
    let s = generate_scene(3, 64, 64, 5).unwrap();
    let full = s.labels_at_stride(1).unwrap();
    assert_eq!(full.seg, s.seg);
    assert_eq!(full.depth, s.depth.data());
    assert!(s.labels_at_stride(3).is_err());
}

#[test]
fn scene_file_round_trip() {
    let s = generate_scene(9, 32, 32, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scene.bin");
    s.save(&path).unwrap();
    assert_eq!(Scene::load(&path).unwrap(), s);
    std::fs::write(&path, b"EMASCENE\x09\x00\x00\x00").unwrap();
    assert!(Scene::load(&path).is_err());
}

#[test]
fn bad_dimensions_are_rejected() {
    assert!(generate_scene(0, 48, 64, 5).is_err());
    assert!(generate_scene(0, 64, 64, 1).is_err());
}

#[test]
fn batches_cover_every_scene_once_per_epoch() {
    let dims = DataDims {
        height: 32,
        width: 32,
        classes: 3,
        label_stride: 4,
    };
    let batches: Vec<Batch<f32>> = BatchIter::new(5, 10, 4, dims)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(
        batches.iter().map(Batch::len).collect::<Vec<_>>(),
        [4, 4, 2]
    );
    let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..10).collect::<Vec<_>>());
    let b = &batches[0];
    assert_eq!(b.images.shape(), [4, 3, 32, 32]);
    assert_eq!(b.depth.shape(), [4, 1, 8, 8]);
    assert_eq!(b.normals.shape(), [4, 3, 8, 8]);
    assert_eq!((b.seg.len(), b.valid.len()), (256, 256));

    let resumed: Vec<Batch<f32>> = BatchIter::resume(5, 10, 4, dims, 0, 1)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    assert_eq!(resumed, batches[1..]);
    let next_epoch = BatchIter::resume(5, 10, 4, dims, 1, 0).unwrap();
    assert_ne!(
        next_epoch.order(),
        BatchIter::new(5, 10, 4, dims).unwrap().order()
    );
}

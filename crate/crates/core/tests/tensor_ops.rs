use emanet::tensor::{conv2d_direct, cosine_lr, Adam, AdamConfig, CosineSchedule, WeightDecayMode};
use emanet::{Tape, Tape64, Tensor, Tensor32, Tensor64};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t64(shape: &[usize], data: &[f64]) -> Tensor64 {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= tol, "entry {i}: {g} vs {w}");
    }
}

#[test]
fn bilinear_upsample_matches_half_pixel_reference() {
    // Reference values from the half-pixel (align_corners = false) convention.
    let mut tape = Tape64::new();
    let x = tape.constant(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.resize_bilinear(x, 4, 4).unwrap();
    #[rustfmt::skip]
    let want = [
        1.0, 1.25, 1.75, 2.0,
        1.5, 1.75, 2.25, 2.5,
        2.5, 2.75, 3.25, 3.5,
        3.0, 3.25, 3.75, 4.0,
    ];
    assert_close(tape.value(y).data(), &want, 1e-12);
}

#[test]
fn bilinear_downsample_by_two_averages_quads() {
    let mut tape = Tape64::new();
    let x = tape.constant(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
    let y = tape.resize_bilinear(x, 2, 2).unwrap();
    assert_close(tape.value(y).data(), &[2.5, 4.5, 10.5, 12.5], 1e-12);
}

#[test]
fn same_size_resize_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Tensor32::uniform(&[2, 3, 5, 7], -3.0, 3.0, &mut rng);
    let mut tape = Tape::new();
    let x = tape.constant(v.clone());
    let y = tape.resize_bilinear(x, 5, 7).unwrap();
    assert_eq!(tape.value(y), &v);
}

#[test]
fn conv_hand_computed() {
    // 3×3 input, 2×2 kernel of ones, no padding: sums of each 2×2 window plus bias.
    let x = t64(
        &[1, 1, 3, 3],
        &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
    );
    let w = Tensor::ones(&[1, 1, 2, 2]);
    let b = t64(&[1], &[0.5]);
    let mut tape = Tape64::new();
    let (xv, wv, bv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv2d(xv, wv, Some(bv), 1, 0, 1).unwrap();
    assert_eq!(tape.value(y).shape(), [1, 1, 2, 2]);
    assert_close(tape.value(y).data(), &[12.5, 16.5, 24.5, 28.5], 0.0);
    let direct = conv2d_direct(&x, &w, Some(&b), 1, 0, 1).unwrap();
    assert_eq!(tape.value(y), &direct);
}

#[test]
fn depthwise_conv_keeps_channels_apart() {
    let x = Tensor64::from_fn(&[1, 2, 2, 2], |i| if i < 4 { 1.0 } else { 10.0 });
    let w = t64(&[2, 1, 1, 1], &[2.0, 3.0]);
    let y = conv2d_direct(&x, &w, None, 1, 0, 2).unwrap();
    assert_close(y.data(), &[2.0, 2.0, 2.0, 2.0, 30.0, 30.0, 30.0, 30.0], 0.0);
}

#[test]
fn conv_rejects_bad_grouping() {
    let x = Tensor64::zeros(&[1, 4, 3, 3]);
    let w = Tensor64::zeros(&[3, 2, 1, 1]);
    assert!(conv2d_direct(&x, &w, None, 1, 0, 2).is_err());
    let mut tape = Tape64::new();
    let (xv, wv) = (tape.constant(x), tape.constant(w));
    assert!(tape.conv2d(xv, wv, None, 1, 0, 2).is_err());
}

#[test]
fn cross_entropy_reference_value() {
    // logits (1, 2, 3) with label 2: ln(e^1 + e^2 + e^3) − 3.
    let mut tape = Tape64::new();
    let x = tape.leaf(t64(&[1, 3, 1, 1], &[1.0, 2.0, 3.0]));
    let l = tape.cross_entropy(x, &[2], &[true]).unwrap();
    let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
    assert!((tape.scalar(l) - want).abs() < 1e-12);
    let g = tape.backward(l).unwrap();
    let z: f64 = [1f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let soft: Vec<f64> = [1f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    assert_close(g.wrt(x).data(), &[soft[0], soft[1], soft[2] - 1.0], 1e-12);
}

#[test]
fn cosine_schedule_reference_values() {
    assert_eq!(cosine_lr(0, 10, 0.1, None), 0.1);
    assert!((cosine_lr(5, 10, 0.1, None) - 0.05).abs() < 1e-15);
    assert!((cosine_lr(2, 10, 0.1, None) - 0.090_450_849_718_747_37).abs() < 1e-15);
    assert!(cosine_lr(10, 10, 0.1, None).abs() < 1e-15);
    assert!(cosine_lr(25, 10, 0.1, None).abs() < 1e-15);
    let s = CosineSchedule {
        base_lr: 1.0,
        total_steps: 100,
        restart_period: Some(4),
    };
    let lrs: Vec<f64> = (0..9).map(|i| s.lr_at(i)).collect();
    assert_close(
        &lrs,
        &[
            1.0,
            0.853_553_390_593_273_8,
            0.5,
            0.146_446_609_406_726_24,
            1.0,
            0.853_553_390_593_273_8,
            0.5,
            0.146_446_609_406_726_24,
            1.0,
        ],
        1e-12,
    );
}

#[test]
fn adam_two_steps_match_hand_recurrence() {
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut p = vec![t64(&[1], &[1.0])];
    let mut adam = Adam::new(cfg, &p);
    let g1 = t64(&[1], &[0.5]);
    let g2 = t64(&[1], &[-1.0]);
    adam.step(&mut p, &[&g1], 0.1).unwrap();
    adam.step(&mut p, &[&g2], 0.1).unwrap();
    let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.0f64);
    for (t, g) in [(1, 0.5f64), (2, -1.0)] {
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.9f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        x -= 0.1 * mh / (vh.sqrt() + 1e-8);
    }
    assert!((p[0].data()[0] - x).abs() < 1e-15);
}

#[test]
fn decoupled_decay_shrinks_before_the_moment_update() {
    let cfg = AdamConfig {
        weight_decay: 0.5,
        mode: WeightDecayMode::Decoupled,
        ..AdamConfig::default()
    };
    let mut p = vec![t64(&[1], &[2.0])];
    let mut adam = Adam::new(cfg, &p);
    adam.step(&mut p, &[&t64(&[1], &[0.0])], 0.1).unwrap();
    assert!((p[0].data()[0] - 2.0 * 0.95).abs() < 1e-15);
}

fn conv_case(
) -> impl Strategy<Value = (usize, usize, usize, usize, usize, usize, usize, usize, u64)> {
    // (batch, groups, in per group, out per group, size, kernel, stride, pad, seed)
    (
        1usize..3,
        1usize..4,
        1usize..3,
        1usize..3,
        3usize..8,
        prop::sample::select(vec![1usize, 3, 5]),
        1usize..3,
        0usize..3,
        any::<u64>(),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gemm_conv_matches_direct_loops((b, g, cin, cout, size, k, stride, pad, seed) in conv_case()) {
        prop_assume!(size + 2 * pad >= k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor64::uniform(&[b, g * cin, size, size + 1], -1.0, 1.0, &mut rng);
        let w = Tensor64::uniform(&[g * cout, cin, k, k], -1.0, 1.0, &mut rng);
        let bias = Tensor64::uniform(&[g * cout], -1.0, 1.0, &mut rng);
        let mut tape = Tape64::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(bias.clone()));
        let y = tape.conv2d(xv, wv, Some(bv), stride, pad, g).unwrap();
        let direct = conv2d_direct(&x, &w, Some(&bias), stride, pad, g).unwrap();
        prop_assert!(tape.value(y).max_abs_diff(&direct).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor64::uniform(&[m, k], -1.0, 1.0, &mut rng);
        let b = Tensor64::uniform(&[k, n], -1.0, 1.0, &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
                prop_assert!((c.at(&[i, j]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn transpose_twice_is_identity(b in 1usize..3, m in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let v = Tensor64::uniform(&[b, m, n], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape64::new();
        let x = tape.constant(v.clone());
        let t = tape.transpose(x).unwrap();
        prop_assert_eq!(tape.shape(t), &[b, n, m][..]);
        let tt = tape.transpose(t).unwrap();
        prop_assert_eq!(tape.value(tt), &v);
    }

    #[test]
    fn concat_then_narrow_recovers_parts(a in 1usize..4, b in 1usize..4, axis in 0usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sa = [2, 3, 2];
        let mut sb = sa;
        sa[axis] = a;
        sb[axis] = b;
        let x = Tensor64::uniform(&sa, -1.0, 1.0, &mut rng);
        let y = Tensor64::uniform(&sb, -1.0, 1.0, &mut rng);
        let joined = Tensor::concat(&[&x, &y], axis).unwrap();
        prop_assert_eq!(&joined.narrow(axis, 0, a).unwrap(), &x);
        prop_assert_eq!(&joined.narrow(axis, a, b).unwrap(), &y);
    }

    #[test]
    fn resize_preserves_constants(h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9, c in -5.0f64..5.0) {
        let mut tape = Tape64::new();
        let x = tape.constant(Tensor::full(&[1, 2, h, w], c));
        let y = tape.resize_bilinear(x, oh, ow).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|v| (v - c).abs() < 1e-12));
    }

    #[test]
    fn l2_normalize_gives_unit_columns(c in 1usize..5, n in 1usize..6, seed in any::<u64>()) {
        let v = Tensor64::uniform(&[1, c, n], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut tape = Tape64::new();
        let x = tape.constant(v);
        let u = tape.l2_normalize(x, 1, 1e-12).unwrap();
        let u = tape.value(u);
        for j in 0..n {
            let norm: f64 = (0..c).map(|i| u.at(&[0, i, j]).powi(2)).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-12);
        }
    }
}

use emanet::ctal::{compute_affinity, ctal_forward, CtalConfig, CtalParams};
use emanet::network::{ModelConfig, Variant};
use emanet::resources::{ctal_flops, grouped_fusion_params, model_cost, CtalFlops};
use emanet::{Tape64, Tensor64, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn config(tasks: usize, channels: usize, height: usize, width: usize, filter: usize) -> CtalConfig {
    CtalConfig {
        tasks,
        channels,
        height,
        width,
        filter,
        gamma: 0.5,
        fusion_bias: true,
    }
}

fn affinity(x: &Tensor64) -> Tensor64 {
    let mut tape = Tape64::new();
    let v = tape.constant(x.clone());
    let a = compute_affinity(&mut tape, v).unwrap();
    tape.value(a.values).clone()
}

#[test]
fn zero_feature_column_is_degenerate() {
    let mut x = Tensor64::uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for c in 0..3 {
        x.data_mut()[c * 4 + 2] = 0.0;
    }
    let a = affinity(&x);
    for j in 0..4 {
        assert_eq!(a.at(&[0, 2, j]), 0.0);
        assert_eq!(a.at(&[0, j, 2]), 0.0);
    }
    assert!((a.at(&[0, 1, 1]) - 1.0).abs() < 1e-12);
}

#[test]
fn parameter_count_of_standalone_weights() {
    let cfg = config(3, 4, 5, 6, 3);
    let p = CtalParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let fusion = grouped_fusion_params(3, 5, 6, 3, true).unwrap() as usize;
    assert_eq!(p.num_params(), 3 * fusion + 3 * (4 * 4 + 4));
    assert!(p.fuse_weight.iter().all(|w| w.shape() == [30, 3, 3, 3]));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    assert!(CtalParams::<f64>::init(config(2, 2, 3, 3, 2), &mut rng).is_err());
    assert!(CtalParams::<f64>::init(
        CtalConfig {
            gamma: -0.1,
            ..config(2, 2, 3, 3, 3)
        },
        &mut rng
    )
    .is_err());
    assert!(CtalParams::<f64>::init(config(0, 2, 3, 3, 3), &mut rng).is_err());

    let p = CtalParams::<f64>::init(config(2, 2, 3, 3, 3), &mut rng).unwrap();
    let mut tape = Tape64::new();
    let vars = p.bind(&mut tape);
    let one = tape.constant(Tensor64::zeros(&[1, 2, 3, 3]));
    assert!(ctal_forward(&mut tape, &[one], &vars).is_err());
    let wrong = tape.constant(Tensor64::zeros(&[1, 2, 3, 4]));
    assert!(ctal_forward(&mut tape, &[one, wrong], &vars).is_err());
}

#[test]
fn every_weight_receives_gradient() {
    let cfg = config(3, 2, 3, 4, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = CtalParams::<f64>::init(cfg, &mut rng).unwrap();
    let mut tape = Tape64::new();
    let vars = p.bind(&mut tape);
    let xs: Vec<Var> = (0..3)
        .map(|_| tape.leaf(Tensor64::uniform(&[2, 2, 3, 4], -1.0, 1.0, &mut rng)))
        .collect();
    let out = ctal_forward(&mut tape, &xs, &vars).unwrap();
    let squares: Vec<Var> = out.iter().map(|&o| tape.mul(o, o).unwrap()).collect();
    let joined = tape.concat(&squares, 1).unwrap();
    let loss = tape.sum(joined);
    let g = tape.backward(loss).unwrap();
    let leaves = vars
        .fuse_weight
        .iter()
        .chain(vars.fuse_bias.iter().flatten())
        .chain(&vars.proj_weight)
        .chain(vars.proj_bias.iter().flatten())
        .chain(&xs);
    for &v in leaves {
        assert!(g.wrt(v).max_abs() > 0.0);
    }
}

#[test]
fn flops_scale_with_batch_and_match_components() {
    let cfg = config(2, 3, 4, 4, 1);
    let p = CtalParams::<f64>::init(cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut tape = Tape64::new();
    let vars = p.bind(&mut tape);
    let xs: Vec<Var> = (0..2)
        .map(|_| tape.constant(Tensor64::full(&[3, 3, 4, 4], 0.5)))
        .collect();
    tape.reset_flops();
    ctal_forward(&mut tape, &xs, &vars).unwrap();
    let counted = tape.flops();
    let one = CtalFlops::new(2, 3, 4, 4, 1).unwrap();
    assert_eq!(counted.contraction + counted.elementwise, 3 * one.total());
    assert_eq!(one.total(), ctal_flops(2, 3, 4, 4, 1).unwrap());
    assert_eq!(counted.bias, 3 * 2 * (16 * 16 + 3 * 16));
}

#[test]
fn cost_report_text_lists_every_component() {
    let cfg = ModelConfig {
        variant: Variant::MultiScale,
        ..ModelConfig::three_task(40, 288, 384)
    };
    let r = model_cost(&cfg).unwrap();
    let text = r.to_text();
    for name in ["encoder", "initial_heads", "final_heads", "ctal"] {
        assert!(
            text.contains(&format!("component={name} ")),
            "{name} missing from\n{text}"
        );
    }
    assert!(text.contains("scale=1/4"));
    let ctal = r.component("ctal").unwrap();
    assert_eq!(ctal.flops, ctal_flops(3, 16, 72, 96, 3).unwrap());
    assert_eq!(
        ctal.params,
        3 * grouped_fusion_params(3, 72, 96, 3, true).unwrap() + 3 * (16 * 16 + 16)
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn affinity_permutes_with_positions(c in 1usize..5, hw in 2usize..10, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor64::uniform(&[1, c, 1, hw], -1.0, 1.0, &mut rng);
        let perm: Vec<usize> = {
            use rand::seq::SliceRandom;
            let mut p: Vec<usize> = (0..hw).collect();
            p.shuffle(&mut rng);
            p
        };
        let y = Tensor64::from_fn(&[1, c, 1, hw], |i| x.data()[(i / hw) * hw + perm[i % hw]]);
        let (a, b) = (affinity(&x), affinity(&y));
        for i in 0..hw {
            for j in 0..hw {
                prop_assert!((b.at(&[0, i, j]) - a.at(&[0, perm[i], perm[j]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blend_interpolates_linearly(gamma in 0.0f64..=1.0, seed in any::<u64>()) {
        let cfg = CtalConfig { gamma, ..config(2, 2, 3, 3, 3) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = CtalParams::<f64>::init(cfg.clone(), &mut rng).unwrap();
        let feats: Vec<Tensor64> = (0..2).map(|_| Tensor64::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng)).collect();
        let run = |g: f64| {
            let mut tape = Tape64::new();
            let mut vars = p.bind(&mut tape);
            vars.config.gamma = g;
            let xs: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
            let out = ctal_forward(&mut tape, &xs, &vars).unwrap();
            tape.value(out[0]).clone()
        };
        let (mid, full) = (run(gamma), run(1.0));
        for i in 0..mid.numel() {
            let want = gamma * full.data()[i] + (1.0 - gamma) * feats[0].data()[i];
            prop_assert!((mid.data()[i] - want).abs() < 1e-12);
        }
    }
}

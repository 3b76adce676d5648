use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use emanet::ctal::{
    deinterleave, fuse_task, fuse_task_reference, interleave_concat, JointAffinity,
};
use emanet::data::{generate_scene, scene_seed, BatchIter};
use emanet::gradcheck::{run_suite, GradCheckOptions};
use emanet::network::{evaluate, ParamStore, Trainer};
use emanet::resources::{grouped_fusion_params, model_cost, standard_fusion_params};
use emanet::tasks::{mtl_gain as gain, MetricRecord};
use emanet::{EmaNet32, Tape64, Tensor64, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, RunConfig};

/// Held-out scenes come from a separate seed stream.
const EVAL_STREAM: u64 = 0x0E7A_15EE_D000_0001;

fn eval_batches(cfg: &RunConfig) -> Result<BatchIter> {
    Ok(BatchIter::new(
        cfg.seed ^ EVAL_STREAM,
        cfg.eval_count,
        cfg.batch,
        cfg.data_dims(),
    )?)
}

fn metric_columns(record: &MetricRecord) -> Vec<(String, f64)> {
    record
        .tasks
        .iter()
        .flat_map(|t| {
            t.metrics
                .iter()
                .map(move |(m, v)| (format!("{}.{m}", t.name), *v))
        })
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<bool> {
    cfg.validate()?;
    let model_cfg = cfg.model_config()?;
    fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    let ckpt = cfg.checkpoint_path();
    let resolved = RunConfig {
        checkpoint: Some(ckpt.clone()),
        ..cfg.clone()
    };
    fs::write(cfg.out_dir.join("config.txt"), resolved.to_text())?;
    let log_path = cfg.out_dir.join("train_log.tsv");
    let mut log =
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    if let Some(parent) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }

    let model = EmaNet32::new(model_cfg.clone(), cfg.seed)?;
    println!(
        "training {} with {} parameters, {} epochs of {} steps",
        model_cfg.model_name(),
        model.params().num_params(),
        cfg.epochs,
        cfg.steps_per_epoch()
    );
    let mut trainer = Trainer::new(model, cfg.train_config());
    let n = model_cfg.tasks.len();
    for epoch in 0..cfg.epochs {
        let (mut loss, mut task_loss, mut steps, mut lr) = (0.0, vec![0.0; n], 0usize, cfg.lr);
        for batch in BatchIter::resume(
            cfg.seed,
            cfg.train_count,
            cfg.batch,
            cfg.data_dims(),
            epoch as u64,
            0,
        )? {
            let report = trainer.step(&batch?)?;
            loss += report.loss;
            for (acc, l) in task_loss.iter_mut().zip(&report.task_losses) {
                *acc += l;
            }
            lr = report.lr;
            steps += 1;
        }
        let record = evaluate(trainer.model(), eval_batches(cfg)?)?;
        let metrics = metric_columns(&record);
        if epoch == 0 {
            let mut header = vec![
                "epoch".to_string(),
                "steps".into(),
                "lr".into(),
                "loss".into(),
            ];
            header.extend(model_cfg.tasks.iter().map(|t| format!("{}.loss", t.id)));
            header.extend(metrics.iter().map(|(k, _)| k.clone()));
            writeln!(log, "{}", header.join("\t"))?;
        }
        let mut row = vec![
            (epoch + 1).to_string(),
            trainer.steps().to_string(),
            format!("{lr:e}"),
        ];
        row.push(format!("{:.6}", loss / steps as f64));
        row.extend(task_loss.iter().map(|l| format!("{:.6}", l / steps as f64)));
        row.extend(metrics.iter().map(|(_, v)| format!("{v:.6}")));
        writeln!(log, "{}", row.join("\t"))?;
        log.flush()?;
        trainer.model().params().save(&ckpt)?;
        println!(
            "epoch {} loss {:.4} {}",
            epoch + 1,
            loss / steps as f64,
            metrics
                .iter()
                .map(|(k, v)| format!("{k}={v:.3}"))
                .collect::<Vec<_>>()
                .join(" ")
        );
    }
    println!("checkpoint {}", ckpt.display());
    println!("log {}", log_path.display());
    Ok(true)
}

pub fn eval(cfg: &RunConfig) -> Result<bool> {
    cfg.validate()?;
    let ckpt = cfg.checkpoint_path();
    let stored =
        ParamStore::<f32>::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut model = EmaNet32::new(cfg.model_config()?, cfg.seed)?;
    model
        .params_mut()
        .assign_from(&stored)
        .with_context(|| format!("{} does not match the configured model", ckpt.display()))?;
    let record = evaluate(&model, eval_batches(cfg)?)?;
    fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("metrics.toml");
    record.save(&path)?;
    print!("{}", record.to_text()?);
    println!("# written to {}", path.display());
    Ok(true)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<bool> {
    let opts = GradCheckOptions {
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let reports = run_suite(&opts)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    for r in &reports {
        println!(
            "{} {} max_rel_error={:.3e} entries={}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.entries
        );
    }
    println!(
        "gradcheck: {} passed, {failed} failed (tolerance {:e})",
        reports.len() - failed,
        opts.tolerance
    );
    Ok(failed == 0)
}

fn grouped_vs_dense(rng: &mut ChaCha8Rng) -> Result<(String, f64)> {
    let (h, w) = loop {
        let (h, w) = (rng.gen_range(1..=6usize), rng.gen_range(1..=6usize));
        if h * w <= 36 {
            break (h, w);
        }
    };
    let n = rng.gen_range(1..=3usize);
    let f = if rng.gen_bool(0.5) { 1 } else { 3 };
    let hw = h * w;
    let joint = Tensor64::uniform(&[1, n * hw, h, w], -1.0, 1.0, rng);
    let weight = Tensor64::uniform(&[hw, n, f, f], -1.0, 1.0, rng);
    let bias = rng
        .gen_bool(0.5)
        .then(|| Tensor64::uniform(&[hw], -1.0, 1.0, rng));
    let mut tape = Tape64::new();
    let m = JointAffinity {
        values: tape.constant(joint.clone()),
        tasks: n,
        height: h,
        width: w,
    };
    let wv = tape.constant(weight.clone());
    let bv = bias.clone().map(|b| tape.constant(b));
    let g = fuse_task(&mut tape, &m, wv, bv, 0)?;
    let reference = fuse_task_reference(&joint, &weight, bias.as_ref())?;
    let diff = tape.value(g.values).max_abs_diff(&reference)?;
    Ok((
        format!("N={n} H={h} W={w} f={f} bias={}", bias.is_some()),
        diff,
    ))
}

fn interleave_round_trip(n: usize, rng: &mut ChaCha8Rng) -> Result<bool> {
    let (h, w) = (3, 4);
    let hw = h * w;
    let inputs: Vec<Tensor64> = (0..n)
        .map(|_| Tensor64::uniform(&[1, hw, h, w], -1.0, 1.0, rng))
        .collect();
    let mut tape = Tape64::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let joint = interleave_concat(&mut tape, &vars, h, w)?;
    let m = tape.value(joint.values).clone();
    let layout_ok = (0..hw).all(|c| {
        (0..n).all(|k| {
            (0..hw).all(|s| m.data()[(c * n + k) * hw + s] == inputs[k].data()[c * hw + s])
        })
    });
    let back = deinterleave(&mut tape, &joint)?;
    Ok(layout_ok && back.iter().zip(&inputs).all(|(&v, t)| tape.value(v) == t))
}

pub fn oracle(cfg: &RunConfig, configs: usize) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ok = true;
    let mut worst = 0.0f64;
    for i in 0..configs {
        let (desc, diff) = grouped_vs_dense(&mut rng)?;
        worst = worst.max(diff);
        if diff.is_nan() || diff >= 1e-6 {
            ok = false;
            println!("FAIL grouped_vs_standard #{i} {desc} max_abs_diff={diff:.3e}");
        }
    }
    println!(
        "{} grouped_vs_standard configs={configs} max_abs_diff={worst:.3e}",
        if ok { "PASS" } else { "FAIL" }
    );
    for n in 1..=3 {
        let pass = interleave_round_trip(n, &mut rng)?;
        ok &= pass;
        println!(
            "{} interleave_round_trip N={n}",
            if pass { "PASS" } else { "FAIL" }
        );
    }
    Ok(ok)
}

pub fn cost(cfg: &RunConfig) -> Result<bool> {
    let model_cfg = cfg.model_config()?;
    let report = model_cost(&model_cfg)?;
    let c = model_cfg.ctal_config();
    let (n, h, w, f) = (
        c.tasks as u64,
        c.height as u64,
        c.width as u64,
        c.filter as u64,
    );
    let grouped = grouped_fusion_params(n, h, w, f, false)?;
    let standard = standard_fusion_params(n, h, w, f)?;
    print!("{}", report.to_text());
    println!(
        "fusion distill={h}x{w} grouped_per_task={grouped} standard_per_task={standard} ratio={}",
        standard / grouped
    );
    Ok(true)
}

fn load_record(path: &Path) -> Result<MetricRecord> {
    MetricRecord::load(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

pub fn mtl_gain(model: &Path, baseline: &Path) -> Result<bool> {
    let m = load_record(model)?;
    let b = load_record(baseline)?;
    let specs = b.task_specs();
    for spec in &specs {
        let metric = spec.kind.gain_metric();
        let get = |r: &MetricRecord| {
            r.task(&spec.id)
                .and_then(|t| t.metrics.get(metric))
                .copied()
        };
        if let (Some(mv), Some(bv)) = (get(&m), get(&b)) {
            println!("task={} metric={metric} model={mv} baseline={bv}", spec.id);
        }
    }
    let delta = gain(&m, &b, &specs)?;
    println!("delta_m={delta:+.2}");
    Ok(true)
}

pub fn gen_data(cfg: &RunConfig) -> Result<bool> {
    cfg.validate()?;
    let dir = cfg.out_dir.join("scenes");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut index = String::from("index\tseed\tfile\n");
    for i in 0..cfg.train_count {
        let seed = scene_seed(cfg.seed, i);
        let scene = generate_scene(seed, cfg.height, cfg.width, cfg.classes)?;
        let name = format!("scene_{i:05}.bin");
        scene.save(&dir.join(&name))?;
        index.push_str(&format!("{i}\t{seed}\t{name}\n"));
    }
    fs::write(dir.join("index.tsv"), index)?;
    println!(
        "wrote {} scenes of {}x{} to {}",
        cfg.train_count,
        cfg.height,
        cfg.width,
        dir.display()
    );
    Ok(true)
}

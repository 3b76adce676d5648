//! Central finite-difference checks of tape gradients in `f64`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctal::{
    compute_affinity, ctal_forward, fuse_task, interleave_concat, reshape_affinity, CtalConfig,
    CtalParams,
};
use crate::error::Result;
use crate::network::{EmaNet, ModelConfig};
use crate::tasks::{depth_loss, normals_loss, TaskSpec};
use crate::tensor::{Tape, Tensor, Var};

/// Tolerances and sampling for [`check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Perturbation is `step · max(1, |x|)`.
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients that are
    /// zero up to round-off are compared absolutely.
    pub floor: f64,
    /// Entries probed per input; smaller inputs are probed exhaustively.
    pub max_entries: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-3,
            max_entries: 48,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub passed: bool,
}

type Builder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Scalar objective: the output itself if scalar, else its inner product with
/// a fixed random tensor so every output entry carries a distinct weight.
fn objective(
    f: &Builder<'_>,
    inputs: &[Tensor<f64>],
    weights: &mut Option<Tensor<f64>>,
    seed: u64,
) -> Result<(Tape<f64>, Vec<Var>, Var)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).is_scalar() {
        return Ok((tape, vars, out));
    }
    let shape = tape.shape(out).to_vec();
    let w = weights
        .get_or_insert_with(|| {
            Tensor::uniform(
                &shape,
                0.5,
                1.5,
                &mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5),
            )
        })
        .clone();
    let weighted = tape.mul_const(out, w)?;
    let loss = tape.sum(weighted);
    Ok((tape, vars, loss))
}

/// Compares the tape gradient of `f` at `inputs` against central differences.
pub fn check(
    name: &str,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut weights = None;
    let (tape, vars, loss) = objective(&f, inputs, &mut weights, opts.seed)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v).clone()).collect();
    drop(tape);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let eval = |probe: &[Tensor<f64>], weights: &mut Option<Tensor<f64>>| -> Result<f64> {
        let (tape, _, loss) = objective(&f, probe, weights, opts.seed)?;
        Ok(tape.scalar(loss))
    };
    let mut probe = inputs.to_vec();
    let mut worst = 0.0f64;
    let mut entries = 0;
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let picks: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            sample(&mut rng, n, opts.max_entries).into_vec()
        };
        for j in picks {
            let x = inputs[i].data()[j];
            let h = opts.step * x.abs().max(1.0);
            probe[i].data_mut()[j] = x + h;
            let up = eval(&probe, &mut weights)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(&probe, &mut weights)?;
            probe[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[i].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        entries,
        passed: worst < opts.tolerance,
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Uniform in `±[0.1, 1]`, keeping ReLU and `|x|` inputs away from their kinks.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mag = Tensor::<f64>::uniform(shape, 0.1, 1.0, rng);
    let sign = Tensor::<f64>::uniform(shape, -1.0, 1.0, rng);
    Tensor::from_fn(shape, |i| mag.data()[i] * sign.data()[i].signum())
}

fn unit_normals(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let raw = rand_t(rng, shape);
    let mut tape = Tape::new();
    let v = tape.constant(raw);
    let n = tape.l2_normalize(v, 1, 1e-12).expect("rank-4 input");
    tape.value(n).clone()
}

/// Every differentiable tape operation, the CTAL stages and composition, and
/// a miniature two-task model.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let mut run = |name: &str, inputs: Vec<Tensor<f64>>, f: &Builder<'_>| -> Result<()> {
        out.push(check(name, &inputs, f, opts)?);
        Ok(())
    };

    run(
        "add",
        vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        &|t, v| t.add(v[0], v[1]),
    )?;
    run(
        "sub",
        vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        &|t, v| t.sub(v[0], v[1]),
    )?;
    run(
        "mul",
        vec![rand_t(r, &[3, 4]), rand_t(r, &[3, 4])],
        &|t, v| t.mul(v[0], v[1]),
    )?;
    run("scale", vec![rand_t(r, &[5])], &|t, v| {
        Ok(t.scale(v[0], -1.7))
    })?;
    run("add_scalar", vec![rand_t(r, &[5])], &|t, v| {
        Ok(t.add_scalar(v[0], 0.3))
    })?;
    let c = rand_t(r, &[2, 3]);
    run("mul_const", vec![rand_t(r, &[2, 3])], &|t, v| {
        t.mul_const(v[0], c.clone())
    })?;
    run("relu", vec![off_kink(r, &[4, 5])], &|t, v| Ok(t.relu(v[0])))?;
    run("abs", vec![off_kink(r, &[4, 5])], &|t, v| Ok(t.abs(v[0])))?;
    run(
        "matmul",
        vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 5])],
        &|t, v| t.matmul(v[0], v[1]),
    )?;
    run(
        "matmul_batched",
        vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[2, 4, 2])],
        &|t, v| t.matmul(v[0], v[1]),
    )?;
    run(
        "conv2d",
        vec![
            rand_t(r, &[2, 3, 5, 5]),
            rand_t(r, &[4, 3, 3, 3]),
            rand_t(r, &[4]),
        ],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1),
    )?;
    run(
        "conv2d_strided",
        vec![rand_t(r, &[1, 2, 6, 6]), rand_t(r, &[3, 2, 3, 3])],
        &|t, v| t.conv2d(v[0], v[1], None, 2, 1, 1),
    )?;
    run(
        "conv2d_grouped",
        vec![
            rand_t(r, &[2, 6, 4, 4]),
            rand_t(r, &[3, 2, 3, 3]),
            rand_t(r, &[3]),
        ],
        &|t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1, 3),
    )?;
    run("reshape", vec![rand_t(r, &[2, 6])], &|t, v| {
        t.reshape(v[0], &[3, 4])
    })?;
    run("permute", vec![rand_t(r, &[2, 3, 4])], &|t, v| {
        t.permute(v[0], &[2, 0, 1])
    })?;
    run("transpose", vec![rand_t(r, &[2, 3, 4])], &|t, v| {
        t.transpose(v[0])
    })?;
    run(
        "concat",
        vec![rand_t(r, &[2, 1, 3]), rand_t(r, &[2, 2, 3])],
        &|t, v| t.concat(&[v[0], v[1]], 1),
    )?;
    run("narrow", vec![rand_t(r, &[3, 5])], &|t, v| {
        t.narrow(v[0], 1, 1, 3)
    })?;
    run("l2_normalize", vec![rand_t(r, &[2, 3, 4])], &|t, v| {
        t.l2_normalize(v[0], 1, 1e-12)
    })?;
    run("resize_up", vec![rand_t(r, &[1, 2, 3, 4])], &|t, v| {
        t.resize_bilinear(v[0], 7, 5)
    })?;
    run("resize_down", vec![rand_t(r, &[1, 2, 8, 6])], &|t, v| {
        t.resize_bilinear(v[0], 3, 4)
    })?;
    run("upsample", vec![rand_t(r, &[1, 1, 3, 3])], &|t, v| {
        t.upsample_bilinear(v[0], 4)
    })?;
    run("sum", vec![rand_t(r, &[3, 3])], &|t, v| Ok(t.sum(v[0])))?;
    run("mean", vec![rand_t(r, &[3, 3])], &|t, v| Ok(t.mean(v[0])))?;
    run("sum_axis", vec![rand_t(r, &[2, 3, 4])], &|t, v| {
        t.sum_axis(v[0], 1)
    })?;

    let labels = [0, 2, 1, 1, 0, 2, 2, 1];
    let mask = [true, true, false, true, true, true, false, true];
    run("cross_entropy", vec![rand_t(r, &[2, 3, 2, 2])], &|t, v| {
        t.cross_entropy(v[0], &labels, &mask)
    })?;
    let depth = Tensor::uniform(&[2, 1, 2, 2], 1.0, 5.0, r);
    run("depth_loss", vec![rand_t(r, &[2, 1, 2, 2])], &|t, v| {
        depth_loss(t, v[0], &depth, &mask).map(|l| l.value)
    })?;
    let normals = unit_normals(r, &[2, 3, 2, 2]);
    run("normals_loss", vec![rand_t(r, &[2, 3, 2, 2])], &|t, v| {
        normals_loss(t, v[0], &normals, &mask).map(|l| l.value)
    })?;

    run("ctal_affinity", vec![rand_t(r, &[1, 2, 3, 3])], &|t, v| {
        compute_affinity(t, v[0]).map(|a| a.values)
    })?;
    run(
        "ctal_fuse_task",
        vec![
            rand_t(r, &[1, 2, 3, 3]),
            rand_t(r, &[1, 2, 3, 3]),
            rand_t(r, &[9, 2, 3, 3]),
            rand_t(r, &[9]),
        ],
        &|t, v| {
            let a0 = compute_affinity(t, v[0])?;
            let a1 = compute_affinity(t, v[1])?;
            let r0 = reshape_affinity(t, &a0)?;
            let r1 = reshape_affinity(t, &a1)?;
            let joint = interleave_concat(t, &[r0, r1], 3, 3)?;
            fuse_task(t, &joint, v[2], Some(v[3]), 0).map(|g| g.values)
        },
    )?;
    let cfg = CtalConfig {
        tasks: 2,
        channels: 2,
        height: 3,
        width: 3,
        filter: 3,
        gamma: 0.3,
        fusion_bias: true,
    };
    let params = CtalParams::<f64>::init(cfg.clone(), r)?;
    let mut inputs = vec![rand_t(r, &[1, 2, 3, 3]), rand_t(r, &[1, 2, 3, 3])];
    for k in 0..2 {
        inputs.push(params.fuse_weight[k].clone());
        inputs.push(params.fuse_bias[k].clone().expect("bias enabled"));
        inputs.push(params.proj_weight[k].clone());
        inputs.push(params.proj_bias[k].clone());
    }
    run("ctal_forward", inputs, &|t, v| {
        let vars = crate::ctal::CtalVars {
            config: cfg.clone(),
            fuse_weight: vec![v[2], v[6]],
            fuse_bias: vec![Some(v[3]), Some(v[7])],
            proj_weight: vec![v[4], v[8]],
            proj_bias: vec![Some(v[5]), Some(v[9])],
        };
        let refined = ctal_forward(t, &[v[0], v[1]], &vars)?;
        let total = refined.iter().map(|&x| t.sum(x)).collect::<Vec<_>>();
        t.add(total[0], total[1])
    })?;

    let model_cfg = ModelConfig {
        channels: 2,
        encoder_width: 2,
        ..ModelConfig::new(vec![TaskSpec::depth(), TaskSpec::normals()], 32, 32)
    };
    let mut net = EmaNet::<f64>::new(model_cfg, opts.seed)?;
    // Zero-initialised biases can leave whole feature columns at zero, where
    // normalisation is not differentiable; check at a generic point instead.
    for i in 0..net.params().len() {
        if net.params().names()[i].ends_with(".bias") {
            let shape = net.params().values()[i].shape().to_vec();
            net.params_mut().values_mut()[i] = Tensor::uniform(&shape, 0.05, 0.5, r);
        }
    }
    let mut inputs = net.params().values().to_vec();
    inputs.push(Tensor::uniform(&[1, 3, 32, 32], 0.0, 1.0, r));
    let n_params = net.params().len();
    run("emanet_mini", inputs, &|t, v| {
        let out = net.forward_with(t, &v[..n_params], v[n_params])?;
        let mut terms = Vec::new();
        for &y in out.finals.iter().chain(out.initials.iter().flatten()) {
            terms.push(t.sum(y));
        }
        let mut total = terms[0];
        for &x in &terms[1..] {
            total = t.add(total, x)?;
        }
        Ok(total)
    })?;
    Ok(out)
}

//! Cross-task affinity learning.
//!
//! Three stages, each recorded on the caller's [`Tape`]:
//!
//! 1. **Intra-task**: per task, the Gram matrix of column-normalised
//!    `C×HW` features, reshaped so channel `c` holds the similarity of every
//!    position with position `c`.
//! 2. **Inter-task**: the per-task stacks are interleaved so that channels
//!    `c·N .. c·N+N` carry the similarity maps of position `c` for all `N`
//!    tasks, then fused per task by a grouped convolution with `HW` groups.
//! 3. **Diffusion**: projected features are multiplied by the transposed
//!    cross-task matrix and blended back with weight `γ`.
//!
//! All tensors carry a leading batch axis.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{conv2d_direct, Tape, Tensor, Var};

/// Floor on column norms during normalisation; all-zero columns map to zero.
pub const NORM_EPS: f64 = 1e-12;

/// `A_t`: `[B, HW, HW]` cosine similarities of one task's features.
#[derive(Clone, Copy, Debug)]
pub struct AffinityMatrix {
    pub values: Var,
    pub height: usize,
    pub width: usize,
}

/// `M`: `[B, N·HW, H, W]`, channel `c·N + k` is channel `c` of task `k`.
#[derive(Clone, Copy, Debug)]
pub struct JointAffinity {
    pub values: Var,
    pub tasks: usize,
    pub height: usize,
    pub width: usize,
}

/// `G_t`: `[B, HW, HW]`, row `r` aggregates the cross-task similarities of position `r`.
#[derive(Clone, Copy, Debug)]
pub struct CrossTaskMatrix {
    pub values: Var,
    pub task: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CtalConfig {
    pub tasks: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Odd spatial size of the fusion kernels.
    pub filter: usize,
    /// Blend weight of the diffused features, in `[0, 1]`.
    pub gamma: f64,
    pub fusion_bias: bool,
}

impl CtalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "ctal extents must be positive: {self:?}"
            )));
        }
        if self.filter == 0 || self.filter.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "filter size must be odd, got {}",
                self.filter
            )));
        }
        check_gamma(self.gamma)
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!(
            "blend factor must lie in [0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Concrete CTAL weights for standalone use.
#[derive(Clone, Debug)]
pub struct CtalParams<T> {
    pub config: CtalConfig,
    /// Per task, `[HW, N, f, f]`.
    pub fuse_weight: Vec<Tensor<T>>,
    /// Per task, `[HW]`.
    pub fuse_bias: Vec<Option<Tensor<T>>>,
    /// Per task, `[C, C, 1, 1]`.
    pub proj_weight: Vec<Tensor<T>>,
    /// Per task, `[C]`.
    pub proj_bias: Vec<Tensor<T>>,
}

impl<T: Scalar> CtalParams<T> {
    /// Fusion kernels uniform in `±1/sqrt(N·f²)`, projections in `±1/sqrt(C)`,
    /// biases zero.
    pub fn init(config: CtalConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (n, c, hw, f) = (
            config.tasks,
            config.channels,
            config.positions(),
            config.filter,
        );
        let fuse_bound = 1.0 / ((n * f * f) as f64).sqrt();
        let proj_bound = 1.0 / (c as f64).sqrt();
        let mut fuse_weight = Vec::with_capacity(n);
        let mut proj_weight = Vec::with_capacity(n);
        for _ in 0..n {
            fuse_weight.push(Tensor::uniform(
                &[hw, n, f, f],
                -fuse_bound,
                fuse_bound,
                rng,
            ));
            proj_weight.push(Tensor::uniform(&[c, c, 1, 1], -proj_bound, proj_bound, rng));
        }
        Ok(CtalParams {
            fuse_bias: (0..n)
                .map(|_| config.fusion_bias.then(|| Tensor::zeros(&[hw])))
                .collect(),
            proj_bias: (0..n).map(|_| Tensor::zeros(&[c])).collect(),
            fuse_weight,
            proj_weight,
            config,
        })
    }

    /// Records every weight as a tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> CtalVars {
        CtalVars {
            config: self.config.clone(),
            fuse_weight: self
                .fuse_weight
                .iter()
                .map(|w| tape.leaf(w.clone()))
                .collect(),
            fuse_bias: self
                .fuse_bias
                .iter()
                .map(|b| b.as_ref().map(|b| tape.leaf(b.clone())))
                .collect(),
            proj_weight: self
                .proj_weight
                .iter()
                .map(|w| tape.leaf(w.clone()))
                .collect(),
            proj_bias: self
                .proj_bias
                .iter()
                .map(|b| Some(tape.leaf(b.clone())))
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        let opt = |b: &Option<Tensor<T>>| b.as_ref().map_or(0, Tensor::numel);
        self.fuse_weight.iter().map(Tensor::numel).sum::<usize>()
            + self.fuse_bias.iter().map(opt).sum::<usize>()
            + self.proj_weight.iter().map(Tensor::numel).sum::<usize>()
            + self.proj_bias.iter().map(Tensor::numel).sum::<usize>()
    }
}

/// CTAL weights already recorded on a tape.
#[derive(Clone, Debug)]
pub struct CtalVars {
    pub config: CtalConfig,
    pub fuse_weight: Vec<Var>,
    pub fuse_bias: Vec<Option<Var>>,
    pub proj_weight: Vec<Var>,
    pub proj_bias: Vec<Option<Var>>,
}

fn feature_dims<T: Scalar>(tape: &Tape<T>, features: Var) -> Result<[usize; 4]> {
    match *tape.shape(features) {
        [b, c, h, w] => Ok([b, c, h, w]),
        ref s => Err(Error::shape(
            "ctal",
            format!("features must be [B,C,H,W], got {s:?}"),
        )),
    }
}

/// Flattens `[B,C,H,W]` to `[B,C,HW]`, normalises every column and returns `XᵀX`.
pub fn compute_affinity<T: Scalar>(tape: &mut Tape<T>, features: Var) -> Result<AffinityMatrix> {
    let [b, c, h, w] = feature_dims(tape, features)?;
    let flat = tape.reshape(features, &[b, c, h * w])?;
    let unit = tape.l2_normalize(flat, 1, T::of(NORM_EPS))?;
    let unit_t = tape.transpose(unit)?;
    let values = tape.matmul(unit_t, unit)?;
    Ok(AffinityMatrix {
        values,
        height: h,
        width: w,
    })
}

/// `[B,HW,HW]` → `[B,HW,H,W]` without moving data.
pub fn reshape_affinity<T: Scalar>(tape: &mut Tape<T>, a: &AffinityMatrix) -> Result<Var> {
    let s = tape.shape(a.values).to_vec();
    let hw = a.height * a.width;
    if s.len() != 3 || s[1] != hw || s[2] != hw {
        return Err(Error::shape(
            "reshape_affinity",
            format!("{s:?} is not [B,{hw},{hw}] for {}×{}", a.height, a.width),
        ));
    }
    tape.reshape(a.values, &[s[0], hw, a.height, a.width])
}

/// Interleaves `N` reshaped affinities so output channel `c·N + k` is channel `c` of input `k`.
pub fn interleave_concat<T: Scalar>(
    tape: &mut Tape<T>,
    reshaped: &[Var],
    height: usize,
    width: usize,
) -> Result<JointAffinity> {
    let first = reshaped
        .first()
        .ok_or_else(|| Error::shape("interleave_concat", "no task inputs"))?;
    let shape = tape.shape(*first).to_vec();
    let hw = height * width;
    if shape.len() != 4 || shape[1..] != [hw, height, width] {
        return Err(Error::shape(
            "interleave_concat",
            format!("expected [B,{hw},{height},{width}], got {shape:?}"),
        ));
    }
    let b = shape[0];
    let mut expanded = Vec::with_capacity(reshaped.len());
    for &r in reshaped {
        if tape.shape(r) != shape.as_slice() {
            return Err(Error::dims("interleave_concat", &shape, tape.shape(r)));
        }
        expanded.push(tape.reshape(r, &[b, hw, 1, height, width])?);
    }
    let stacked = tape.concat(&expanded, 2)?;
    let n = reshaped.len();
    let values = tape.reshape(stacked, &[b, hw * n, height, width])?;
    Ok(JointAffinity {
        values,
        tasks: n,
        height,
        width,
    })
}

/// Inverse of [`interleave_concat`].
pub fn deinterleave<T: Scalar>(tape: &mut Tape<T>, m: &JointAffinity) -> Result<Vec<Var>> {
    let b = tape.shape(m.values)[0];
    let hw = m.height * m.width;
    let stacked = tape.reshape(m.values, &[b, hw, m.tasks, m.height, m.width])?;
    (0..m.tasks)
        .map(|k| {
            let slab = tape.narrow(stacked, 2, k, 1)?;
            tape.reshape(slab, &[b, hw, m.height, m.width])
        })
        .collect()
}

/// Task-specific grouped convolution over the joint affinity: `HW` groups of
/// `N` input channels and one output channel, same padding. The result is
/// reshaped to `HW×HW` and transposed.
pub fn fuse_task<T: Scalar>(
    tape: &mut Tape<T>,
    m: &JointAffinity,
    weight: Var,
    bias: Option<Var>,
    task: usize,
) -> Result<CrossTaskMatrix> {
    let hw = m.height * m.width;
    let s = tape.shape(m.values).to_vec();
    if s.len() != 4 || s[1] != m.tasks * hw {
        return Err(Error::Grouping(format!(
            "joint affinity {s:?} must have N·HW = {} channels",
            m.tasks * hw
        )));
    }
    let f = tape.shape(weight).get(2).copied().unwrap_or(0);
    if f % 2 == 0 {
        return Err(Error::Config(format!("fusion filter must be odd, got {f}")));
    }
    let fused = tape.conv2d(m.values, weight, bias, 1, (f - 1) / 2, hw)?;
    let square = tape.reshape(fused, &[s[0], hw, hw])?;
    let values = tape.transpose(square)?;
    Ok(CrossTaskMatrix { values, task })
}

/// 1×1 convolution projection flattened to `[B,C,HW]`.
pub fn project<T: Scalar>(
    tape: &mut Tape<T>,
    features: Var,
    weight: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let [b, _, h, w] = feature_dims(tape, features)?;
    let p = tape.conv2d(features, weight, bias, 1, 0, 1)?;
    let c_out = tape.shape(p)[1];
    tape.reshape(p, &[b, c_out, h * w])
}

/// `F^d = F^p · Gᵀ`.
pub fn diffuse<T: Scalar>(tape: &mut Tape<T>, projected: Var, g: &CrossTaskMatrix) -> Result<Var> {
    let gt = tape.transpose(g.values)?;
    tape.matmul(projected, gt)
}

/// `F^r = γ·F^d + (1−γ)·F^i`.
pub fn blend<T: Scalar>(
    tape: &mut Tape<T>,
    diffused: Var,
    initial: Var,
    gamma: f64,
) -> Result<Var> {
    check_gamma(gamma)?;
    let shape = tape.shape(initial).to_vec();
    let fd = tape.reshape(diffused, &shape)?;
    let a = tape.scale(fd, T::of(gamma));
    let b = tape.scale(initial, T::of(1.0 - gamma));
    tape.add(a, b)
}

/// All three stages for `N` task feature maps of identical shape `[B,C,H,W]`.
pub fn ctal_forward<T: Scalar>(
    tape: &mut Tape<T>,
    features: &[Var],
    params: &CtalVars,
) -> Result<Vec<Var>> {
    let cfg = &params.config;
    cfg.validate()?;
    if features.len() != cfg.tasks {
        return Err(Error::Config(format!(
            "ctal configured for {} tasks, given {}",
            cfg.tasks,
            features.len()
        )));
    }
    let dims = feature_dims(tape, features[0])?;
    if dims[1..] != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::shape(
            "ctal",
            format!(
                "features {dims:?} do not match configured [B,{},{},{}]",
                cfg.channels, cfg.height, cfg.width
            ),
        ));
    }
    for &f in features {
        if tape.shape(f) != dims {
            return Err(Error::dims("ctal", &dims, tape.shape(f)));
        }
    }
    tape.count_event("ctal");

    let mut reshaped = Vec::with_capacity(cfg.tasks);
    for &f in features {
        let a = compute_affinity(tape, f)?;
        reshaped.push(reshape_affinity(tape, &a)?);
    }
    let joint = interleave_concat(tape, &reshaped, cfg.height, cfg.width)?;

    let mut refined = Vec::with_capacity(cfg.tasks);
    for (k, &f) in features.iter().enumerate() {
        let g = fuse_task(tape, &joint, params.fuse_weight[k], params.fuse_bias[k], k)?;
        let p = project(tape, f, params.proj_weight[k], params.proj_bias[k])?;
        let d = diffuse(tape, p, &g)?;
        refined.push(blend(tape, d, f, cfg.gamma)?);
    }
    Ok(refined)
}

/// Expands grouped weights `[Cout, Cin/g, f, f]` into the equivalent dense
/// `[Cout, Cin, f, f]` with zeros outside the diagonal blocks.
pub fn embed_block_diagonal<T: Scalar>(
    weight: &Tensor<T>,
    groups: usize,
    in_channels: usize,
) -> Result<Tensor<T>> {
    let &[cout, per_group, kh, kw] = weight.shape() else {
        return Err(Error::shape(
            "embed_block_diagonal",
            "weight must be rank 4",
        ));
    };
    if groups == 0 || cout % groups != 0 || per_group * groups != in_channels {
        return Err(Error::Grouping(format!(
            "cannot embed {:?} with {groups} groups over {in_channels} channels",
            weight.shape()
        )));
    }
    let opg = cout / groups;
    let mut dense = Tensor::zeros(&[cout, in_channels, kh, kw]);
    let taps = kh * kw;
    for o in 0..cout {
        let g = o / opg;
        for c in 0..per_group {
            let src = &weight.data()[(o * per_group + c) * taps..][..taps];
            let dst_start = (o * in_channels + g * per_group + c) * taps;
            dense.data_mut()[dst_start..dst_start + taps].copy_from_slice(src);
        }
    }
    Ok(dense)
}

/// Cross-task matrix computed by the dense-convolution route: block-diagonal
/// weights, direct convolution loops, then reshape and transpose by index.
/// Shares no code with [`fuse_task`] beyond the tensor type.
pub fn fuse_task_reference<T: Scalar>(
    joint: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let &[b, channels, h, w] = joint.shape() else {
        return Err(Error::shape(
            "fuse_task_reference",
            "joint affinity must be rank 4",
        ));
    };
    let hw = h * w;
    let dense = embed_block_diagonal(weight, hw, channels)?;
    let f = weight.shape()[2];
    let out = conv2d_direct(joint, &dense, bias, 1, (f - 1) / 2, 1)?;
    Ok(Tensor::from_fn(&[b, hw, hw], |idx| {
        let (bi, r, c) = (idx / (hw * hw), (idx / hw) % hw, idx % hw);
        out.data()[(bi * hw + c) * hw + r]
    }))
}

/// Checks symmetry, unit diagonal on non-degenerate columns and the `[-1, 1]`
/// range of an `HW×HW` affinity. Returns a description of the first violation.
pub fn check_affinity<T: Scalar>(
    a: &Tensor<T>,
    nondegenerate: &[bool],
    tol: f64,
) -> Result<(), String> {
    let n = nondegenerate.len();
    if a.shape() != [n, n] {
        return Err(format!("affinity shape {:?} is not {n}×{n}", a.shape()));
    }
    for (i, &live) in nondegenerate.iter().enumerate() {
        for j in 0..n {
            let v = a.at(&[i, j]).to_f64_lossless();
            if (v - a.at(&[j, i]).to_f64_lossless()).abs() > tol {
                return Err(format!("asymmetric at ({i},{j})"));
            }
            if v.abs() > 1.0 + tol {
                return Err(format!("entry ({i},{j}) = {v} outside [-1,1]"));
            }
        }
        if live && (a.at(&[i, i]).to_f64_lossless() - 1.0).abs() > tol {
            return Err(format!("diagonal ({i},{i}) is not 1"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn affinity_of(f: Tensor<f64>) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(f);
        let a = compute_affinity(&mut tape, x).unwrap();
        let hw = a.height * a.width;
        tape.value(a.values).reshape(&[hw, hw]).unwrap()
    }

    fn cfg(
        tasks: usize,
        channels: usize,
        h: usize,
        w: usize,
        filter: usize,
        gamma: f64,
    ) -> CtalConfig {
        CtalConfig {
            tasks,
            channels,
            height: h,
            width: w,
            filter,
            gamma,
            fusion_bias: true,
        }
    }

    #[test]
    fn parallel_columns_give_all_ones() {
        let f = Tensor::from_fn(&[1, 3, 2, 2], |i| [1.0, 2.0, -0.5][i / 4]);
        let a = affinity_of(f);
        assert!(a.max_abs_diff(&Tensor::ones(&[4, 4])).unwrap() < 1e-12);
    }

    #[test]
    fn orthogonal_columns_give_identity() {
        let f = Tensor::new(vec![1, 2, 1, 2], vec![2.0, 0.0, 0.0, 3.0]).unwrap();
        assert!(affinity_of(f).max_abs_diff(&Tensor::eye(2)).unwrap() < 1e-12);
    }

    #[test]
    fn affinity_entries_are_pairwise_cosines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = Tensor::<f64>::uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let a = affinity_of(f.clone());
        let col = |j: usize| -> Vec<f64> { (0..3).map(|c| f.data()[c * 4 + j]).collect() };
        for i in 0..4 {
            for j in 0..4 {
                let (u, v) = (col(i), col(j));
                let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
                let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!((a.at(&[i, j]) - dot / (nu * nv)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_column_yields_zero_similarities() {
        let f = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let a = affinity_of(f);
        assert!((a.data()[0] - 1.0).abs() < 1e-12);
        assert_eq!(&a.data()[1..], &[0.0, 0.0, 0.0]);
        assert!(check_affinity(&a, &[true, false], 1e-6).is_ok());
        assert!(check_affinity(&a, &[true, true], 1e-6).is_err());
    }

    #[test]
    fn reshaped_affinity_channels() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::eye(6).reshape(&[1, 6, 6]).unwrap());
        let r = reshape_affinity(
            &mut tape,
            &AffinityMatrix {
                values: a,
                height: 2,
                width: 3,
            },
        )
        .unwrap();
        let v = tape.value(r);
        for c in 0..6 {
            for p in 0..6 {
                let expect = if p == c { 1.0 } else { 0.0 };
                assert_eq!(v.at(&[0, c, p / 3, p % 3]), expect);
            }
        }
        let bad = AffinityMatrix {
            values: a,
            height: 3,
            width: 3,
        };
        assert!(reshape_affinity(&mut tape, &bad).is_err());
    }

    #[test]
    fn interleave_orders_channels_like_the_figure() {
        let mut tape = Tape::<f64>::new();
        // task k, channel c labelled 10·(k+1) + (c+1)
        let inputs: Vec<Var> = (0..2)
            .map(|k| {
                tape.constant(Tensor::from_fn(&[1, 3, 1, 3], |i| {
                    (10 * (k + 1) + i / 3 + 1) as f64
                }))
            })
            .collect();
        let m = interleave_concat(&mut tape, &inputs, 1, 3).unwrap();
        let v = tape.value(m.values);
        let order: Vec<f64> = (0..6).map(|ch| v.at(&[0, ch, 0, 0])).collect();
        assert_eq!(order, vec![11.0, 21.0, 12.0, 22.0, 13.0, 23.0]);
    }

    #[test]
    fn interleave_rejects_mismatched_tasks() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 4, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[2, 4, 2, 2]));
        assert!(interleave_concat(&mut tape, &[a, b], 2, 2).is_err());
        assert!(interleave_concat(&mut tape, &[a], 1, 4).is_err());
    }

    #[test]
    fn fuse_rejects_wrong_channel_count() {
        let mut tape = Tape::<f64>::new();
        let m = tape.constant(Tensor::zeros(&[1, 8, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let joint = JointAffinity {
            values: m,
            tasks: 3,
            height: 2,
            width: 2,
        };
        assert!(matches!(
            fuse_task(&mut tape, &joint, w, None, 0),
            Err(Error::Grouping(_))
        ));
    }

    #[test]
    fn identity_fusion_returns_the_affinity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut tape = Tape::<f64>::new();
        let f = tape.constant(Tensor::uniform(&[1, 3, 2, 3], -1.0, 1.0, &mut rng));
        let a = compute_affinity(&mut tape, f).unwrap();
        let r = reshape_affinity(&mut tape, &a).unwrap();
        let m = interleave_concat(&mut tape, &[r], 2, 3).unwrap();
        let w = tape.constant(Tensor::ones(&[6, 1, 1, 1]));
        let b = tape.constant(Tensor::zeros(&[6]));
        let g = fuse_task(&mut tape, &m, w, Some(b), 0).unwrap();
        let diff = tape
            .value(g.values)
            .max_abs_diff(tape.value(a.values))
            .unwrap();
        assert!(diff < 1e-12);
    }

    #[test]
    fn projection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::uniform(&[1, 3, 2, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let eye = tape.constant(Tensor::eye(3).reshape(&[3, 3, 1, 1]).unwrap());
        let p = project(&mut tape, xv, eye, None).unwrap();
        assert_eq!(tape.value(p), &x.reshape(&[1, 3, 4]).unwrap());

        let zero_w = tape.constant(Tensor::zeros(&[3, 3, 1, 1]));
        let zero_b = tape.constant(Tensor::zeros(&[3]));
        let p = project(&mut tape, xv, zero_w, Some(zero_b)).unwrap();
        assert_eq!(tape.value(p), &Tensor::zeros(&[1, 3, 4]));

        let w = Tensor::<f64>::uniform(&[3, 3, 1, 1], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[3], -1.0, 1.0, &mut rng);
        let (wv, bv) = (tape.constant(w.clone()), tape.constant(b.clone()));
        let p = project(&mut tape, xv, wv, Some(bv)).unwrap();
        let flat = x.reshape(&[3, 4]).unwrap();
        let wm = w.reshape(&[3, 3]).unwrap();
        for j in 0..4 {
            for o in 0..3 {
                let expect: f64 = (0..3)
                    .map(|c| wm.at(&[o, c]) * flat.at(&[c, j]))
                    .sum::<f64>()
                    + b.data()[o];
                assert!((tape.value(p).at(&[0, o, j]) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diffusion_special_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fp = Tensor::<f64>::uniform(&[1, 2, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = tape.constant(fp.clone());
        let eye = tape.constant(Tensor::eye(4).reshape(&[1, 4, 4]).unwrap());
        let d = diffuse(
            &mut tape,
            p,
            &CrossTaskMatrix {
                values: eye,
                task: 0,
            },
        )
        .unwrap();
        assert_eq!(tape.value(d), &fp);

        let ones = tape.constant(Tensor::ones(&[1, 4, 4]));
        let d = diffuse(
            &mut tape,
            p,
            &CrossTaskMatrix {
                values: ones,
                task: 0,
            },
        )
        .unwrap();
        for c in 0..2 {
            let row_sum: f64 = (0..4).map(|s| fp.at(&[0, c, s])).sum();
            for s in 0..4 {
                assert!((tape.value(d).at(&[0, c, s]) - row_sum).abs() < 1e-12);
            }
        }
        let bad = tape.constant(Tensor::ones(&[1, 3, 3]));
        assert!(diffuse(
            &mut tape,
            p,
            &CrossTaskMatrix {
                values: bad,
                task: 0
            }
        )
        .is_err());
    }

    #[test]
    fn blend_endpoints() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fi = Tensor::<f64>::uniform(&[1, 2, 2, 2], -1.0, 1.0, &mut rng);
        let fd = Tensor::<f64>::uniform(&[1, 2, 4], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let (i, d) = (tape.constant(fi.clone()), tape.constant(fd.clone()));
        let r0 = blend(&mut tape, d, i, 0.0).unwrap();
        assert_eq!(tape.value(r0), &fi);
        let r1 = blend(&mut tape, d, i, 1.0).unwrap();
        assert_eq!(tape.value(r1), &fd.reshape(&[1, 2, 2, 2]).unwrap());
        let same = tape.reshape(i, &[1, 2, 4]).unwrap();
        let rf = blend(&mut tape, same, i, 0.05).unwrap();
        assert!(tape.value(rf).max_abs_diff(&fi).unwrap() < 1e-15);
        assert!(matches!(blend(&mut tape, d, i, 1.5), Err(Error::Config(_))));
        assert!(matches!(
            blend(&mut tape, d, i, -0.1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gamma_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = CtalParams::<f32>::init(cfg(3, 4, 3, 4, 3, 0.0), &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let inputs: Vec<Tensor<f32>> = (0..3)
            .map(|_| Tensor::uniform(&[2, 4, 3, 4], -1.0, 1.0, &mut rng))
            .collect();
        let feats: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = ctal_forward(&mut tape, &feats, &vars).unwrap();
        for (o, i) in out.iter().zip(&inputs) {
            assert_eq!(tape.value(*o), i);
        }
        assert_eq!(tape.events("ctal"), 1);
    }

    #[test]
    fn config_validation() {
        assert!(cfg(2, 2, 3, 3, 2, 0.05).validate().is_err());
        assert!(cfg(2, 2, 3, 3, 3, 1.2).validate().is_err());
        assert!(cfg(0, 2, 3, 3, 3, 0.05).validate().is_err());
        assert!(cfg(2, 2, 3, 3, 3, 0.05).validate().is_ok());
    }

    #[test]
    fn parameter_count_per_task() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = cfg(2, 3, 2, 3, 3, 0.05);
        let p = CtalParams::<f32>::init(c, &mut rng).unwrap();
        assert_eq!(p.fuse_weight[0].numel(), 6 * 2 * 9);
        assert_eq!(p.num_params(), 2 * (6 * 2 * 9 + 6 + 9 + 3));
    }

    #[test]
    fn block_diagonal_embedding_layout() {
        let w = Tensor::<f64>::from_fn(&[2, 1, 1, 1], |i| i as f64 + 1.0);
        let d = embed_block_diagonal(&w, 2, 2).unwrap();
        assert_eq!(d.data(), &[1.0, 0.0, 0.0, 2.0]);
        assert!(embed_block_diagonal(&w, 3, 2).is_err());
    }
}

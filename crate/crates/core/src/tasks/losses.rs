use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

use super::TaskKind;

const NORMALS_EPS: f64 = 1e-12;

/// A scalar loss on the tape. `empty_mask` is set when no pixel was valid,
/// in which case the value is a constant zero.
#[derive(Clone, Copy, Debug)]
pub struct MaskedLoss {
    pub value: Var,
    pub empty_mask: bool,
}

fn check_pixels<T: Scalar>(
    tape: &Tape<T>,
    pred: Var,
    channels: Option<usize>,
    valid: &[bool],
) -> Result<[usize; 4]> {
    let &[b, c, h, w] = tape.shape(pred) else {
        return Err(Error::shape(
            "loss",
            format!("prediction must be [B,C,H,W], got {:?}", tape.shape(pred)),
        ));
    };
    if channels.is_some_and(|want| want != c) {
        return Err(Error::shape(
            "loss",
            format!("expected {} channels, got {c}", channels.unwrap_or(0)),
        ));
    }
    if valid.len() != b * h * w {
        return Err(Error::dims("loss mask", &[b, h, w], &[valid.len()]));
    }
    Ok([b, c, h, w])
}

fn pixel_mask<T: Scalar>(valid: &[bool], shape: [usize; 4]) -> Tensor<T> {
    let [b, _, h, w] = shape;
    Tensor::from_fn(
        &[b, 1, h, w],
        |i| if valid[i] { T::one() } else { T::zero() },
    )
}

/// Mean of a masked per-pixel loss map `[B,1,H,W]` over valid pixels.
fn masked_mean<T: Scalar>(
    tape: &mut Tape<T>,
    map: Var,
    valid: &[bool],
    shape: [usize; 4],
) -> Result<MaskedLoss> {
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Ok(MaskedLoss {
            value: tape.constant(Tensor::scalar(T::zero())),
            empty_mask: true,
        });
    }
    let masked = tape.mul_const(map, pixel_mask(valid, shape))?;
    let total = tape.sum(masked);
    Ok(MaskedLoss {
        value: tape.scale(total, T::one() / T::of(count as f64)),
        empty_mask: false,
    })
}

/// Mean cross-entropy over non-void pixels; `labels` indexed `b·H·W + h·W + w`.
pub fn seg_loss<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    valid: &[bool],
) -> Result<MaskedLoss> {
    check_pixels(tape, logits, None, valid)?;
    let empty_mask = !valid.iter().any(|&v| v);
    Ok(MaskedLoss {
        value: tape.cross_entropy(logits, labels, valid)?,
        empty_mask,
    })
}

/// Mean absolute depth error over valid pixels.
pub fn depth_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    valid: &[bool],
) -> Result<MaskedLoss> {
    let shape = check_pixels(tape, pred, Some(1), valid)?;
    if target.shape() != tape.shape(pred) {
        return Err(Error::dims("depth_loss", tape.shape(pred), target.shape()));
    }
    let t = tape.constant(target.clone());
    let diff = tape.sub(pred, t)?;
    let err = tape.abs(diff);
    masked_mean(tape, err, valid, shape)
}

/// Mean of `1 − ŝ·s` over valid pixels, `ŝ` the per-pixel normalised prediction.
pub fn normals_loss<T: Scalar>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    valid: &[bool],
) -> Result<MaskedLoss> {
    let shape = check_pixels(tape, pred, Some(3), valid)?;
    if target.shape() != tape.shape(pred) {
        return Err(Error::dims(
            "normals_loss",
            tape.shape(pred),
            target.shape(),
        ));
    }
    let unit = tape.l2_normalize(pred, 1, T::of(NORMALS_EPS))?;
    let t = tape.constant(target.clone());
    let prod = tape.mul(unit, t)?;
    let cos = tape.sum_axis(prod, 1)?;
    let neg = tape.scale(cos, -T::one());
    let map = tape.add_scalar(neg, T::one());
    masked_mean(tape, map, valid, shape)
}

/// Dispatches on the task kind. Segmentation reads `labels`; the dense tasks read `dense`.
pub fn task_loss<T: Scalar>(
    tape: &mut Tape<T>,
    kind: TaskKind,
    pred: Var,
    labels: &[usize],
    dense: Option<&Tensor<T>>,
    valid: &[bool],
) -> Result<MaskedLoss> {
    let need_dense = || Error::Contract(format!("{} loss needs a dense target", kind.name()));
    match kind {
        TaskKind::Segmentation => seg_loss(tape, pred, labels, valid),
        TaskKind::Depth => depth_loss(tape, pred, dense.ok_or_else(need_dense)?, valid),
        TaskKind::Normals => normals_loss(tape, pred, dense.ok_or_else(need_dense)?, valid),
    }
}

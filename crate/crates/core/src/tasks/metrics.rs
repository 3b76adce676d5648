//! Evaluation metrics as mergeable accumulators. Pixels outside the valid
//! mask never reach an accumulator, so predictions there cannot influence
//! any reported value.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Angular thresholds, in degrees, for the "within" fractions.
pub const ANGLE_THRESHOLDS: [f64; 3] = [11.25, 22.5, 30.0];

/// Ground-truth depths at or below this are skipped by the relative error.
const DEPTH_EPS: f64 = 1e-6;

/// Per-pixel argmax over the channel axis of `[B,K,H,W]` logits.
pub fn argmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let &[b, k, h, w] = logits.shape() else {
        return Err(Error::shape(
            "argmax_channels",
            format!("rank-4 required, got {:?}", logits.shape()),
        ));
    };
    let plane = h * w;
    Ok((0..b * plane)
        .map(|p| {
            let (bi, s) = (p / plane, p % plane);
            (0..k)
                .max_by(|&x, &y| {
                    let (vx, vy) = (
                        logits.data()[(bi * k + x) * plane + s],
                        logits.data()[(bi * k + y) * plane + s],
                    );
                    vx.partial_cmp(&vy)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(y.cmp(&x))
                })
                .unwrap_or(0)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegMetrics {
    pub miou: f64,
    pub pix_acc: f64,
    /// `None` for classes absent from the ground truth.
    pub class_iou: Vec<Option<f64>>,
}

/// Confusion-matrix accumulator, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegAccumulator {
    classes: usize,
    confusion: Vec<u64>,
}

impl SegAccumulator {
    pub fn new(classes: usize) -> Self {
        SegAccumulator {
            classes,
            confusion: vec![0; classes * classes],
        }
    }

    pub fn update(&mut self, predicted: &[usize], labels: &[usize], valid: &[bool]) -> Result<()> {
        if predicted.len() != labels.len() || labels.len() != valid.len() {
            return Err(Error::dims(
                "seg_metrics",
                &[predicted.len()],
                &[labels.len(), valid.len()],
            ));
        }
        for ((&p, &l), &v) in predicted.iter().zip(labels).zip(valid) {
            if !v {
                continue;
            }
            if p >= self.classes || l >= self.classes {
                return Err(Error::Contract(format!(
                    "class id outside [0, {})",
                    self.classes
                )));
            }
            self.confusion[l * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SegAccumulator) {
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            *a += b;
        }
    }

    /// `None` when no valid pixel was seen.
    pub fn finish(&self) -> Option<SegMetrics> {
        let k = self.classes;
        let total: u64 = self.confusion.iter().sum();
        if total == 0 {
            return None;
        }
        let correct: u64 = (0..k).map(|c| self.confusion[c * k + c]).sum();
        let class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.confusion[c * k + c];
                let gt: u64 = self.confusion[c * k..(c + 1) * k].iter().sum();
                let pred: u64 = (0..k).map(|r| self.confusion[r * k + c]).sum();
                (gt > 0).then(|| tp as f64 / (gt + pred - tp) as f64)
            })
            .collect();
        let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
        Some(SegMetrics {
            miou: present.iter().sum::<f64>() / present.len() as f64,
            pix_acc: correct as f64 / total as f64,
            class_iou,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetrics {
    pub rel_err: f64,
    pub m_err: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct DepthAccumulator {
    abs_sum: f64,
    count: u64,
    rel_sum: f64,
    rel_count: u64,
}

impl DepthAccumulator {
    pub fn update<T: Scalar>(&mut self, pred: &[T], target: &[T], valid: &[bool]) -> Result<()> {
        if pred.len() != target.len() || target.len() != valid.len() {
            return Err(Error::dims(
                "depth_metrics",
                &[pred.len()],
                &[target.len(), valid.len()],
            ));
        }
        for ((&p, &t), &v) in pred.iter().zip(target).zip(valid) {
            if !v {
                continue;
            }
            let (p, t) = (p.to_f64_lossless(), t.to_f64_lossless());
            let err = (p - t).abs();
            self.abs_sum += err;
            self.count += 1;
            if t > DEPTH_EPS {
                self.rel_sum += err / t;
                self.rel_count += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &DepthAccumulator) {
        self.abs_sum += other.abs_sum;
        self.count += other.count;
        self.rel_sum += other.rel_sum;
        self.rel_count += other.rel_count;
    }

    pub fn finish(&self) -> Option<DepthMetrics> {
        (self.count > 0 && self.rel_count > 0).then(|| DepthMetrics {
            rel_err: self.rel_sum / self.rel_count as f64,
            m_err: self.abs_sum / self.count as f64,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalsMetrics {
    /// Mean angular error in degrees.
    pub m_err: f64,
    /// Fraction of pixels within each of [`ANGLE_THRESHOLDS`].
    pub within: [f64; 3],
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NormalsAccumulator {
    angle_sum: f64,
    within: [u64; 3],
    count: u64,
}

impl NormalsAccumulator {
    /// `pred` and `target` are `[B,3,H,W]`; `valid` is `[B,H,W]`.
    pub fn update<T: Scalar>(
        &mut self,
        pred: &Tensor<T>,
        target: &Tensor<T>,
        valid: &[bool],
    ) -> Result<()> {
        let &[b, 3, h, w] = pred.shape() else {
            return Err(Error::shape(
                "normals_metrics",
                format!("expected [B,3,H,W], got {:?}", pred.shape()),
            ));
        };
        if target.shape() != pred.shape() || valid.len() != b * h * w {
            return Err(Error::dims("normals_metrics", pred.shape(), target.shape()));
        }
        let plane = h * w;
        for (p, &v) in valid.iter().enumerate() {
            if !v {
                continue;
            }
            let (bi, s) = (p / plane, p % plane);
            let at = |t: &Tensor<T>, c: usize| t.data()[(bi * 3 + c) * plane + s].to_f64_lossless();
            let u: [f64; 3] = std::array::from_fn(|c| at(pred, c));
            let g: [f64; 3] = std::array::from_fn(|c| at(target, c));
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let ng = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot = if nu > 0.0 && ng > 0.0 {
                u.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() / (nu * ng)
            } else {
                0.0
            };
            let angle = dot.clamp(-1.0, 1.0).acos().to_degrees();
            self.angle_sum += angle;
            self.count += 1;
            for (slot, &t) in self.within.iter_mut().zip(&ANGLE_THRESHOLDS) {
                if angle <= t {
                    *slot += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &NormalsAccumulator) {
        self.angle_sum += other.angle_sum;
        self.count += other.count;
        for (a, b) in self.within.iter_mut().zip(&other.within) {
            *a += b;
        }
    }

    pub fn finish(&self) -> Option<NormalsMetrics> {
        (self.count > 0).then(|| NormalsMetrics {
            m_err: self.angle_sum / self.count as f64,
            within: self.within.map(|c| c as f64 / self.count as f64),
        })
    }
}

pub fn seg_metrics(
    predicted: &[usize],
    labels: &[usize],
    valid: &[bool],
    classes: usize,
) -> Result<Option<SegMetrics>> {
    let mut acc = SegAccumulator::new(classes);
    acc.update(predicted, labels, valid)?;
    Ok(acc.finish())
}

pub fn depth_metrics<T: Scalar>(
    pred: &[T],
    target: &[T],
    valid: &[bool],
) -> Result<Option<DepthMetrics>> {
    let mut acc = DepthAccumulator::default();
    acc.update(pred, target, valid)?;
    Ok(acc.finish())
}

pub fn normals_metrics<T: Scalar>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    valid: &[bool],
) -> Result<Option<NormalsMetrics>> {
    let mut acc = NormalsAccumulator::default();
    acc.update(pred, target, valid)?;
    Ok(acc.finish())
}

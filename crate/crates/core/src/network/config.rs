use serde::{Deserialize, Serialize};

use crate::ctal::CtalConfig;
use crate::error::{Error, Result};
use crate::tasks::TaskSpec;

/// Distillation scales supported, as denominators of the input size.
pub const SCALES: [usize; 3] = [4, 6, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// One set of initial predictions from cross-scale fused features.
    #[serde(rename = "ss")]
    SingleScale,
    /// Initial predictions at every pyramid level, fused per task.
    #[serde(rename = "ms")]
    MultiScale,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SingleScale => "ss",
            Variant::MultiScale => "ms",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ss" | "single" => Ok(Variant::SingleScale),
            "ms" | "multi" => Ok(Variant::MultiScale),
            _ => Err(Error::Config(format!(
                "unknown variant `{s}` (expected ss or ms)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub tasks: Vec<TaskSpec>,
    pub variant: Variant,
    /// Channels `C` of every head's intermediate features.
    pub channels: usize,
    pub encoder_width: usize,
    pub height: usize,
    pub width: usize,
    /// CTAL runs at `1/scale` of the input.
    pub scale: usize,
    pub filter: usize,
    pub gamma: f64,
    pub fusion_bias: bool,
    /// Adds initial-prediction losses. Always on for [`Variant::MultiScale`].
    pub deep_supervision: bool,
    /// Per task; multiplies both final and initial-prediction losses.
    pub loss_weights: Vec<f64>,
}

impl ModelConfig {
    /// Defaults: SS, `C = 16`, encoder width 8, scale 1/4, `f = 3`, `γ = 0.05`.
    pub fn new(tasks: Vec<TaskSpec>, height: usize, width: usize) -> Self {
        let n = tasks.len();
        ModelConfig {
            tasks,
            variant: Variant::SingleScale,
            channels: 16,
            encoder_width: 8,
            height,
            width,
            scale: 4,
            filter: 3,
            gamma: 0.05,
            fusion_bias: true,
            deep_supervision: true,
            loss_weights: vec![1.0; n],
        }
    }

    /// Segmentation with `classes` classes, depth and normals.
    pub fn three_task(classes: usize, height: usize, width: usize) -> Self {
        Self::new(
            vec![
                TaskSpec::segmentation(classes),
                TaskSpec::depth(),
                TaskSpec::normals(),
            ],
            height,
            width,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.tasks.is_empty() {
            return err("at least one task is required".into());
        }
        if self.tasks.iter().any(|t| t.channels == 0) {
            return err("every task needs at least one output channel".into());
        }
        if self.channels == 0 || self.encoder_width == 0 {
            return err("channel widths must be positive".into());
        }
        if self.height == 0
            || self.width == 0
            || !self.height.is_multiple_of(32)
            || !self.width.is_multiple_of(32)
        {
            return err(format!(
                "input {}×{} must be a positive multiple of 32",
                self.height, self.width
            ));
        }
        if !SCALES.contains(&self.scale) {
            return err(format!(
                "distillation scale 1/{} not in {{1/4, 1/6, 1/8}}",
                self.scale
            ));
        }
        if self.filter.is_multiple_of(2) {
            return err(format!("filter size must be odd, got {}", self.filter));
        }
        let (dh, dw) = self.distill_dims();
        if dh < self.filter || dw < self.filter {
            return err(format!(
                "distillation map {dh}×{dw} is smaller than the {0}×{0} filter",
                self.filter
            ));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return err(format!(
                "blend factor must lie in [0, 1], got {}",
                self.gamma
            ));
        }
        if self.loss_weights.len() != self.tasks.len() {
            return err(format!(
                "{} loss weights for {} tasks",
                self.loss_weights.len(),
                self.tasks.len()
            ));
        }
        if self
            .loss_weights
            .iter()
            .any(|w| !(w.is_finite() && *w >= 0.0))
        {
            return err("loss weights must be finite and nonnegative".into());
        }
        Ok(())
    }

    /// Resolution of the fused features and of every prediction.
    pub fn feature_dims(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    /// CTAL resolution, rounded to the nearest integer.
    pub fn distill_dims(&self) -> (usize, usize) {
        let r = |v: usize| ((v as f64 / self.scale as f64).round() as usize).max(1);
        (r(self.height), r(self.width))
    }

    pub fn deep_supervision_active(&self) -> bool {
        self.deep_supervision || self.variant == Variant::MultiScale
    }

    pub fn ctal_config(&self) -> CtalConfig {
        let (h, w) = self.distill_dims();
        CtalConfig {
            tasks: self.tasks.len(),
            channels: self.channels,
            height: h,
            width: w,
            filter: self.filter,
            gamma: self.gamma,
            fusion_bias: self.fusion_bias,
        }
    }

    pub fn model_name(&self) -> String {
        format!("ema-net-{}", self.variant.name())
    }
}

//! Task definitions, masked losses, evaluation metrics and the multitask gain.

mod losses;
mod metrics;
mod record;

pub use losses::{depth_loss, normals_loss, seg_loss, task_loss, MaskedLoss};
pub use metrics::{
    argmax_channels, depth_metrics, normals_metrics, seg_metrics, DepthAccumulator, DepthMetrics,
    NormalsAccumulator, NormalsMetrics, SegAccumulator, SegMetrics, ANGLE_THRESHOLDS,
};
pub use record::{mtl_gain, MetricRecord, TaskMetrics};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Segmentation,
    Depth,
    Normals,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "segmentation",
            TaskKind::Depth => "depth",
            TaskKind::Normals => "normals",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "segmentation" | "seg" | "semseg" => Ok(TaskKind::Segmentation),
            "depth" => Ok(TaskKind::Depth),
            "normals" | "normal" => Ok(TaskKind::Normals),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }

    /// The single metric that enters the multitask gain for this task.
    pub fn gain_metric(self) -> &'static str {
        match self {
            TaskKind::Segmentation => "mIoU",
            TaskKind::Depth => "relErr",
            TaskKind::Normals => "mErr",
        }
    }

    /// `l_t`: whether a lower value of the gain metric is better.
    pub fn lower_is_better(self) -> bool {
        !matches!(self, TaskKind::Segmentation)
    }
}

/// One prediction task and its label layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    /// Channels of the prediction: classes, 1 for depth, 3 for normals.
    pub channels: usize,
}

impl TaskSpec {
    pub fn segmentation(classes: usize) -> Self {
        TaskSpec {
            id: "segmentation".into(),
            kind: TaskKind::Segmentation,
            channels: classes,
        }
    }

    pub fn depth() -> Self {
        TaskSpec {
            id: "depth".into(),
            kind: TaskKind::Depth,
            channels: 1,
        }
    }

    pub fn normals() -> Self {
        TaskSpec {
            id: "normals".into(),
            kind: TaskKind::Normals,
            channels: 3,
        }
    }

    /// Direction bit `l_t` of the multitask gain.
    pub fn direction(&self) -> u8 {
        u8::from(self.kind.lower_is_better())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_bits_follow_metric_kind() {
        assert_eq!(TaskSpec::segmentation(13).direction(), 0);
        assert_eq!(TaskSpec::depth().direction(), 1);
        assert_eq!(TaskSpec::normals().direction(), 1);
        assert_eq!(TaskSpec::normals().channels, 3);
    }

    #[test]
    fn kind_parsing() {
        assert_eq!(TaskKind::parse("seg").unwrap(), TaskKind::Segmentation);
        assert_eq!(TaskKind::parse(" normals ").unwrap(), TaskKind::Normals);
        assert!(TaskKind::parse("edges").is_err());
    }
}

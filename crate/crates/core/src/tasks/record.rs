use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{TaskKind, TaskSpec};

const RECORD_VERSION: u32 = 1;

/// Measured metrics of one model, grouped by task.
///
/// Stored as TOML:
///
/// ```toml
/// version = 1
/// model = "ema-net-ss"
///
/// [[task]]
/// name = "segmentation"
/// kind = "segmentation"
///
/// [task.metrics]
/// mIoU = 51.59
/// pixAcc = 74.14
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub version: u32,
    pub model: String,
    #[serde(rename = "task", default)]
    pub tasks: Vec<TaskMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub name: String,
    pub kind: TaskKind,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl MetricRecord {
    pub fn new(model: impl Into<String>) -> Self {
        MetricRecord {
            version: RECORD_VERSION,
            model: model.into(),
            tasks: Vec::new(),
        }
    }

    /// Appends a task with `(metric, value)` pairs.
    pub fn with_task(mut self, name: &str, kind: TaskKind, metrics: &[(&str, f64)]) -> Self {
        self.tasks.push(TaskMetrics {
            name: name.to_string(),
            kind,
            metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        });
        self
    }

    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Task specs in record order; label channels are not recorded and are left at zero.
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        self.tasks
            .iter()
            .map(|t| TaskSpec {
                id: t.name.clone(),
                kind: t.kind,
                channels: 0,
            })
            .collect()
    }

    pub fn to_text(&self) -> Result<String> {
        let body = toml::to_string(self).map_err(|e| Error::Format {
            what: "metric record",
            msg: e.to_string(),
        })?;
        Ok(format!("# metric-record v{RECORD_VERSION}\n{body}"))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rec: MetricRecord = toml::from_str(text).map_err(|e| Error::Format {
            what: "metric record",
            msg: e.to_string(),
        })?;
        if rec.version != RECORD_VERSION {
            return Err(Error::Format {
                what: "metric record",
                msg: format!("unsupported version {}", rec.version),
            });
        }
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn sorted_names(r: &MetricRecord) -> Vec<&str> {
    let mut v: Vec<&str> = r.tasks.iter().map(|t| t.name.as_str()).collect();
    v.sort_unstable();
    v
}

/// Multitask gain of `model` over `baseline`, in percent:
/// the mean over tasks of `(−1)^{l_t} (M_m − M_b) / M_b` × 100.
pub fn mtl_gain(model: &MetricRecord, baseline: &MetricRecord, specs: &[TaskSpec]) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Contract("multitask gain over zero tasks".into()));
    }
    if sorted_names(model) != sorted_names(baseline) {
        return Err(Error::Contract(format!(
            "records cover different tasks: {:?} vs {:?}",
            sorted_names(model),
            sorted_names(baseline)
        )));
    }
    let lookup = |r: &MetricRecord, spec: &TaskSpec| -> Result<f64> {
        let metric = spec.kind.gain_metric();
        r.task(&spec.id)
            .and_then(|t| t.metrics.get(metric).copied())
            .ok_or_else(|| {
                Error::Contract(format!(
                    "`{}` has no `{metric}` for task `{}`",
                    r.model, spec.id
                ))
            })
    };
    let mut total = 0.0;
    for spec in specs {
        let m = lookup(model, spec)?;
        let b = lookup(baseline, spec)?;
        if b == 0.0 {
            return Err(Error::ZeroBaseline(spec.id.clone()));
        }
        let sign = if spec.kind.lower_is_better() {
            -1.0
        } else {
            1.0
        };
        total += sign * (m - b) / b;
    }
    Ok(100.0 * total / specs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nyu(model: &str, miou: f64, rel: f64, angle: f64) -> MetricRecord {
        MetricRecord::new(model)
            .with_task("segmentation", TaskKind::Segmentation, &[("mIoU", miou)])
            .with_task("depth", TaskKind::Depth, &[("relErr", rel)])
            .with_task("normals", TaskKind::Normals, &[("mErr", angle)])
    }

    #[test]
    fn self_comparison_is_zero() {
        let b = nyu("stl", 49.23, 0.1636, 23.15);
        assert_eq!(mtl_gain(&b, &b, &b.task_specs()).unwrap(), 0.0);
    }

    #[test]
    fn improving_any_metric_increases_gain() {
        let b = nyu("stl", 40.0, 0.2, 25.0);
        let base = mtl_gain(&nyu("m", 41.0, 0.19, 24.0), &b, &b.task_specs()).unwrap();
        for better in [
            nyu("m", 42.0, 0.19, 24.0),
            nyu("m", 41.0, 0.18, 24.0),
            nyu("m", 41.0, 0.19, 23.0),
        ] {
            assert!(mtl_gain(&better, &b, &b.task_specs()).unwrap() > base);
        }
    }

    #[test]
    fn zero_baseline_and_task_mismatch() {
        let b = nyu("stl", 0.0, 0.2, 25.0);
        assert!(matches!(
            mtl_gain(&nyu("m", 1.0, 0.2, 25.0), &b, &b.task_specs()),
            Err(Error::ZeroBaseline(_))
        ));
        let two = MetricRecord::new("x").with_task("depth", TaskKind::Depth, &[("relErr", 0.1)]);
        assert!(mtl_gain(&two, &nyu("stl", 1.0, 0.2, 25.0), &two.task_specs()).is_err());
    }

    #[test]
    fn text_round_trip() {
        let r = nyu("EMA-Net (SS)", 51.59, 0.1607, 22.84);
        let text = r.to_text().unwrap();
        assert!(text.starts_with("# metric-record v1"));
        assert_eq!(MetricRecord::from_text(&text).unwrap(), r);
        assert!(MetricRecord::from_text("version = 7\nmodel = \"x\"\n").is_err());
        assert!(MetricRecord::from_text("model = ").is_err());
    }
}

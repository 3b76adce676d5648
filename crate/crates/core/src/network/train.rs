use crate::data::Batch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tasks::{
    argmax_channels, DepthAccumulator, MetricRecord, NormalsAccumulator, SegAccumulator, TaskKind,
};
use crate::tensor::{Adam, AdamConfig, CosineSchedule, Tape, Tensor};

use super::EmaNet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam: AdamConfig,
    /// `None` keeps the learning rate constant.
    pub schedule: Option<CosineSchedule>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            adam: AdamConfig::default(),
            schedule: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Final-prediction loss per task, unweighted.
    pub task_losses: Vec<f64>,
}

/// Sequential optimisation of one model.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    model: EmaNet<T>,
    adam: Adam<T>,
    config: TrainConfig,
    steps: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: EmaNet<T>, config: TrainConfig) -> Self {
        let adam = Adam::new(config.adam, model.params().values());
        Trainer {
            model,
            adam,
            config,
            steps: 0,
        }
    }

    pub fn model(&self) -> &EmaNet<T> {
        &self.model
    }

    pub fn into_model(self) -> EmaNet<T> {
        self.model
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn lr(&self) -> f64 {
        self.config
            .schedule
            .map_or(self.config.lr, |s| s.lr_at(self.steps))
    }

    /// Forward, backward and one optimiser update. Fails without touching the
    /// weights if the loss or any gradient is not finite.
    pub fn step(&mut self, batch: &Batch<T>) -> Result<StepReport> {
        let mut tape = Tape::new();
        let images = tape.constant(batch.images.clone());
        let (vars, out) = self.model.forward(&mut tape, images)?;
        let terms = self.model.loss(&mut tape, &out, batch)?;
        let loss = tape.scalar(terms.total).to_f64_lossless();
        if !loss.is_finite() {
            return Err(Error::Contract(format!(
                "non-finite loss at step {}",
                self.steps
            )));
        }
        let grads = tape.backward(terms.total)?;
        let g: Vec<&Tensor<T>> = vars.iter().map(|&v| grads.wrt(v)).collect();
        if let Some(i) = g.iter().position(|t| !t.all_finite()) {
            return Err(Error::Contract(format!(
                "non-finite gradient for `{}` at step {}",
                self.model.params().names()[i],
                self.steps
            )));
        }
        let lr = self.lr();
        self.adam
            .step(self.model.params_mut().values_mut(), &g, lr)?;
        self.steps += 1;
        Ok(StepReport {
            step: self.steps,
            lr,
            loss,
            task_losses: terms
                .task_final
                .iter()
                .map(|v| v.to_f64_lossless())
                .collect(),
        })
    }
}

enum Acc {
    Seg(SegAccumulator),
    Depth(DepthAccumulator),
    Normals(NormalsAccumulator),
}

/// Accumulates final-prediction metrics over `batches` into a record.
/// Segmentation and angle-threshold metrics are percentages.
pub fn evaluate<T: Scalar>(
    model: &EmaNet<T>,
    batches: impl IntoIterator<Item = Result<Batch<T>>>,
) -> Result<MetricRecord> {
    let tasks = &model.config().tasks;
    let mut accs: Vec<Acc> = tasks
        .iter()
        .map(|t| match t.kind {
            TaskKind::Segmentation => Acc::Seg(SegAccumulator::new(t.channels)),
            TaskKind::Depth => Acc::Depth(DepthAccumulator::default()),
            TaskKind::Normals => Acc::Normals(NormalsAccumulator::default()),
        })
        .collect();
    for batch in batches {
        let batch = batch?;
        let preds = model.predict(&batch.images)?;
        for (acc, pred) in accs.iter_mut().zip(&preds) {
            match acc {
                Acc::Seg(a) => a.update(&argmax_channels(pred)?, &batch.seg, &batch.valid)?,
                Acc::Depth(a) => a.update(pred.data(), batch.depth.data(), &batch.valid)?,
                Acc::Normals(a) => a.update(pred, &batch.normals, &batch.valid)?,
            }
        }
    }
    let mut record = MetricRecord::new(model.config().model_name());
    for (spec, acc) in tasks.iter().zip(&accs) {
        let metrics: Vec<(&str, f64)> = match acc {
            Acc::Seg(a) => a
                .finish()
                .map(|m| vec![("mIoU", 100.0 * m.miou), ("pixAcc", 100.0 * m.pix_acc)])
                .unwrap_or_default(),
            Acc::Depth(a) => a
                .finish()
                .map(|m| vec![("relErr", m.rel_err), ("mErr", m.m_err)])
                .unwrap_or_default(),
            Acc::Normals(a) => a
                .finish()
                .map(|m| {
                    vec![
                        ("mErr", m.m_err),
                        ("within11.25", 100.0 * m.within[0]),
                        ("within22.5", 100.0 * m.within[1]),
                        ("within30", 100.0 * m.within[2]),
                    ]
                })
                .unwrap_or_default(),
        };
        record = record.with_task(&spec.id, spec.kind, &metrics);
    }
    Ok(record)
}

//! EMA-Net: a strided-conv pyramid encoder, per-task prediction heads and a
//! single CTAL distillation stage, in single-scale and multi-scale variants.

mod config;
mod layout;
mod params;
mod train;

pub use config::{ModelConfig, Variant, SCALES};
pub use layout::{
    pyramid_channels, ConvSpec, CtalSpec, DecoderSpec, HeadSpec, Init, ModelLayout, ResidualSpec,
    PYRAMID_LEVELS,
};
pub use params::ParamStore;
pub use train::{evaluate, StepReport, TrainConfig, Trainer};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctal::{ctal_forward, CtalVars};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tasks::{task_loss, TaskKind};
use crate::tensor::{Tape, Tensor, Var};

/// Everything a forward pass produces, at `1/4` input resolution.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Per task.
    pub finals: Vec<Var>,
    /// Per task: one entry for SS, one per pyramid level for MS.
    pub initials: Vec<Vec<Var>>,
    /// Intermediate features handed to CTAL, per task.
    pub intermediates: Vec<Var>,
    /// CTAL invocations during this pass.
    pub ctal_calls: usize,
}

/// Scalar loss plus its per-task breakdown (final predictions only).
#[derive(Clone, Debug)]
pub struct LossTerms<T> {
    pub total: Var,
    pub task_final: Vec<T>,
    pub empty_masks: usize,
}

/// A model configuration together with its parameters.
#[derive(Clone, Debug)]
pub struct EmaNet<T> {
    config: ModelConfig,
    layout: ModelLayout,
    params: ParamStore<T>,
}

/// Parameters already recorded on a tape, addressable by name.
struct Bound<'a, T> {
    store: &'a ParamStore<T>,
    vars: &'a [Var],
}

impl<T: Scalar> Bound<'_, T> {
    fn var(&self, name: &str) -> Result<Var> {
        self.store
            .position(name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    fn conv(&self, tape: &mut Tape<T>, spec: &ConvSpec, x: Var) -> Result<Var> {
        let w = self.var(&spec.weight_name())?;
        let b = self.var(&spec.bias_name())?;
        let y = tape.conv2d(x, w, Some(b), spec.stride, spec.padding(), 1)?;
        Ok(if spec.relu { tape.relu(y) } else { y })
    }

    /// Returns `(intermediate, prediction)`.
    fn head(&self, tape: &mut Tape<T>, spec: &HeadSpec, x: Var) -> Result<(Var, Var)> {
        let mut h = self.conv(tape, &spec.proj, x)?;
        for block in &spec.blocks {
            let a = self.conv(tape, &block.first, h)?;
            let b = self.conv(tape, &block.second, a)?;
            h = tape.add(h, b)?;
        }
        let pred = self.conv(tape, &spec.out, h)?;
        Ok((h, pred))
    }
}

fn resize_all<T: Scalar>(
    tape: &mut Tape<T>,
    xs: &[Var],
    (h, w): (usize, usize),
) -> Result<Vec<Var>> {
    xs.iter().map(|&x| tape.resize_bilinear(x, h, w)).collect()
}

impl<T: Scalar> EmaNet<T> {
    /// Builds the layer tree and draws every weight from a ChaCha8 stream seeded with `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let layout = ModelLayout::new(&config)?;
        let params = layout.allocate(&mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(EmaNet {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn cast<U: Scalar>(&self) -> EmaNet<U> {
        EmaNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
        }
    }

    /// Binds the parameters as leaves, then runs [`EmaNet::forward_with`].
    /// The bound variables are returned in store order.
    pub fn forward(&self, tape: &mut Tape<T>, images: Var) -> Result<(Vec<Var>, ForwardOutput)> {
        let vars = self.params.bind(tape);
        let out = self.forward_with(tape, &vars, images)?;
        Ok((vars, out))
    }

    /// Forward pass with parameters already on the tape (one var per store entry).
    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        images: Var,
    ) -> Result<ForwardOutput> {
        if vars.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} bound vars for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1..] != [3, cfg.height, cfg.width] {
            return Err(Error::shape(
                "emanet",
                format!(
                    "images {shape:?} do not match [B,3,{},{}]",
                    cfg.height, cfg.width
                ),
            ));
        }
        let p = Bound {
            store: &self.params,
            vars,
        };
        let events_before = tape.events("ctal");

        let mut x = p.conv(tape, &self.layout.encoder[0], images)?;
        let mut pyramid = Vec::with_capacity(PYRAMID_LEVELS);
        for spec in &self.layout.encoder[1..] {
            x = p.conv(tape, spec, x)?;
            pyramid.push(x);
        }

        let quarter = cfg.feature_dims();
        let (intermediates, initials) = match &self.layout.decoder {
            DecoderSpec::Single { csf, initial, .. } => {
                let up = resize_all(tape, &pyramid, quarter)?;
                let cat = tape.concat(&up, 1)?;
                let shared = p.conv(tape, csf, cat)?;
                let mut feats = Vec::with_capacity(initial.len());
                let mut preds = Vec::with_capacity(initial.len());
                for head in initial {
                    let (f, y) = p.head(tape, head, shared)?;
                    feats.push(f);
                    preds.push(vec![y]);
                }
                (feats, preds)
            }
            DecoderSpec::Multi { initial, csf, .. } => {
                let mut feats = Vec::with_capacity(initial.len());
                let mut preds = Vec::with_capacity(initial.len());
                for (heads, fuse) in initial.iter().zip(csf) {
                    let mut scale_feats = Vec::with_capacity(PYRAMID_LEVELS);
                    let mut scale_preds = Vec::with_capacity(PYRAMID_LEVELS);
                    for (head, &level) in heads.iter().zip(&pyramid) {
                        let (f, y) = p.head(tape, head, level)?;
                        scale_feats.push(tape.resize_bilinear(f, quarter.0, quarter.1)?);
                        scale_preds.push(tape.resize_bilinear(y, quarter.0, quarter.1)?);
                    }
                    let cat = tape.concat(&scale_feats, 1)?;
                    feats.push(p.conv(tape, fuse, cat)?);
                    preds.push(scale_preds);
                }
                (feats, preds)
            }
        };

        let spec = &self.layout.ctal;
        let ctal_vars = CtalVars {
            config: spec.config.clone(),
            fuse_weight: spec
                .fuse_weight
                .iter()
                .map(|n| p.var(n))
                .collect::<Result<_>>()?,
            fuse_bias: spec
                .fuse_bias
                .iter()
                .map(|n| n.as_deref().map(|n| p.var(n)).transpose())
                .collect::<Result<_>>()?,
            proj_weight: spec
                .proj
                .iter()
                .map(|c| p.var(&c.weight_name()))
                .collect::<Result<_>>()?,
            proj_bias: spec
                .proj
                .iter()
                .map(|c| p.var(&c.bias_name()).map(Some))
                .collect::<Result<_>>()?,
        };
        let small = resize_all(tape, &intermediates, cfg.distill_dims())?;
        let refined = ctal_forward(tape, &small, &ctal_vars)?;
        let refined = resize_all(tape, &refined, quarter)?;

        let finals = match &self.layout.decoder {
            DecoderSpec::Single { finals, .. } => finals
                .iter()
                .zip(&refined)
                .map(|(head, &r)| p.head(tape, head, r).map(|(_, y)| y))
                .collect::<Result<_>>()?,
            DecoderSpec::Multi { finals, .. } => finals
                .iter()
                .zip(&refined)
                .map(|([a, b], &r)| {
                    let h = p.conv(tape, a, r)?;
                    p.conv(tape, b, h)
                })
                .collect::<Result<_>>()?,
        };

        Ok(ForwardOutput {
            finals,
            initials,
            intermediates,
            ctal_calls: tape.events("ctal") - events_before,
        })
    }

    /// Weighted sum over tasks of the final-prediction loss, plus every
    /// initial-prediction loss when deep supervision is active.
    pub fn loss(
        &self,
        tape: &mut Tape<T>,
        out: &ForwardOutput,
        batch: &Batch<T>,
    ) -> Result<LossTerms<T>> {
        let deep = self.config.deep_supervision_active();
        let mut terms = Vec::new();
        let mut task_final = Vec::with_capacity(self.config.tasks.len());
        let mut empty_masks = 0;
        for (k, spec) in self.config.tasks.iter().enumerate() {
            let dense = match spec.kind {
                TaskKind::Segmentation => None,
                TaskKind::Depth => Some(&batch.depth),
                TaskKind::Normals => Some(&batch.normals),
            };
            let mut preds = vec![out.finals[k]];
            if deep {
                preds.extend(&out.initials[k]);
            }
            let weight = T::of(self.config.loss_weights[k]);
            for (i, &pred) in preds.iter().enumerate() {
                let l = task_loss(tape, spec.kind, pred, &batch.seg, dense, &batch.valid)?;
                empty_masks += usize::from(l.empty_mask);
                if i == 0 {
                    task_final.push(tape.scalar(l.value));
                }
                terms.push(tape.scale(l.value, weight));
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok(LossTerms {
            total,
            task_final,
            empty_masks,
        })
    }

    /// Final predictions for a batch of images, per task.
    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = self
            .params
            .values()
            .iter()
            .map(|v| tape.constant(v.clone()))
            .collect();
        let x = tape.constant(images.clone());
        let out = self.forward_with(&mut tape, &vars, x)?;
        Ok(out.finals.iter().map(|&v| tape.value(v).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
            variant,
            channels: 4,
            encoder_width: 2,
            ..ModelConfig::three_task(3, 32, 32)
        }
    }

    #[test]
    fn output_shapes_and_single_ctal() {
        for variant in [Variant::SingleScale, Variant::MultiScale] {
            let net = EmaNet::<f64>::new(tiny(variant), 1).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::full(&[2, 3, 32, 32], 0.5));
            let (_, out) = net.forward(&mut tape, x).unwrap();
            assert_eq!(out.ctal_calls, 1);
            let shapes: Vec<_> = out.finals.iter().map(|&v| tape.shape(v).to_vec()).collect();
            assert_eq!(
                shapes,
                [vec![2, 3, 8, 8], vec![2, 1, 8, 8], vec![2, 3, 8, 8]]
            );
            let expect = if variant == Variant::MultiScale { 4 } else { 1 };
            assert!(out.initials.iter().all(|v| v.len() == expect));
        }
    }

    #[test]
    fn rejects_wrong_input_size() {
        let net = EmaNet::<f32>::new(tiny(Variant::SingleScale), 0).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 64, 64]));
        assert!(net.forward(&mut tape, x).is_err());
    }
}

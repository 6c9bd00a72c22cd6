//! Rectified-flow training objective and the Euler editing sampler.
//!
//! With `x_t = (1 − t)·x_0 + t·x_1` the regression target is the constant
//! path velocity `x_1 − x_0`. Sampling integrates `dx/dt = v(x, t)` from
//! noise with left-endpoint Euler steps `t = k/T`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{assemble_with, GlyphVocab, PromptBundle, PromptPadding};
use crate::error::{Error, Result};
use crate::image::{patchify, RgbImage};
use crate::masks::LayerSchedule;
use crate::model::{Conditioning, LayerMasks, MaskSet, ModelConfig, ModelState, ParamId, TrainMode};
use crate::numerics::{AdamConfig, AdamState, Tape, Tensor};
use crate::partition::{build_layout, BoxSpec, PartitionLayout};

/// How the transformer's attention is masked.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    /// Instance-disentangled masks following a layer schedule.
    IdAttn(LayerSchedule),
    /// Plain joint attention in every layer.
    Unmasked,
}

impl AttentionMode {
    pub fn default_for(cfg: &ModelConfig) -> Self {
        AttentionMode::IdAttn(
            crate::masks::schedule(cfg.num_layers, cfg.early_count, cfg.late_count, None)
                .expect("validated config"),
        )
    }

    pub fn layer_masks(&self, task: &PreparedTask, num_layers: usize) -> LayerMasks {
        match self {
            AttentionMode::IdAttn(s) => task.masks.for_schedule(s),
            AttentionMode::Unmasked => LayerMasks::unmasked(num_layers),
        }
    }

    pub fn label(&self) -> String {
        match self {
            AttentionMode::IdAttn(s) => s.label(),
            AttentionMode::Unmasked => "unmasked".into(),
        }
    }
}

/// Prompt bundle, token layout and masks for one set of boxes.
#[derive(Clone, Debug)]
pub struct PreparedTask {
    pub bundle: PromptBundle,
    pub layout: PartitionLayout,
    pub masks: MaskSet,
}

impl PreparedTask {
    pub fn new(cfg: &ModelConfig, boxes: &[BoxSpec]) -> Result<Self> {
        Self::with_padding(cfg, boxes, PromptPadding::Variable)
    }

    pub fn with_padding(cfg: &ModelConfig, boxes: &[BoxSpec], padding: PromptPadding) -> Result<Self> {
        let vocab = GlyphVocab {
            max_str_len: cfg.max_str_len,
            ..GlyphVocab::default()
        };
        let strings: Vec<&str> = boxes.iter().map(|b| b.tgt.as_str()).collect();
        let bundle = assemble_with(cfg.utility_len, &strings, &vocab, padding)?;
        let layout = build_layout(
            cfg.utility_len,
            &bundle.inst_lens,
            boxes,
            cfg.patch,
            cfg.grid_h(),
            cfg.grid_w(),
        )?;
        let masks = MaskSet::new(&layout);
        Ok(Self { bundle, layout, masks })
    }
}

/// One training example with its sampled time and noise.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub task: PreparedTask,
    /// Reference image in [−1, 1], HWC.
    pub reference: Vec<f64>,
    /// Target (edited) image x₁ in [−1, 1], HWC.
    pub target: Vec<f64>,
    /// Noise x₀, HWC.
    pub noise: Vec<f64>,
    pub t: f64,
}

impl TrainItem {
    pub fn interpolant(&self) -> Vec<f64> {
        interpolate(&self.noise, &self.target, self.t)
    }

    pub fn target_velocity(&self) -> Vec<f64> {
        self.target.iter().zip(&self.noise).map(|(x1, x0)| x1 - x0).collect()
    }
}

/// `(1 − t)·x₀ + t·x₁`.
pub fn interpolate(x0: &[f64], x1: &[f64], t: f64) -> Vec<f64> {
    x0.iter().zip(x1).map(|(a, b)| (1.0 - t) * a + t * b).collect()
}

pub fn gaussian_noise(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainBatch {
    pub items: Vec<TrainItem>,
}

impl TrainBatch {
    /// Draws `t ~ U[0, 1]` and `x₀ ~ N(0, I)` for each (reference, target, boxes).
    pub fn draw(
        cfg: &ModelConfig,
        examples: &[(&RgbImage, &RgbImage, &[BoxSpec])],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut items = Vec::with_capacity(examples.len());
        for (reference, target, boxes) in examples {
            let task = PreparedTask::new(cfg, boxes)?;
            let t: f64 = rng.random();
            let noise = gaussian_noise(cfg.image_len(), rng);
            items.push(TrainItem {
                task,
                reference: reference.to_unit(),
                target: target.to_unit(),
                noise,
                t,
            });
        }
        Ok(Self { items })
    }
}

/// Mean over the batch of `‖v(x_t, t) − (x₁ − x₀)‖²` for any velocity function.
pub fn fm_loss_with(batch: &TrainBatch, mut field: impl FnMut(&TrainItem, &[f64], f64) -> Result<Vec<f64>>) -> Result<f64> {
    if batch.items.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut total = 0.0;
    for item in &batch.items {
        let v = field(item, &item.interpolant(), item.t)?;
        total += v
            .iter()
            .zip(item.target_velocity())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / batch.items.len() as f64)
}

/// Flow-matching loss of `model` on `batch`.
pub fn fm_loss(model: &ModelState, batch: &TrainBatch, attention: &AttentionMode) -> Result<f64> {
    let layers = model.config.num_layers;
    fm_loss_with(batch, |item, x_t, t| {
        let cond = Conditioning {
            bundle: &item.task.bundle,
            layout: &item.task.layout,
            reference: &item.reference,
        };
        let masks = attention.layer_masks(&item.task, layers);
        Ok(model.forward_velocity(x_t, &cond, t, &masks)?.into_data())
    })
}

/// Loss and its gradient with respect to `model.trainable(mode)`, in that order.
///
/// Each item runs on its own tape; per-item gradients are summed in item order.
pub fn fm_loss_and_grads(
    model: &ModelState,
    batch: &TrainBatch,
    attention: &AttentionMode,
    mode: TrainMode,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.items.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let ids = model.trainable(mode);
    let mut grads: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(model.tensor(id).dims())).collect();
    let cfg = &model.config;
    let inv_b = 1.0 / batch.items.len() as f64;
    let mut total = 0.0;
    for item in &batch.items {
        let mut tape = Tape::new();
        let binding = model.bind(&mut tape, Some(mode));
        let cond = Conditioning {
            bundle: &item.task.bundle,
            layout: &item.task.layout,
            reference: &item.reference,
        };
        let masks = attention.layer_masks(&item.task, cfg.num_layers);
        let v = model.velocity_on_tape(&mut tape, &binding, &item.interpolant(), &cond, item.t, &masks)?;
        let target = patchify(&item.target_velocity(), cfg.image_w, cfg.image_h, cfg.channels, cfg.patch);
        let target = tape.constant(Tensor::new(tape.value(v).dims().to_vec(), target)?);
        let diff = tape.sub(v, target)?;
        let sq = tape.square(diff)?;
        let loss = tape.sum(sq)?;
        total += tape.value(loss).data()[0];
        let g = tape.backward(loss)?;
        for (acc, &id) in grads.iter_mut().zip(&ids) {
            if let Some(gi) = g.get(binding.var(id)) {
                acc.axpy(inv_b, gi);
            }
        }
    }
    Ok((total * inv_b, grads))
}

/// Optimizer state for repeated [`Trainer::step`] calls.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub mode: TrainMode,
    pub attention: AttentionMode,
    pub adam: AdamState,
    ids: Vec<ParamId>,
}

impl Trainer {
    pub fn new(model: &ModelState, mode: TrainMode, attention: AttentionMode, adam: AdamConfig) -> Self {
        let ids = model.trainable(mode);
        let tensors: Vec<&Tensor> = ids.iter().map(|&id| model.tensor(id)).collect();
        Self {
            mode,
            attention,
            adam: AdamState::new(adam, &tensors),
            ids,
        }
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One backward pass and Adam update; returns the batch loss before the update.
    pub fn step(&mut self, model: &mut ModelState, batch: &TrainBatch) -> Result<f64> {
        let (loss, grads) = fm_loss_and_grads(model, batch, &self.attention, self.mode)?;
        let step = self.adam.step_count + 1;
        if !loss.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss is {loss}"),
            });
        }
        if let Some((i, _)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Training {
                step,
                reason: format!("non-finite gradient for {}", model.param_name(self.ids[i])),
            });
        }
        let mut params = model.tensors_mut(&self.ids);
        self.adam.step(&mut params, &grads)?;
        Ok(loss)
    }
}

/// Anything that can supply `dx/dt` at `(x, t)`.
pub trait VelocityField {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>>;
}

/// Left-endpoint Euler from `t = 0` to `t = 1` in `steps` equal steps.
pub fn euler_integrate(field: &dyn VelocityField, mut x: Vec<f64>, steps: usize) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::Shape("sampler needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let t = k as f64 * dt;
        let v = field.velocity(&x, t)?;
        if v.len() != x.len() {
            return Err(Error::Shape(format!("velocity has {} values for {}", v.len(), x.len())));
        }
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += vi * dt;
        }
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub attention: AttentionMode,
}

/// The model conditioned on one task.
pub struct ModelField<'a> {
    pub model: &'a ModelState,
    pub task: &'a PreparedTask,
    pub reference: &'a [f64],
    pub masks: LayerMasks,
}

impl VelocityField for ModelField<'_> {
    fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let cond = Conditioning {
            bundle: &self.task.bundle,
            layout: &self.task.layout,
            reference: self.reference,
        };
        Ok(self.model.forward_velocity(x, &cond, t, &self.masks)?.into_data())
    }
}

/// Edits `reference` according to every box's target string in one sampling run.
pub fn sample_edit(
    model: &ModelState,
    reference: &RgbImage,
    boxes: &[BoxSpec],
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<RgbImage> {
    let cfg = &model.config;
    if reference.width() != cfg.image_w || reference.height() != cfg.image_h || cfg.channels != 3 {
        return Err(Error::Shape(format!(
            "reference is {}x{}, model expects {}x{}",
            reference.width(),
            reference.height(),
            cfg.image_w,
            cfg.image_h
        )));
    }
    let task = PreparedTask::new(cfg, boxes)?;
    let ref_unit = reference.to_unit();
    let field = ModelField {
        model,
        task: &task,
        reference: &ref_unit,
        masks: sampler.attention.layer_masks(&task, cfg.num_layers),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = gaussian_noise(cfg.image_len(), &mut rng);
    let x1 = euler_integrate(&field, x0, sampler.steps)?;
    RgbImage::from_unit(cfg.image_w, cfg.image_h, &x1)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<f64>);

    impl VelocityField for Constant {
        fn velocity(&self, _x: &[f64], _t: f64) -> Result<Vec<f64>> {
            Ok(self.0.clone())
        }
    }

    struct Linear;

    impl VelocityField for Linear {
        fn velocity(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
            Ok(x.iter().map(|v| v + t).collect())
        }
    }

    #[test]
    fn euler_is_exact_on_constant_fields() {
        let x0 = vec![0.3, -1.2, 2.5];
        let c = vec![1.5, -0.25, 0.125];
        for steps in [1, 4, 16, 64] {
            let x = euler_integrate(&Constant(c.clone()), x0.clone(), steps).unwrap();
            for i in 0..3 {
                assert!((x[i] - (x0[i] + c[i])).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_step_is_one_evaluation_at_zero() {
        let x0 = vec![1.0, 2.0];
        let x = euler_integrate(&Linear, x0.clone(), 1).unwrap();
        assert_eq!(x, vec![2.0, 4.0]);
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(euler_integrate(&Linear, vec![0.0], 0).is_err());
    }

    #[test]
    fn interpolant_endpoints() {
        let x0 = vec![0.1, -0.7, 3.0];
        let x1 = vec![-2.0, 0.5, 0.25];
        assert_eq!(interpolate(&x0, &x1, 0.0), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0), x1);
    }
}

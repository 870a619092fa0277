//! The training loop: seeded batches, AdamW updates with an optional cosine
//! schedule, line-delimited log records, and the single-pair overfit
//! harness.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quality::{compute_losses, msssim_scale_count, psnr, GradientBank, LossParts};
use crate::tensor::{AdamW, Params, Scalar, Tape, Tensor, Var};
use crate::tone::Model;
use crate::train::{Checkpoint, LoadedDataset, TrainConfig};

/// PSNR at which the overfit harness declares success and stops.
pub const OVERFIT_TARGET_DB: f64 = 35.0;

/// One line of the training log, serialized as JSON per line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLogRecord {
    /// Step index this record describes (first step is 1).
    pub step: u64,
    /// Learning rate used for the update.
    pub lr: f64,
    /// Pre-update weighted total loss.
    pub total: f64,
    pub reconstruction: f64,
    pub structural: f64,
    pub high_frequency: f64,
    pub perceptual: f64,
    /// Global gradient norm over all parameters.
    pub grad_norm: f64,
    /// Structural-loss pyramid depth at this crop size.
    pub ssim_scales: usize,
    /// Held-out PSNR, present on probe steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    #[serde(default)]
    pub probe_psnr: Option<f64>,
}

/// Loss values measured without updating anything.
#[derive(Clone, Copy, Debug)]
pub struct LossValues {
    pub total: f64,
    pub reconstruction: f64,
    pub structural: f64,
    pub high_frequency: f64,
    pub perceptual: f64,
}

/// PSNR trajectory of an overfit run.
pub struct OverfitReport {
    /// (step, PSNR) at every probe.
    pub trajectory: Vec<(u64, f64)>,
    pub reached_target: bool,
    pub steps_run: u64,
}

impl OverfitReport {
    pub fn final_psnr(&self) -> f64 {
        self.trajectory.last().map(|&(_, p)| p).unwrap_or(f64::NAN)
    }
}

/// Owns the model, its parameters, the optimizer, and the sampling RNG.
/// Training runs in f32.
pub struct Trainer {
    model: Model,
    params: Params<f32>,
    optim: AdamW<f32>,
    config: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, params) = Model::new::<f32>(config.model_config())?;
        let optim = AdamW::new(
            &params,
            config.lr as f32,
            config.beta1 as f32,
            config.beta2 as f32,
            config.weight_decay as f32,
        );
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, params, optim, config, rng, step: 0 })
    }

    /// Rebuilds a trainer from a checkpoint, restoring parameters, step
    /// counter, and optimizer moments when present. The sampling RNG is
    /// reseeded from the stored seed and step so a resumed run does not
    /// replay the batches it already consumed.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(ckpt.config.clone())?;
        ckpt.validate_against(ckpt.config.model_config())?;
        ckpt.load_into(&mut t.params)?;
        if let Some(optim) = &ckpt.optim {
            t.optim.restore(optim.step, optim.moments.clone())?;
        }
        t.step = ckpt.step;
        t.rng = ChaCha8Rng::seed_from_u64(ckpt.config.seed.wrapping_add(ckpt.step));
        Ok(t)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn params(&self) -> &Params<f32> {
        &self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.step, &self.params, Some(&self.optim))
    }

    /// Learning rate for a given step under the configured schedule.
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.config.cosine_decay {
            let t = (step as f64 / self.config.max_steps as f64).min(1.0);
            self.config.lr * 0.5 * (1.0 + (PI * t).cos())
        } else {
            self.config.lr
        }
    }

    fn forward_losses(&self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(Tape<f32>, Var, LossParts)> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone())?;
        let out = self.model.forward(&mut tape, &self.params, input)?;
        let (total, parts) = compute_losses(&mut tape, &out, y, &GradientBank, &self.config.weights)?;
        Ok((tape, total, parts))
    }

    fn read_values(tape: &Tape<f32>, total: Var, parts: &LossParts) -> Result<LossValues> {
        Ok(LossValues {
            total: tape.scalar_value(total)?.as_f64(),
            reconstruction: tape.scalar_value(parts.reconstruction)?.as_f64(),
            structural: tape.scalar_value(parts.structural)?.as_f64(),
            high_frequency: tape.scalar_value(parts.high_frequency)?.as_f64(),
            perceptual: tape.scalar_value(parts.perceptual)?.as_f64(),
        })
    }

    /// Measures the losses on a batch without touching any state.
    pub fn evaluate(&self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<LossValues> {
        let (tape, total, parts) = self.forward_losses(x, y)?;
        Self::read_values(&tape, total, &parts)
    }

    /// Runs one forward/backward pass and one AdamW update, returning the
    /// pre-update losses. A non-finite loss or gradient aborts the step with
    /// the parameters untouched.
    pub fn train_step(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<TrainLogRecord> {
        let step = self.step + 1;
        let bad = |what: String| Error::numeric("train_step", format!("step {step}: {what}"));

        let (tape, total, parts) = self.forward_losses(x, y)?;
        let values = Self::read_values(&tape, total, &parts)?;
        if !values.total.is_finite() {
            return Err(bad(format!("loss is {}", values.total)));
        }
        let grads = tape.backward(total, &self.params)?;
        for (id, name, _) in self.params.iter() {
            if let Some(g) = grads.get(id) {
                if !g.all_finite() {
                    return Err(bad(format!("non-finite gradient for {name}; parameters left untouched")));
                }
            }
        }
        let lr = self.lr_at(self.step);
        self.optim.set_lr(lr as f32);
        self.optim.step(&mut self.params, &grads)?;
        self.step = step;

        let s = y.shape();
        Ok(TrainLogRecord {
            step,
            lr,
            total: values.total,
            reconstruction: values.reconstruction,
            structural: values.structural,
            high_frequency: values.high_frequency,
            perceptual: values.perceptual,
            grad_norm: grads.global_norm(),
            ssim_scales: msssim_scale_count(s.h, s.w)?,
            probe_psnr: None,
        })
    }

    /// Maps `x` inference-style (padded, clamped) and scores it against `y`.
    pub fn probe_psnr(&self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64> {
        let out = self.model.map_image(&self.params, x)?;
        psnr(&out, y, 1.0)
    }

    /// Samples and trains until `max_steps`, invoking `on_record` after
    /// every step. The held-out probe is the center crop of the last pair,
    /// scored every `probe_every` steps and on the final one.
    pub fn run(
        &mut self,
        data: &LoadedDataset,
        mut on_record: impl FnMut(&TrainLogRecord) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::contract("train_run", "dataset is empty"));
        }
        let probe = {
            let pair = &data.pairs[data.len() - 1];
            let crop = self.config.crop;
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x9e37_79b9);
            let (x, y) = LoadedDataset { pairs: vec![center_pair(pair, crop)] }
                .sample_batch(&mut rng, 1, crop, false)?;
            (x, y)
        };
        while self.step < self.config.max_steps as u64 {
            let (x, y) = data.sample_batch(
                &mut self.rng,
                self.config.batch_size,
                self.config.crop,
                self.config.hflip,
            )?;
            let mut record = self.train_step(&x, &y)?;
            if record.step % self.config.probe_every as u64 == 0
                || record.step == self.config.max_steps as u64
            {
                record.probe_psnr = Some(self.probe_psnr(&probe.0, &probe.1)?);
            }
            on_record(&record)?;
        }
        Ok(())
    }

    /// Trains on one fixed pair until the mapped output reaches
    /// [`OVERFIT_TARGET_DB`] against the target or the step budget runs out.
    /// PSNR is probed every `probe_every` steps; the trajectory of probes is
    /// returned.
    pub fn overfit_single_pair(&mut self, x: &Tensor<f32>, y: &Tensor<f32>) -> Result<OverfitReport> {
        let sx = x.shape();
        if sx != y.shape() || sx.n != 1 {
            return Err(Error::dim(
                "overfit_single_pair",
                format!("expected one matching pair, got {sx} and {}", y.shape()),
            ));
        }
        let mut trajectory = vec![(0, self.probe_psnr(x, y)?)];
        let mut reached = trajectory[0].1 >= OVERFIT_TARGET_DB;
        while !reached && self.step < self.config.max_steps as u64 {
            self.train_step(x, y)?;
            if self.step % self.config.probe_every as u64 == 0
                || self.step == self.config.max_steps as u64
            {
                let p = self.probe_psnr(x, y)?;
                trajectory.push((self.step, p));
                reached = p >= OVERFIT_TARGET_DB;
            }
        }
        Ok(OverfitReport { trajectory, reached_target: reached, steps_run: self.step })
    }
}

/// A variant of `pair` cropped to `crop x crop` around the center (mirror
/// extended when smaller), used as the held-out probe.
fn center_pair(pair: &crate::train::TrainPair, crop: usize) -> crate::train::TrainPair {
    let s = pair.source.shape();
    let top = s.h.saturating_sub(crop) / 2;
    let left = s.w.saturating_sub(crop) / 2;
    let take = |t: &Tensor<f32>| {
        Tensor::from_fn(crate::tensor::Shape::new(1, 3, crop, crop), |_, c, y, x| {
            let sy = (top + y).min(s.h - 1);
            let sx = (left + x).min(s.w - 1);
            t.get(0, c, sy, sx)
        })
    };
    crate::train::TrainPair {
        name: format!("{}:probe", pair.name),
        source: take(&pair.source),
        target: take(&pair.target),
        normalization: pair.normalization.clone(),
    }
}

//! Training: synthesize a pair, run the cascade, sample supervision per
//! stage, accumulate gradients through every stage and both backbone passes,
//! and take a plain SGD step on a geometrically decaying learning rate.

mod gradcheck;
mod loss;
mod synth;

pub use gradcheck::{composite_check, CompositeReport};
pub use loss::{
    build_plan, cross_entropy_pair, plan_loss, plan_loss_grads, smooth_l1, softplus,
    LossBreakdown, PlanSample, SampleConfig, StageLossTerms, SupervisionPlan,
};
pub use synth::{synth_pair, synth_sequence, Shape, SynthConfig, SynthSequence, TrainingPair};

use crate::error::{Error, Result};
use crate::geometry::AnchorSet;
use crate::model::{backward_pair, forward_pair, CascadeConfig, ModelParams};
use crate::tensor::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Derive an independent stream seed from a base seed and an index.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub pairs_per_epoch: usize,
    pub lr_start: f32,
    pub lr_end: f32,
    pub lambda: f32,
    /// Global-norm gradient clip; 0 disables. Long all-negative streaks
    /// saturate the classifier, and the first positive pair afterwards kicks
    /// back a cross-entropy spike that plain SGD turns into runaway weights.
    pub max_grad_norm: f32,
    pub samples: SampleConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            pairs_per_epoch: 400,
            lr_start: 1e-2,
            lr_end: 1e-6,
            lambda: 1.0,
            max_grad_norm: 10.0,
            samples: SampleConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.pairs_per_epoch == 0 {
            return Err(Error::Config("epochs and pairs_per_epoch must be >= 1".into()));
        }
        if !(self.lr_start > 0.0 && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be positive, got {} -> {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda {} negative", self.lambda)));
        }
        if self.max_grad_norm < 0.0 {
            return Err(Error::Config(format!(
                "max_grad_norm {} negative (use 0 to disable)",
                self.max_grad_norm
            )));
        }
        if self.samples.samples_per_stage == 0 {
            return Err(Error::Config("samples_per_stage must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.pairs_per_epoch
    }
}

/// Geometric interpolation from lr_start (epoch 0) to lr_end (last epoch),
/// constant within an epoch.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f32 {
    if cfg.epochs <= 1 {
        return cfg.lr_start;
    }
    let t = epoch as f64 / (cfg.epochs - 1) as f64;
    (cfg.lr_start as f64 * ((cfg.lr_end as f64) / (cfg.lr_start as f64)).powf(t)) as f32
}

/// Rescale all unfrozen gradients so their joint L2 norm is at most
/// `max_norm` (0 disables). Returns the pre-clip norm.
pub fn clip_grads<E: Scalar>(params: &mut ModelParams<E>, max_norm: f32) -> f64 {
    let mut sq = 0.0f64;
    for t in params.tensors() {
        if !t.frozen {
            for &g in t.grad.data() {
                let g = g.to_f64();
                sq += g * g;
            }
        }
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm.is_finite() && norm > max_norm as f64 {
        let s = E::from_f64(max_norm as f64 / norm);
        for t in params.tensors_mut() {
            if !t.frozen {
                for g in t.grad.data_mut() {
                    *g = *g * s;
                }
            }
        }
    }
    norm
}

/// One gradient-descent update. Frozen tensors are skipped; a non-finite
/// gradient aborts with the offending parameter named. All gradients are
/// zeroed on the way out so the next backward pass accumulates from scratch.
pub fn sgd_step<E: Scalar>(params: &mut ModelParams<E>, lr: f32, step: usize) -> Result<()> {
    let lr = E::from_f64(lr as f64);
    for t in params.tensors_mut() {
        if !t.frozen {
            if !t.grad.all_finite() {
                return Err(Error::NonFiniteGrad {
                    name: t.name.clone(),
                    step: step as u64,
                });
            }
            let g = t.grad.data().to_vec();
            for (v, gi) in t.value.data_mut().iter_mut().zip(g) {
                *v = *v - lr * gi;
            }
        }
        t.zero_grad();
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    /// Per-stage totals; NaN-free, zero for stages that had no supervision.
    pub stage_losses: Vec<f64>,
    pub pos: usize,
    pub neg: usize,
    /// True when every stage was in the ignore band and no update happened.
    pub skipped: bool,
}

/// Forward, supervise, backward, update for one pair. Returns the loss
/// breakdown; a pair whose anchors are all ignored is skipped without an
/// update.
pub fn train_step(
    params: &mut ModelParams<f32>,
    ccfg: &CascadeConfig,
    anchors: &AnchorSet,
    pair: &TrainingPair,
    samples: &SampleConfig,
    lambda: f64,
    lr: f32,
    step: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepRecord> {
    let tr = forward_pair(params, ccfg, &pair.z, &pair.x, anchors)?;
    let plan = build_plan(&tr.run.live_sets, &pair.gt, samples, rng)?;
    let stages = tr.run.stage_outputs.len();
    let mut rec = StepRecord {
        step,
        epoch: 0,
        lr,
        loss: 0.0,
        stage_losses: vec![0.0; stages],
        pos: 0,
        neg: 0,
        skipped: plan.supervised_stages() == 0,
    };
    if rec.skipped {
        return Ok(rec);
    }
    let (bd, grads) = plan_loss_grads::<f32>(&tr.run.stage_outputs, &plan, lambda)?;
    if !bd.total.is_finite() {
        return Err(Error::Diverged { step: step as u64 });
    }
    params.zero_grads();
    backward_pair(params, &tr, &grads)?;
    sgd_step(params, lr, step)?;
    rec.loss = bd.total;
    for t in &bd.stages {
        rec.stage_losses[t.stage - 1] = t.total;
    }
    rec.pos = bd.pos_count();
    rec.neg = bd.neg_count();
    Ok(rec)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<StepRecord>,
    /// Mean loss over the final epoch's unskipped steps.
    pub final_epoch_loss: f64,
    pub steps: usize,
}

/// Full training run on freshly synthesized pairs, one pair per step. The
/// callback sees every step record as it happens.
pub fn train(
    params: &mut ModelParams<f32>,
    ccfg: &CascadeConfig,
    tcfg: &TrainConfig,
    scfg: &SynthConfig,
    mut on_record: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    ccfg.validate()?;
    let anchors = params.arch.anchor_grid()?;
    let mut records = Vec::with_capacity(tcfg.total_steps());
    let mut step = 0usize;
    let mut final_sum = 0.0;
    let mut final_n = 0usize;
    for epoch in 0..tcfg.epochs {
        let lr = lr_at(tcfg, epoch);
        for _ in 0..tcfg.pairs_per_epoch {
            let pair_seed = mix_seed(tcfg.seed, step as u64);
            let pair = synth_pair(scfg, pair_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(pair_seed, 0x5e1e_c7ed));
            let mut rec = train_step(
                params,
                ccfg,
                &anchors,
                &pair,
                &tcfg.samples,
                tcfg.lambda as f64,
                lr,
                step,
                &mut rng,
            )?;
            rec.epoch = epoch;
            if epoch + 1 == tcfg.epochs && !rec.skipped {
                final_sum += rec.loss;
                final_n += 1;
            }
            on_record(&rec);
            records.push(rec);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        records,
        final_epoch_loss: if final_n > 0 { final_sum / final_n as f64 } else { f64::NAN },
        steps: step,
    })
}

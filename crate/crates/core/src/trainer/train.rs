use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::adamw::{adamw_step, AdamWConfig, OptimizerState};
use super::sft::{weighted_sft_loss, AdvantageMode, TrainGroup, TrainingSet};
use crate::curation::FilterRule;
use crate::diffusion::{NoiseSchedule, ParametricPredictor};
use crate::error::{CraftError, Result};
use crate::scalar::{norm_sq, Scalar};
use crate::seed::{stream_rng, stream_seed, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Groups per micro-batch (`b`).
    pub batch_groups: usize,
    pub grad_accumulation: usize,
    pub total_steps: usize,
    /// Keep a snapshot every this many steps; 0 disables snapshots.
    pub checkpoint_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Set from the run's master seed, never read from the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_groups: 16,
            grad_accumulation: 1,
            total_steps: 300,
            checkpoint_every: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// The larger-scale preset: learning rate 5e-5 at an effective batch of 128.
    pub fn large_scale_preset() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_groups: 32,
            grad_accumulation: 1,
            ..Self::default()
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(CraftError::Domain(format!("training: {what}")));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_groups == 0 || self.grad_accumulation == 0 {
            return bad("batch_groups and grad_accumulation must be at least 1");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("eps must be positive and weight_decay nonnegative");
        }
        Ok(())
    }
}

/// What the loss optimises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Objective {
    /// Indicator rule; `None` trains on every member.
    pub rule: Option<FilterRule>,
    pub mode: AdvantageMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<F, P> {
    pub step: usize,
    pub model: P,
    pub optimizer: OptimizerState<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun<F, P> {
    pub model: P,
    pub optimizer: OptimizerState<F>,
    pub log: Vec<LogRecord>,
    pub checkpoints: Vec<Snapshot<F, P>>,
}

/// A numeric abort, carrying the last parameters that completed a step.
#[derive(Debug)]
pub struct TrainFailure<F, P> {
    pub error: CraftError,
    pub step: usize,
    pub last_good: P,
    pub optimizer: OptimizerState<F>,
    pub log: Vec<LogRecord>,
}

/// Minibatch of group indices for one micro-step, ascending.
fn draw_groups(seed: u64, step: usize, micro: usize, n_groups: usize, b: usize) -> Vec<usize> {
    if n_groups <= b {
        return (0..n_groups).collect();
    }
    let mut rng = stream_rng(seed, Stream::Train, &[step as u64, micro as u64, 0]);
    let mut idx = index::sample(&mut rng, n_groups, b).into_vec();
    idx.sort_unstable();
    idx
}

/// Fixed-step AdamW loop over the weighted SFT loss.
///
/// Every step accumulates `grad_accumulation` micro-batches of
/// `batch_groups` groups, averaged in micro-batch order. Noise is redrawn on
/// every visit.
pub fn train<F: Scalar, P: ParametricPredictor<F>>(
    cfg: &TrainConfig,
    set: &TrainingSet<F>,
    objective: Objective,
    schedule: &NoiseSchedule<F>,
    init: P,
) -> std::result::Result<TrainRun<F, P>, Box<TrainFailure<F, P>>> {
    let n = init.num_params();
    let fail = |error: CraftError, step, model: P, optimizer, log| {
        Box::new(TrainFailure {
            error,
            step,
            last_good: model,
            optimizer,
            log,
        })
    };
    if let Err(e) = cfg.validate() {
        return Err(fail(e, 0, init, OptimizerState::new(n), Vec::new()));
    }
    if set.is_empty() {
        return Err(fail(
            CraftError::Contract("training set is empty".into()),
            0,
            init,
            OptimizerState::new(n),
            Vec::new(),
        ));
    }
    let adamw = cfg.adamw();
    let mut model = init;
    let mut opt = OptimizerState::new(n);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut checkpoints = Vec::new();
    let accum = F::from_usize_lossy(cfg.grad_accumulation);
    for step in 1..=cfg.total_steps {
        let mut loss = F::zero();
        let mut grad = vec![F::zero(); n];
        for micro in 0..cfg.grad_accumulation {
            let idx = draw_groups(cfg.seed, step, micro, set.groups.len(), cfg.batch_groups);
            let groups: Vec<&TrainGroup<F>> = idx.iter().map(|&i| &set.groups[i]).collect();
            let visit = stream_seed(cfg.seed, Stream::Train, &[step as u64, micro as u64, 1]);
            match weighted_sft_loss(&model, &groups, set.group_size, objective.rule, schedule, objective.mode, visit) {
                Ok((l, g)) => {
                    loss = loss + l / accum;
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a = *a + b / accum;
                    }
                }
                Err(e) => return Err(fail(e, step - 1, model, opt, log)),
            }
        }
        let before = (model.clone(), opt.clone());
        if let Err(e) = adamw_step(&mut opt, model.params_mut(), &grad, &adamw) {
            return Err(fail(e, step - 1, before.0, before.1, log));
        }
        if !crate::scalar::all_finite(model.params()) {
            return Err(fail(
                CraftError::Numeric(format!("non-finite parameters after step {step}")),
                step - 1,
                before.0,
                before.1,
                log,
            ));
        }
        log.push(LogRecord {
            step,
            loss: loss.as_f64(),
            grad_norm: norm_sq(&grad).sqrt().as_f64(),
            lr: cfg.learning_rate,
        });
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            checkpoints.push(Snapshot {
                step,
                model: model.clone(),
                optimizer: opt.clone(),
            });
        }
    }
    Ok(TrainRun {
        model,
        optimizer: opt,
        log,
        checkpoints,
    })
}

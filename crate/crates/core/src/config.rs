//! Run configuration.
//!
//! Every section has defaults, so an empty file is a valid configuration.
//! Unknown keys are rejected. Semantic checks report the offending field as a
//! dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::curation::{FilterRule, SelectionStrategy};
use crate::diffusion::{Architecture, NoiseSchedule};
use crate::error::{CraftError, Result};
use crate::reward::{CompositeWeights, RewardSuite};
use crate::seed::fnv1a64;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub diffusion: DiffusionConfig,
    pub rewards: RewardConfig,
    pub pretrain: PretrainConfig,
    pub curation: CurationConfig,
    pub training: TrainConfig,
    pub verification: VerifyConfig,
    pub evaluation: EvalConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            diffusion: DiffusionConfig::default(),
            rewards: RewardConfig::default(),
            pretrain: PretrainConfig::default(),
            curation: CurationConfig::default(),
            training: TrainConfig::default(),
            verification: VerifyConfig::default(),
            evaluation: EvalConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub data_dim: usize,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub time_dim: usize,
    pub hidden: [usize; 2],
    /// Samples with any component beyond this magnitude count as diverged.
    pub divergence_bound: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            data_dim: 2,
            steps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
            time_dim: 16,
            hidden: [64, 64],
            divergence_bound: 1e3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    /// Target mean `mu_c` per class.
    pub targets: Vec<Vec<f64>>,
    pub lambda: f64,
    pub noise_amp: f64,
    pub weights: CompositeWeights<f64>,
}

impl Default for RewardConfig {
    fn default() -> Self {
        let r = 2.0_f64;
        let targets = (0..3)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
                vec![r * a.cos(), r * a.sin()]
            })
            .collect();
        Self {
            targets,
            lambda: 1.0,
            noise_amp: 0.5,
            weights: CompositeWeights::DEFAULT,
        }
    }
}

/// The base model is fitted to per-class Gaussian data before curation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub samples_per_class: usize,
    /// Standard deviation of the base data around each class centre.
    pub spread: f64,
    /// Class centres are `shrink * mu_c`.
    pub shrink: f64,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 400,
            spread: 0.8,
            shrink: 0.75,
            steps: 1500,
            learning_rate: 3e-3,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Perturbation,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    pub prompts: usize,
    pub classes: usize,
    pub refinements: usize,
    pub radius: f64,
    pub provider: ProviderKind,
    /// Response file for the file provider.
    pub responses: Option<String>,
    pub rule: FilterRule,
    pub strategy: SelectionStrategy,
    pub renormalize_after_selection: bool,
    pub advantage_eps: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self {
            prompts: 200,
            classes: 3,
            refinements: 4,
            radius: 0.3,
            provider: ProviderKind::Perturbation,
            responses: None,
            rule: FilterRule::HPA,
            strategy: SelectionStrategy::Top(50),
            renormalize_after_selection: false,
            advantage_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub draws: usize,
    pub sweep_draws: usize,
    pub groups: usize,
    pub group_size: usize,
    pub time_dim: usize,
    pub hidden: [usize; 2],
    pub eta_max: f64,
    pub eta_min: f64,
    pub eta_points: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            draws: 1000,
            sweep_draws: 10_000,
            groups: 4,
            group_size: 4,
            time_dim: 2,
            hidden: [3, 3],
            eta_max: 1e-1,
            eta_min: 1e-4,
            eta_points: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub prompts: usize,
    pub k_per_prompt: usize,
    /// Master seeds for seed-averaged comparisons.
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompts: 200,
            k_per_prompt: 4,
            seeds: vec![42, 43, 44, 45, 46],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub strategies: Vec<SelectionStrategy>,
    pub rules: Vec<FilterRule>,
    /// Training steps at `reference_size` samples; other sizes scale by the square root.
    pub reference_size: usize,
    /// Explicit per-strategy steps, overriding the square-root rule.
    pub steps: Vec<StepOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepOverride {
    pub strategy: SelectionStrategy,
    pub steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            strategies: vec![
                SelectionStrategy::Top(50),
                SelectionStrategy::Random(50),
                SelectionStrategy::Low(50),
                SelectionStrategy::All,
            ],
            rules: vec![FilterRule::H, FilterRule::P, FilterRule::HA, FilterRule::HPA],
            reference_size: 50,
            steps: Vec::new(),
        }
    }
}

impl AblationConfig {
    /// `round(base * sqrt(size / reference_size))`, at least 1.
    pub fn steps_for(&self, strategy: SelectionStrategy, size: usize, base: usize) -> usize {
        if let Some(o) = self.steps.iter().find(|o| o.strategy == strategy) {
            return o.steps;
        }
        if base == 0 {
            return 0;
        }
        let ratio = size as f64 / self.reference_size.max(1) as f64;
        ((base as f64 * ratio.sqrt()).round() as usize).max(1)
    }
}

fn field(path: &str, reason: impl Into<String>) -> CraftError {
    CraftError::Config {
        path: path.into(),
        reason: reason.into(),
    }
}

fn positive(path: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(field(path, format!("must be positive and finite, got {v}")))
    }
}

fn nonzero(path: &str, v: usize) -> Result<()> {
    if v > 0 {
        Ok(())
    } else {
        Err(field(path, "must be at least 1"))
    }
}

/// FNV-1a digest of the JSON serialisation of `value`.
pub fn stable_hash<T: Serialize>(value: &T) -> u64 {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    fnv1a64(&bytes)
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let path = e.span().map_or_else(|| "<root>".to_string(), |s| format!("byte {}..{}", s.start, s.end));
            field(&path, e.message().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CraftError::Config { path: p, reason } => CraftError::Config {
                path: p,
                reason: format!("{reason} (in {})", path.display()),
            },
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| CraftError::Format(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.diffusion;
        nonzero("diffusion.data_dim", d.data_dim)?;
        if d.steps < 2 {
            return Err(field("diffusion.steps", "must be at least 2"));
        }
        if !(d.beta_start > 0.0 && d.beta_start <= d.beta_end && d.beta_end < 1.0) {
            return Err(field("diffusion.beta_end", "need 0 < beta_start <= beta_end < 1"));
        }
        nonzero("diffusion.time_dim", d.time_dim)?;
        nonzero("diffusion.hidden", d.hidden[0].min(d.hidden[1]))?;
        positive("diffusion.divergence_bound", d.divergence_bound)?;

        let r = &self.rewards;
        let c = &self.curation;
        if r.targets.len() != c.classes {
            return Err(field(
                "rewards.targets",
                format!("need one target per class ({}), got {}", c.classes, r.targets.len()),
            ));
        }
        if let Some(i) = r.targets.iter().position(|t| t.len() != d.data_dim) {
            return Err(field(&format!("rewards.targets[{i}]"), format!("must have {} entries", d.data_dim)));
        }
        if !(r.lambda >= 0.0) {
            return Err(field("rewards.lambda", "must be nonnegative"));
        }
        if !(r.noise_amp >= 0.0) {
            return Err(field("rewards.noise_amp", "must be nonnegative"));
        }
        r.weights
            .validate()
            .map_err(|e| field("rewards.weights", e.to_string()))?;

        let p = &self.pretrain;
        nonzero("pretrain.samples_per_class", p.samples_per_class)?;
        positive("pretrain.spread", p.spread)?;
        positive("pretrain.learning_rate", p.learning_rate)?;
        nonzero("pretrain.batch", p.batch)?;

        nonzero("curation.prompts", c.prompts)?;
        nonzero("curation.classes", c.classes)?;
        nonzero("curation.refinements", c.refinements)?;
        if !(c.radius >= 0.0 && c.radius.is_finite()) {
            return Err(field("curation.radius", "must be nonnegative"));
        }
        if c.provider == ProviderKind::File && c.responses.is_none() {
            return Err(field("curation.responses", "the file provider needs a response file"));
        }
        positive("curation.advantage_eps", c.advantage_eps)?;

        self.training
            .validate()
            .map_err(|e| field("training", e.to_string()))?;

        let v = &self.verification;
        nonzero("verification.draws", v.draws)?;
        nonzero("verification.sweep_draws", v.sweep_draws)?;
        nonzero("verification.groups", v.groups)?;
        if v.group_size < 2 {
            return Err(field("verification.group_size", "must be at least 2"));
        }
        if !(v.eta_max > v.eta_min && v.eta_min > 0.0) {
            return Err(field("verification.eta_min", "need 0 < eta_min < eta_max"));
        }
        if v.eta_points < 2 {
            return Err(field("verification.eta_points", "must be at least 2"));
        }

        let e = &self.evaluation;
        nonzero("evaluation.prompts", e.prompts)?;
        nonzero("evaluation.k_per_prompt", e.k_per_prompt)?;
        if e.seeds.is_empty() {
            return Err(field("evaluation.seeds", "need at least one seed"));
        }
        nonzero("ablation.reference_size", self.ablation.reference_size)?;
        Ok(())
    }

    pub fn config_hash(&self) -> u64 {
        stable_hash(self)
    }

    /// Digest of the settings that determine the generation pool: seed,
    /// diffusion, rewards, pretrain and the prompt side of curation. Rule,
    /// strategy and advantage settings are recorded in each manifest header
    /// instead, so later stages can vary them over one pool.
    pub fn lineage_hash(&self) -> u64 {
        let c = &self.curation;
        stable_hash(&(
            self.seed,
            &self.diffusion,
            &self.rewards,
            &self.pretrain,
            (c.prompts, c.classes, c.refinements, c.radius, c.provider, &c.responses),
        ))
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            data_dim: self.diffusion.data_dim,
            time_dim: self.diffusion.time_dim,
            cond_dim: self.curation.classes,
            hidden: self.diffusion.hidden,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule<f64>> {
        NoiseSchedule::linear(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn reward_suite(&self) -> Result<RewardSuite<f64>> {
        RewardSuite::new(self.rewards.targets.clone(), self.rewards.lambda, self.rewards.noise_amp)
    }

    /// Copy with a different master seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.curation.refinements, 4);
        assert_eq!(cfg.diffusion.steps, 50);
        assert_eq!(cfg.rewards.weights, CompositeWeights::DEFAULT);
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.curation.strategy = SelectionStrategy::Random(7);
        cfg.ablation.steps.push(StepOverride {
            strategy: SelectionStrategy::All,
            steps: 3,
        });
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn bad_weights_name_their_field() {
        let err = RunConfig::from_toml_str("[rewards.weights]\nh = 0.5\np = 0.5\na = 0.1\n").unwrap_err();
        match err {
            CraftError::Config { path, .. } => assert_eq!(path, "rewards.weights"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_toml_str("[curation]\nprompt = 3\n").unwrap_err().to_string();
        assert!(err.contains("prompt"), "{err}");
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        assert!(RunConfig::from_toml_str("[curation]\nrule = \"hx\"\n").is_err());
        assert!(RunConfig::from_toml_str("[curation]\nstrategy = \"top:0\"\n").is_err());
    }

    #[test]
    fn lineage_ignores_training_but_config_hash_does_not() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.training.total_steps += 1;
        assert_eq!(a.lineage_hash(), b.lineage_hash());
        assert_ne!(a.config_hash(), b.config_hash());
        b.curation.rule = FilterRule::H;
        b.curation.strategy = SelectionStrategy::All;
        assert_eq!(a.lineage_hash(), b.lineage_hash());
        b.curation.radius = 0.2;
        assert_ne!(a.lineage_hash(), b.lineage_hash());
    }

    #[test]
    fn sqrt_step_rule() {
        let a = AblationConfig::default();
        assert_eq!(a.steps_for(SelectionStrategy::Top(50), 50, 300), 300);
        assert_eq!(a.steps_for(SelectionStrategy::All, 200, 300), 600);
    }
}

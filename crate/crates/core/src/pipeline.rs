//! End-to-end stages: base model, curation, training, evaluation,
//! verification and ablations.
//!
//! Every stage is a pure function of the configuration and its inputs. The
//! `write_*` helpers persist results without timestamps so identical runs
//! produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{ProviderKind, RunConfig};
use crate::curation::manifest::{hash_hex, MANIFEST_FORMAT, MANIFEST_VERSION};
use crate::curation::{
    class_embedding, filter_pool, generate_and_score, pool_records, refine_prompts, renormalize_advantages, rescore,
    score_pool, select, write_refinement_requests, FileExchangeProvider, FilterRule, Manifest, ManifestCounts,
    ManifestHeader, PerturbationProvider, PromptSet, RuleFlags, SampleRecord, SelectionStrategy, Stage,
    EVAL_ID_OFFSET,
};
use crate::diffusion::gaussian::{elbo_estimate, exact_log_likelihood};
use crate::diffusion::{
    Architecture, LinearPredictor, ModelParams, NoiseSchedule, TimestepWeighting,
};
use crate::error::{CraftError, Result};
use crate::eval::{score_model, summarize, win_rate, EvalContext, EvalReport, GridCell, WinRateTable};
use crate::reward::RewardScaler;
use crate::seed::{stream_rng, stream_seed, Stream};
use crate::theory::{
    eta_sweep, geometric_grid, gradient_equivalence, gradient_gap_at, zero_sum_audit, CommonDraws, GradientCheck,
    PerturbationSpec, SweepResult, TheoryGroup, ZeroSumAudit,
};
use crate::trainer::{
    group_advantage, train, AdvantageMode, LogRecord, Objective, TrainConfig, TrainGroup, TrainMember, TrainRun,
    TrainingSet,
};

pub const GENERATOR: &str = concat!("craft ", env!("CARGO_PKG_VERSION"));

/// File names inside an output directory.
pub mod files {
    pub const BASE: &str = "base.ckpt";
    pub const POOL: &str = "pool.jsonl";
    pub const FILTERED: &str = "filtered.jsonl";
    pub const SELECTED: &str = "selected.jsonl";
    pub const MODEL: &str = "model.ckpt";
    pub const TRAIN_LOG: &str = "train_log.jsonl";
    pub const PRETRAIN_LOG: &str = "pretrain_log.jsonl";
    pub const EVAL: &str = "eval.json";
    pub const VERIFY: &str = "verify.json";
    pub const VERIFY_CSV: &str = "verify_sweep.csv";
    pub const ABLATION: &str = "ablation.json";
    pub const REQUESTS: &str = "refine_requests.jsonl";
    pub const SNAPSHOTS: &str = "checkpoints";
}

// ---------------------------------------------------------------- base model

/// Synthetic base data: `samples_per_class` draws per class from
/// `N(shrink * mu_c, spread^2 I)`, one single-member group each.
pub fn base_dataset(cfg: &RunConfig) -> Result<TrainingSet<f64>> {
    let p = &cfg.pretrain;
    let classes = cfg.curation.classes;
    let mut rng = stream_rng(cfg.seed, Stream::PretrainData, &[]);
    let normal = Normal::new(0.0, p.spread).map_err(|e| CraftError::Domain(e.to_string()))?;
    let mut groups = Vec::with_capacity(p.samples_per_class * classes);
    for i in 0..p.samples_per_class * classes {
        let class = i % classes;
        let centre = &cfg.rewards.targets[class];
        let x0 = centre.iter().map(|&m| p.shrink * m + normal.sample(&mut rng)).collect();
        groups.push(TrainGroup {
            prompt_id: i as u64,
            cond: class_embedding(class, classes)?,
            members: vec![TrainMember {
                variant: 1,
                x0,
                advantage: None,
                retained: RuleFlags::all(),
            }],
        });
    }
    Ok(TrainingSet { groups, group_size: 1 })
}

pub fn pretrain_config(cfg: &RunConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: cfg.pretrain.learning_rate,
        batch_groups: cfg.pretrain.batch,
        grad_accumulation: 1,
        total_steps: cfg.pretrain.steps,
        checkpoint_every: 0,
        weight_decay: 0.0,
        seed: stream_seed(cfg.seed, Stream::Pretrain, &[]),
        ..TrainConfig::default()
    }
}

/// Fits the base model to [`base_dataset`] with the plain noise-prediction loss.
pub fn pretrain_base(cfg: &RunConfig) -> Result<(ModelParams<f64>, Vec<LogRecord>)> {
    let init = ModelParams::init(cfg.architecture(), &mut stream_rng(cfg.seed, Stream::Init, &[]))?;
    let data = base_dataset(cfg)?;
    let objective = Objective {
        rule: None,
        mode: AdvantageMode::Vanilla,
    };
    let run = train(&pretrain_config(cfg), &data, objective, &cfg.schedule()?, init).map_err(|f| f.error)?;
    Ok((run.model, run.log))
}

// ---------------------------------------------------------------- curation

pub fn curation_prompts(cfg: &RunConfig) -> Result<PromptSet<f64>> {
    let c = &cfg.curation;
    let ps = PromptSet::toy(c.prompts, c.classes, 0, c.refinements)?;
    match c.provider {
        ProviderKind::Perturbation => refine_prompts(
            &ps,
            &PerturbationProvider {
                radius: c.radius,
                seed: cfg.seed,
            },
        ),
        ProviderKind::File => {
            let path = c
                .responses
                .as_deref()
                .ok_or_else(|| CraftError::Contract("file provider needs curation.responses".into()))?;
            refine_prompts(&ps, &FileExchangeProvider::load(Path::new(path), c.radius)?)
        }
    }
}

pub fn eval_prompts(cfg: &RunConfig) -> Result<PromptSet<f64>> {
    let ps = PromptSet::toy(cfg.evaluation.prompts, cfg.curation.classes, EVAL_ID_OFFSET, 1)?;
    crate::curation::ensure_disjoint(&PromptSet::toy(cfg.curation.prompts, cfg.curation.classes, 0, 1)?, &ps)?;
    Ok(ps)
}

fn header(cfg: &RunConfig, stage: Stage, scaler: RewardScaler<f64>, records: usize, groups: usize) -> ManifestHeader {
    ManifestHeader {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        stage,
        config_hash: hash_hex(cfg.config_hash()),
        lineage_hash: hash_hex(cfg.lineage_hash()),
        generator: GENERATOR.into(),
        seed: cfg.seed,
        group_size: cfg.curation.refinements,
        scaler,
        weights: cfg.rewards.weights,
        rule: None,
        strategy: None,
        advantage_eps: cfg.curation.advantage_eps,
        renormalized: false,
        counts: ManifestCounts {
            groups,
            records,
            invalid_groups: 0,
        },
        invalid: Vec::new(),
        warnings: Vec::new(),
    }
}

/// Generates and scores the candidate pool with the base model.
pub fn generate_pool(cfg: &RunConfig, base: &ModelParams<f64>) -> Result<Manifest> {
    let prompts = curation_prompts(cfg)?;
    let out = generate_and_score(
        &prompts,
        base,
        &cfg.schedule()?,
        &cfg.reward_suite()?,
        cfg.seed,
        cfg.diffusion.divergence_bound,
    )?;
    let mut groups = out.groups;
    if groups.is_empty() {
        return Err(CraftError::Numeric("every generation group diverged".into()));
    }
    let scaler = score_pool(&mut groups, &cfg.rewards.weights)?;
    let records = pool_records(&groups)?;
    let mut h = header(cfg, Stage::Pool, scaler, records.len(), groups.len());
    h.counts.invalid_groups = out.invalid.len();
    h.invalid = out.invalid;
    Ok(Manifest { header: h, records })
}

/// Applies `rule` to a pool manifest and annotates advantages.
pub fn filter_stage(cfg: &RunConfig, pool: &Manifest, rule: FilterRule) -> Result<Manifest> {
    pool.expect_stage(Stage::Pool)?;
    pool.expect_lineage(cfg.lineage_hash())?;
    let f = filter_pool(&pool.records, rule, pool.header.group_size, cfg.curation.advantage_eps)?;
    let mut h = pool.header.clone();
    h.stage = Stage::Filtered;
    h.config_hash = hash_hex(cfg.config_hash());
    h.rule = Some(rule);
    h.counts.groups = f.groups;
    h.counts.records = f.records.len();
    if f.records.is_empty() {
        h.warnings.push(format!("no group survives rule {rule}"));
    }
    Ok(Manifest {
        header: h,
        records: f.records,
    })
}

/// Picks the training set from a filtered manifest.
pub fn select_stage(cfg: &RunConfig, filtered: &Manifest, strategy: SelectionStrategy) -> Result<Manifest> {
    filtered.expect_stage(Stage::Filtered)?;
    filtered.expect_lineage(cfg.lineage_hash())?;
    let mut sel = select(&filtered.records, strategy, cfg.seed)?;
    if cfg.curation.renormalize_after_selection {
        renormalize_advantages(&mut sel.records, cfg.curation.advantage_eps)?;
    }
    let mut h = filtered.header.clone();
    h.stage = Stage::Selected;
    h.config_hash = hash_hex(cfg.config_hash());
    h.strategy = Some(strategy);
    h.renormalized = cfg.curation.renormalize_after_selection;
    h.counts.records = sel.records.len();
    h.counts.groups = sel
        .records
        .iter()
        .map(|r| r.prompt_id)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    h.warnings.extend(sel.warnings);
    Ok(Manifest {
        header: h,
        records: sel.records,
    })
}

// ---------------------------------------------------------------- training

pub fn finetune_config(cfg: &RunConfig, steps: usize) -> TrainConfig {
    TrainConfig {
        total_steps: steps,
        seed: stream_seed(cfg.seed, Stream::Train, &[]),
        ..cfg.training.clone()
    }
}

/// Fine-tunes `base` on a selected manifest.
pub fn train_stage(
    cfg: &RunConfig,
    selected: &Manifest,
    base: &ModelParams<f64>,
    mode: AdvantageMode,
    steps: usize,
) -> Result<TrainRun<f64, ModelParams<f64>>> {
    selected.expect_stage(Stage::Selected)?;
    selected.expect_lineage(cfg.lineage_hash())?;
    train_on_records(cfg, &selected.records, selected.header.rule, base, mode, steps)
}

fn train_on_records(
    cfg: &RunConfig,
    records: &[SampleRecord],
    rule: Option<FilterRule>,
    base: &ModelParams<f64>,
    mode: AdvantageMode,
    steps: usize,
) -> Result<TrainRun<f64, ModelParams<f64>>> {
    let set = TrainingSet::from_records(records, cfg.curation.refinements, cfg.curation.classes)?;
    let objective = Objective { rule, mode };
    train(&finetune_config(cfg, steps), &set, objective, &cfg.schedule()?, base.clone()).map_err(|f| {
        log::error!("training aborted after step {}: {}", f.step, f.error);
        f.error
    })
}

// ---------------------------------------------------------------- evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub base: EvalReport,
    pub tuned: EvalReport,
    pub win_rate: WinRateTable,
}

pub fn eval_stage(
    cfg: &RunConfig,
    base: &ModelParams<f64>,
    tuned: &ModelParams<f64>,
    scaler: &RewardScaler<f64>,
) -> Result<EvalSummary> {
    let prompts = eval_prompts(cfg)?;
    let suite = cfg.reward_suite()?;
    let schedule = cfg.schedule()?;
    let ctx = EvalContext {
        prompts: &prompts,
        suite: &suite,
        scaler,
        weights: &cfg.rewards.weights,
        schedule: &schedule,
        k_per_prompt: cfg.evaluation.k_per_prompt,
        seed: cfg.seed,
        bound: cfg.diffusion.divergence_bound,
    };
    let b = score_model(base, &ctx)?;
    let t = score_model(tuned, &ctx)?;
    Ok(EvalSummary {
        base: summarize(&b, &ctx),
        tuned: summarize(&t, &ctx),
        win_rate: win_rate(&t, &b)?,
    })
}

// ---------------------------------------------------------------- verification

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboCheck {
    pub elbo: f64,
    pub std_err: f64,
    pub exact_log_likelihood: f64,
    pub draws: usize,
    /// `elbo - 3 std_err <= exact`.
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub params: usize,
    pub groups: usize,
    pub group_size: usize,
    pub draws: usize,
    pub sweep_draws: usize,
    pub anchor_surrogate: f64,
    pub gradient: GradientCheck,
    pub gradient_pass: bool,
    /// Same comparison with `w(t)` dropped from the MSE side; must fail.
    pub negative_control: GradientCheck,
    pub negative_control_fails: bool,
    /// Gradient mismatch at `theta_old + eta_max g`, which grows with the step.
    pub off_anchor_gap: f64,
    pub sweep: SweepResult,
    pub slope_pass: bool,
    pub zero_sum: ZeroSumAudit,
    pub zero_sum_pass: bool,
    pub elbo: ElboCheck,
    pub passed: bool,
}

pub const GRADIENT_TOL: f64 = 1e-8;
pub const SLOPE_RANGE: (f64, f64) = (1.8, 2.2);

/// Model, groups and schedule the verifier runs on.
pub type VerificationSetup = (ModelParams<f64>, Vec<TheoryGroup<f64>>, NoiseSchedule<f64>);

/// Small model and synthetic groups used by the verifier.
pub fn verification_setup(cfg: &RunConfig) -> Result<VerificationSetup> {
    let v = &cfg.verification;
    let classes = cfg.curation.classes;
    let arch = Architecture {
        data_dim: cfg.diffusion.data_dim,
        time_dim: v.time_dim,
        cond_dim: classes,
        hidden: v.hidden,
    };
    let model = ModelParams::init(arch, &mut stream_rng(cfg.seed, Stream::Verify, &[0]))?;
    let suite = cfg.reward_suite()?;
    let mut groups = Vec::with_capacity(v.groups);
    for g in 0..v.groups {
        let class = g % classes;
        let mut rng = stream_rng(cfg.seed, Stream::Verify, &[1, g as u64]);
        let target = suite.target(class)?.to_vec();
        let x0: Vec<Vec<f64>> = (0..v.group_size)
            .map(|_| target.iter().map(|&m| m + <f64 as crate::Scalar>::standard_normal(&mut rng)).collect())
            .collect();
        let rewards: Vec<f64> = x0.iter().map(|x| -crate::scalar::dist_sq(x, &target)).collect();
        groups.push(TheoryGroup {
            cond: class_embedding(class, classes)?,
            x0,
            advantages: group_advantage(&rewards, cfg.curation.advantage_eps)?,
        });
    }
    Ok((model, groups, cfg.schedule()?))
}

/// Exact-likelihood comparison on a linear predictor and Gaussian data.
pub fn elbo_check(cfg: &RunConfig, draws: usize) -> Result<ElboCheck> {
    let d = cfg.diffusion.data_dim;
    let mut rng = stream_rng(cfg.seed, Stream::Verify, &[4]);
    let a: Vec<f64> = (0..d * d)
        .map(|i| if i / d == i % d { 0.3 } else { 0.05 })
        .collect();
    let pred = LinearPredictor::new(d, a)?;
    let schedule = cfg.schedule()?;
    let x0: Vec<f64> = (0..d).map(|i| 0.5 - 0.3 * i as f64).collect();
    let est = elbo_estimate(&pred, &schedule, &x0, draws, &mut rng)?;
    let exact = exact_log_likelihood(&pred, &schedule, &x0)?;
    Ok(ElboCheck {
        elbo: est.mean,
        std_err: est.std_err,
        exact_log_likelihood: exact,
        draws,
        pass: est.mean - 3.0 * est.std_err <= exact,
    })
}

pub fn verify_stage(cfg: &RunConfig) -> Result<VerificationReport> {
    let v = &cfg.verification;
    let (model, groups, schedule) = verification_setup(cfg)?;
    let draws = CommonDraws::sample(&groups, &schedule, v.draws, stream_seed(cfg.seed, Stream::Verify, &[2]))?;
    let anchor = crate::theory::estimate_jhat_surrogate(&model, &model, &groups, &draws, &schedule)?;
    let gradient = gradient_equivalence(&model, &groups, &draws, &schedule, TimestepWeighting::Elbo)?;
    let negative_control = gradient_equivalence(&model, &groups, &draws, &schedule, TimestepWeighting::Uniform)?;

    let etas = geometric_grid(v.eta_max, v.eta_min, v.eta_points);
    let spec = PerturbationSpec::random(model.values().len(), etas, stream_seed(cfg.seed, Stream::Verify, &[3]))?;
    let sweep_draws =
        CommonDraws::sample(&groups, &schedule, v.sweep_draws, stream_seed(cfg.seed, Stream::Verify, &[5]))?;
    let sweep = eta_sweep(&model, &spec, &groups, &sweep_draws, &schedule)?;
    let mut moved = model.clone();
    for (p, g) in crate::diffusion::ParametricPredictor::params_mut(&mut moved)
        .iter_mut()
        .zip(&spec.direction)
    {
        *p += v.eta_max * g;
    }
    let off_anchor_gap = gradient_gap_at(&moved, &model, &groups, &draws, &schedule)?;
    let zero_sum = zero_sum_audit(&groups.iter().map(|g| g.advantages.clone()).collect::<Vec<_>>());
    let elbo = elbo_check(cfg, v.sweep_draws)?;

    let gradient_pass = !gradient.degenerate && gradient.relative_error < GRADIENT_TOL;
    let negative_control_fails = negative_control.relative_error >= GRADIENT_TOL;
    let slope_pass = (SLOPE_RANGE.0..=SLOPE_RANGE.1).contains(&sweep.slope);
    let zero_sum_pass = zero_sum.flagged.is_empty();
    Ok(VerificationReport {
        params: model.values().len(),
        groups: groups.len(),
        group_size: v.group_size,
        draws: v.draws,
        sweep_draws: v.sweep_draws,
        anchor_surrogate: anchor,
        gradient,
        gradient_pass,
        negative_control,
        negative_control_fails,
        off_anchor_gap,
        passed: gradient_pass && negative_control_fails && slope_pass && zero_sum_pass && elbo.pass,
        sweep,
        slope_pass,
        zero_sum,
        zero_sum_pass,
        elbo,
    })
}

// ---------------------------------------------------------------- ablations

/// Everything one master seed produces up to the pool.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub cfg: RunConfig,
    pub base: ModelParams<f64>,
    pub pool: Manifest,
}

impl SeedContext {
    pub fn build(cfg: &RunConfig) -> Result<Self> {
        let (base, _) = pretrain_base(cfg)?;
        let pool = generate_pool(cfg, &base)?;
        Ok(Self {
            cfg: cfg.clone(),
            base,
            pool,
        })
    }

    fn eval_ctx_parts(&self) -> Result<(PromptSet<f64>, crate::reward::RewardSuite<f64>, NoiseSchedule<f64>)> {
        Ok((eval_prompts(&self.cfg)?, self.cfg.reward_suite()?, self.cfg.schedule()?))
    }

    pub fn evaluate(&self, model: &ModelParams<f64>) -> Result<EvalReport> {
        let (prompts, suite, schedule) = self.eval_ctx_parts()?;
        let ctx = EvalContext {
            prompts: &prompts,
            suite: &suite,
            scaler: &self.pool.header.scaler,
            weights: &self.cfg.rewards.weights,
            schedule: &schedule,
            k_per_prompt: self.cfg.evaluation.k_per_prompt,
            seed: self.cfg.seed,
            bound: self.cfg.diffusion.divergence_bound,
        };
        Ok(summarize(&score_model(model, &ctx)?, &ctx))
    }

    /// Filters the pool under `rule`, with `r_total` recomputed from weights
    /// restricted to the rule's channels when `restrict` is set.
    pub fn filtered(&self, rule: FilterRule, restrict: bool) -> Result<Manifest> {
        let mut pool = self.pool.clone();
        if restrict {
            let w = self.cfg.rewards.weights.restricted(rule.channels())?;
            rescore(&mut pool.records, &pool.header.scaler, &w);
            pool.header.weights = w;
        }
        filter_stage(&self.cfg, &pool, rule)
    }

    /// Trains one cell and evaluates it with the default composite.
    pub fn cell(&self, name: &str, selected: &Manifest, mode: AdvantageMode, steps: usize) -> GridCell {
        let mut cell = GridCell {
            name: name.into(),
            seed: self.cfg.seed,
            train_size: selected.records.len(),
            steps,
            status: "ok".into(),
            report: None,
        };
        if selected.records.is_empty() {
            cell.status = "empty".into();
            return cell;
        }
        match train_stage(&self.cfg, selected, &self.base, mode, steps).and_then(|run| self.evaluate(&run.model)) {
            Ok(r) => cell.report = Some(r),
            Err(e) => cell.status = format!("failed: {e}"),
        }
        cell
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub base: Vec<GridCell>,
    pub selection: Vec<GridCell>,
    pub rules: Vec<GridCell>,
    pub sft: Vec<GridCell>,
}

/// Which grids to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationPlan {
    pub selection: bool,
    pub rules: bool,
    pub sft: bool,
}

impl AblationPlan {
    pub const ALL: Self = Self {
        selection: true,
        rules: true,
        sft: true,
    };
}

/// Cell name of a rule in the reward-combination grid.
pub fn rule_cell_name(rule: FilterRule) -> String {
    format!("rule:{rule}")
}

/// Runs the ablation grids for one master seed. Cells are keyed by name and
/// share the seed's training and evaluation streams, so adding, removing or
/// reordering cells leaves every other cell unchanged.
pub fn ablate_seed(ctx: &SeedContext, plan: AblationPlan) -> Result<AblationReport> {
    let cfg = &ctx.cfg;
    let base_steps = cfg.training.total_steps;
    let mut report = AblationReport {
        seeds: vec![cfg.seed],
        base: vec![GridCell {
            name: "base".into(),
            seed: cfg.seed,
            train_size: 0,
            steps: 0,
            status: "ok".into(),
            report: Some(ctx.evaluate(&ctx.base)?),
        }],
        selection: Vec::new(),
        rules: Vec::new(),
        sft: Vec::new(),
    };
    let main_filtered = ctx.filtered(cfg.curation.rule, false)?;
    if plan.selection {
        for &s in &cfg.ablation.strategies {
            let sel = select_stage(cfg, &main_filtered, s)?;
            let steps = cfg.ablation.steps_for(s, sel.records.len(), base_steps);
            report.selection.push(ctx.cell(&s.to_string(), &sel, AdvantageMode::Craft, steps));
        }
    }
    if plan.rules {
        for &rule in &cfg.ablation.rules {
            let filtered = ctx.filtered(rule, true)?;
            let sel = select_stage(cfg, &filtered, cfg.curation.strategy)?;
            report
                .rules
                .push(ctx.cell(&rule_cell_name(rule), &sel, AdvantageMode::Craft, base_steps));
        }
    }
    if plan.sft {
        let sel = select_stage(cfg, &main_filtered, cfg.curation.strategy)?;
        report.sft.push(ctx.cell("craft", &sel, AdvantageMode::Craft, base_steps));
        report.sft.push(ctx.cell("vanilla", &sel, AdvantageMode::Vanilla, base_steps));
    }
    Ok(report)
}

/// Runs [`ablate_seed`] for every evaluation seed and concatenates the cells.
pub fn ablate(cfg: &RunConfig, plan: AblationPlan) -> Result<AblationReport> {
    let mut all = AblationReport {
        seeds: Vec::new(),
        base: Vec::new(),
        selection: Vec::new(),
        rules: Vec::new(),
        sft: Vec::new(),
    };
    for &seed in &cfg.evaluation.seeds {
        log::info!("ablation seed {seed}");
        let ctx = SeedContext::build(&cfg.with_seed(seed))?;
        let r = ablate_seed(&ctx, plan)?;
        all.seeds.extend(r.seeds);
        all.base.extend(r.base);
        all.selection.extend(r.selection);
        all.rules.extend(r.rules);
        all.sft.extend(r.sft);
    }
    Ok(all)
}

// ---------------------------------------------------------------- artifacts

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut s = String::new();
    for r in rows {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, sweep: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CraftError::Format(e.to_string()))?;
    let err = |e: csv::Error| CraftError::Format(e.to_string());
    w.write_record(["eta", "surrogate", "linear", "residual", "used"]).map_err(err)?;
    for p in &sweep.points {
        w.write_record([
            p.eta.to_string(),
            p.surrogate.to_string(),
            p.linear.to_string(),
            p.residual.to_string(),
            p.used.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush()?;
    Ok(())
}

fn save_model(cfg: &RunConfig, path: &Path, run: &TrainRun<f64, ModelParams<f64>>) -> Result<()> {
    Checkpoint {
        config_hash: cfg.config_hash(),
        step: run.log.len() as u64,
        params: run.model.clone(),
        optimizer: Some(run.optimizer.clone()),
    }
    .write(path)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<ModelParams<f64>> {
    let c = Checkpoint::read(path)?;
    if c.params.architecture() != cfg.architecture() {
        return Err(CraftError::Contract(format!(
            "{} has architecture {:?}, configuration expects {:?}",
            path.display(),
            c.params.architecture(),
            cfg.architecture()
        )));
    }
    Ok(c.params)
}

/// One CLI stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    Filter,
    Select,
    Train,
    Eval,
    Verify,
    Ablate,
    All,
}

/// Stage runner reading and writing artifacts in `out`.
pub struct Runner {
    pub cfg: RunConfig,
    pub out: PathBuf,
}

impl Runner {
    pub fn new(cfg: RunConfig, out: impl Into<PathBuf>) -> Result<Self> {
        cfg.validate()?;
        let out = out.into();
        fs::create_dir_all(&out)?;
        Ok(Self { cfg, out })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    pub fn run(&self, cmd: Command) -> Result<()> {
        match cmd {
            Command::GenData => self.gen_data(),
            Command::Filter => self.filter(),
            Command::Select => self.select(),
            Command::Train => self.train(),
            Command::Eval => self.eval().map(|_| ()),
            Command::Verify => self.verify().map(|_| ()),
            Command::Ablate => self.ablate().map(|_| ()),
            Command::All => {
                for c in [
                    Command::GenData,
                    Command::Filter,
                    Command::Select,
                    Command::Train,
                    Command::Eval,
                    Command::Verify,
                ] {
                    self.run(c)?;
                }
                Ok(())
            }
        }
    }

    pub fn gen_data(&self) -> Result<()> {
        let cfg = &self.cfg;
        if cfg.curation.provider == ProviderKind::File {
            let ps = PromptSet::<f64>::toy(cfg.curation.prompts, cfg.curation.classes, 0, cfg.curation.refinements)?;
            let n = write_refinement_requests(&self.path(files::REQUESTS), &ps, cfg.curation.radius)?;
            log::info!("wrote {n} refinement requests");
        }
        log::info!("pretraining base model ({} steps)", cfg.pretrain.steps);
        let (base, log) = pretrain_base(cfg)?;
        Checkpoint {
            config_hash: cfg.config_hash(),
            step: log.len() as u64,
            params: base.clone(),
            optimizer: None,
        }
        .write(&self.path(files::BASE))?;
        write_jsonl(&self.path(files::PRETRAIN_LOG), &log)?;
        let pool = generate_pool(cfg, &base)?;
        log::info!(
            "pool: {} groups, {} samples, {} invalid",
            pool.header.counts.groups,
            pool.header.counts.records,
            pool.header.counts.invalid_groups
        );
        pool.write(&self.path(files::POOL))
    }

    pub fn filter(&self) -> Result<()> {
        let pool = Manifest::read(&self.path(files::POOL))?;
        let f = filter_stage(&self.cfg, &pool, self.cfg.curation.rule)?;
        log::info!(
            "rule {}: {} of {} groups retained",
            self.cfg.curation.rule,
            f.header.counts.groups,
            pool.header.counts.groups
        );
        f.write(&self.path(files::FILTERED))
    }

    pub fn select(&self) -> Result<()> {
        let f = Manifest::read(&self.path(files::FILTERED))?;
        let s = select_stage(&self.cfg, &f, self.cfg.curation.strategy)?;
        log::info!("selected {} samples with {}", s.records.len(), self.cfg.curation.strategy);
        s.write(&self.path(files::SELECTED))
    }

    pub fn train(&self) -> Result<()> {
        let cfg = &self.cfg;
        let selected = Manifest::read(&self.path(files::SELECTED))?;
        let base = load_model(cfg, &self.path(files::BASE))?;
        let run = train_stage(cfg, &selected, &base, AdvantageMode::Craft, cfg.training.total_steps)?;
        if !run.checkpoints.is_empty() {
            let dir = self.path(files::SNAPSHOTS);
            fs::create_dir_all(&dir)?;
            for s in &run.checkpoints {
                Checkpoint {
                    config_hash: cfg.config_hash(),
                    step: s.step as u64,
                    params: s.model.clone(),
                    optimizer: Some(s.optimizer.clone()),
                }
                .write(&dir.join(format!("step_{:06}.ckpt", s.step)))?;
            }
        }
        write_jsonl(&self.path(files::TRAIN_LOG), &run.log)?;
        save_model(cfg, &self.path(files::MODEL), &run)
    }

    pub fn eval(&self) -> Result<EvalSummary> {
        let cfg = &self.cfg;
        let selected = Manifest::read(&self.path(files::SELECTED))?;
        selected.expect_lineage(cfg.lineage_hash())?;
        let base = load_model(cfg, &self.path(files::BASE))?;
        let tuned = load_model(cfg, &self.path(files::MODEL))?;
        let s = eval_stage(cfg, &base, &tuned, &selected.header.scaler)?;
        log::info!(
            "composite: base {:.4}, tuned {:.4}, win rate {:.3}",
            s.base.composite,
            s.tuned.composite,
            s.win_rate.composite
        );
        write_json(&self.path(files::EVAL), &s)?;
        Ok(s)
    }

    pub fn verify(&self) -> Result<VerificationReport> {
        let r = verify_stage(&self.cfg)?;
        log::info!(
            "gradient rel. error {:.3e}, slope {:.3}, zero-sum {:.3e}, passed {}",
            r.gradient.relative_error,
            r.sweep.slope,
            r.zero_sum.max_residual,
            r.passed
        );
        write_json(&self.path(files::VERIFY), &r)?;
        write_sweep_csv(&self.path(files::VERIFY_CSV), &r.sweep)?;
        Ok(r)
    }

    pub fn ablate(&self) -> Result<AblationReport> {
        let r = ablate(&self.cfg, AblationPlan::ALL)?;
        write_json(&self.path(files::ABLATION), &r)?;
        crate::eval::write_grid_csv(&self.path("ablation_selection.csv"), &r.selection)?;
        crate::eval::write_grid_csv(&self.path("ablation_rules.csv"), &r.rules)?;
        crate::eval::write_grid_csv(&self.path("ablation_sft.csv"), &r.sft)?;
        Ok(r)
    }
}

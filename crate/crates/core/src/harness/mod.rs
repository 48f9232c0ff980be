//! Monte Carlo experiments: coverage and success rates over fresh
//! calibrations, the distributed/centralized comparison, and the
//! fixed-calibration (dataset-conditional) mode.

mod checkpoint;
mod metrics;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::conformal::{
    calibration_record, conformal_quantile, dataset_conditional_alpha, CalibrationRecord, Quantile,
};
use crate::error::{Error, Result};
use crate::planner::{joint_calibration_record, HelpPolicy, PlanTrace, Planner, PlannerConfig, PlannerMode};
use crate::scenario::{sample_indexed, DistributionParams, FeasibilityConfig, Scenario};
use crate::scorer::{Scorer, ScorerSpec};
use crate::seeding::{self, tag};
use crate::world::validate_plan;

pub use checkpoint::Checkpoint;
pub use metrics::{aggregate, compare, write_metrics_csv, ComparisonRow, Metrics};

pub const CONFIG_VERSION: u32 = 1;

fn config_version() -> u32 {
    CONFIG_VERSION
}

fn default_joint_budget() -> u64 {
    PlannerConfig::new(PlannerMode::Centralized, 0.5).joint_budget
}

fn oracle_user() -> HelpPolicy {
    HelpPolicy::OracleUser
}

/// A planner configuration without its level; the experiment supplies α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerVariant {
    pub mode: PlannerMode,
    #[serde(default)]
    pub reorder_attempts: usize,
    #[serde(default = "oracle_user")]
    pub help: HelpPolicy,
    #[serde(default = "default_joint_budget")]
    pub joint_budget: u64,
}

impl PlannerVariant {
    pub fn new(mode: PlannerMode) -> Self {
        PlannerVariant {
            mode,
            reorder_attempts: 0,
            help: HelpPolicy::OracleUser,
            joint_budget: default_joint_budget(),
        }
    }

    pub fn config(&self, alpha: f64, feasibility: &FeasibilityConfig) -> PlannerConfig {
        PlannerConfig {
            mode: self.mode,
            alpha,
            reorder_attempts: self.reorder_attempts,
            help: self.help,
            order_seed: None,
            feasibility: feasibility.clone(),
            joint_budget: self.joint_budget,
        }
    }

    /// Trials of this variant must succeed whenever the truth is covered.
    fn covered_implies_success(&self) -> bool {
        self.mode != PlannerMode::ArgmaxNoHelp
            && self.reorder_attempts == 0
            && self.help == HelpPolicy::OracleUser
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConditionalSpec {
    pub delta: f64,
    /// Coverage the single calibration must reach with probability 1 − δ.
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "config_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub params: DistributionParams,
    pub scorer: ScorerSpec,
    pub alphas: Vec<f64>,
    /// Calibration scenarios per trial (M).
    pub calibration_size: usize,
    /// Test scenarios, one per trial (R).
    pub trials: usize,
    pub planners: Vec<PlannerVariant>,
    pub seed: u64,
    #[serde(default)]
    pub feasibility: FeasibilityConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_conditional: Option<DatasetConditionalSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Desk-scale defaults: noisy oracle, M = 30, R = 200, three levels.
    pub fn new(seed: u64) -> Self {
        ExperimentConfig {
            schema_version: CONFIG_VERSION,
            params: DistributionParams::default(),
            scorer: ScorerSpec::noisy(4.0, 1.0, 0.15, seed),
            alphas: vec![0.05, 0.1, 0.2],
            calibration_size: 30,
            trials: 200,
            planners: vec![PlannerVariant::new(PlannerMode::Distributed)],
            seed,
            feasibility: FeasibilityConfig::default(),
            dataset_conditional: None,
            output: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported experiment schema version {}",
                self.schema_version
            )));
        }
        self.params.validate()?;
        self.scorer.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("trials (R) must be at least 1".into()));
        }
        if self.calibration_size == 0 {
            return Err(Error::Config("calibration_size (M) must be at least 1".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("alphas must be a nonempty list in (0, 1)".into()));
        }
        if self.planners.is_empty() {
            return Err(Error::Config("at least one planner variant is needed".into()));
        }
        if let Some(dc) = self.dataset_conditional {
            if !(dc.delta > 0.0 && dc.delta < 1.0 && dc.target > 0.0 && dc.target < 1.0) {
                return Err(Error::Config("delta and target must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; keys checkpoints to their config.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    fn needs(&self, mode: PlannerMode) -> bool {
        self.planners.iter().any(|p| p.mode == mode)
    }
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; rayon's default when unset.
    pub jobs: Option<usize>,
    /// JSONL file of finished trials; reused when it matches the config.
    pub checkpoint: Option<PathBuf>,
}

/// What happened to one planner variant on one test scenario at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub trial: usize,
    pub alpha: f64,
    pub variant: usize,
    pub mode: PlannerMode,
    /// Labeled truth path inside the product set; `None` for argmax.
    pub covered: Option<bool>,
    pub success: bool,
    /// Fail-on-help stopped planning.
    pub planning_failed: bool,
    pub full_set: bool,
    pub q_bar: Option<f64>,
    pub rounds: usize,
    pub singleton_rounds: usize,
    pub decisions: usize,
    pub user_decisions: usize,
    pub user_events: usize,
    pub reorders: usize,
    pub coverage_misses: usize,
    pub set_sizes: Vec<usize>,
    pub calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConditionalSummary {
    pub delta: f64,
    pub target: f64,
    pub m: usize,
    pub alpha_m: f64,
    pub v: usize,
    pub coverage_bound: f64,
    pub quantile: Quantile<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibrationMode {
    /// Fresh calibration set for every trial.
    Marginal,
    /// One calibration set shared by all trials.
    DatasetConditional,
}

/// Result document; a pure function of the experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_hash: String,
    pub calibration: CalibrationMode,
    pub metrics: Vec<Metrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_conditional: Option<DatasetConditionalSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparison: Vec<ComparisonRow>,
    pub outcomes: Vec<TrialOutcome>,
}

impl ExperimentReport {
    pub fn metrics_for(&self, alpha: f64, mode: PlannerMode) -> Option<&Metrics> {
        self.metrics
            .iter()
            .find(|m| m.alpha == alpha && m.mode == mode)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Wall-clock figures, kept out of the report so reruns compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Timing {
    pub wall_seconds: f64,
    pub trials_computed: usize,
    pub trials_resumed: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub timing: Timing,
}

/// Quantiles in force for one level.
struct Level {
    alpha: f64,
    sequential: Option<Quantile<f64>>,
    joint: Option<Quantile<f64>>,
}

fn scenario_at(cfg: &ExperimentConfig, parts: &[u64]) -> Result<Arc<Scenario>> {
    let params = DistributionParams {
        seed: cfg.seed,
        ..cfg.params.clone()
    };
    Ok(Arc::new(sample_indexed(&params, seeding::mix(parts))?))
}

fn calibration_scenarios(cfg: &ExperimentConfig, key: &[u64]) -> Result<Vec<Arc<Scenario>>> {
    (0..cfg.calibration_size as u64)
        .map(|j| scenario_at(cfg, &[key, &[j]].concat()))
        .collect()
}

fn ncs(records: &[CalibrationRecord]) -> Result<Vec<f64>> {
    records.iter().map(CalibrationRecord::ncs).collect()
}

/// Sequence and joint nonconformity scores of the calibration scenarios, as
/// far as the configured planners need them.
fn calibration_ncs(
    cfg: &ExperimentConfig,
    scorer: &dyn Scorer,
    scenarios: &[Arc<Scenario>],
) -> Result<(Option<Vec<f64>>, Option<Vec<f64>>)> {
    let seq = if cfg.needs(PlannerMode::Distributed) {
        let records = scenarios
            .iter()
            .map(|s| calibration_record(s, scorer, &cfg.feasibility))
            .collect::<Result<Vec<_>>>()?;
        Some(ncs(&records)?)
    } else {
        None
    };
    let joint = if cfg.needs(PlannerMode::Centralized) {
        let records = scenarios
            .iter()
            .map(|s| joint_calibration_record(s, scorer, &cfg.feasibility))
            .collect::<Result<Vec<_>>>()?;
        Some(ncs(&records)?)
    } else {
        None
    };
    Ok((seq, joint))
}

fn level(alpha: f64, seq: &Option<Vec<f64>>, joint: &Option<Vec<f64>>) -> Result<Level> {
    Ok(Level {
        alpha,
        sequential: seq.as_ref().map(|n| conformal_quantile(n, alpha)).transpose()?,
        joint: joint.as_ref().map(|n| conformal_quantile(n, alpha)).transpose()?,
    })
}

fn check_call_law(trace: &PlanTrace, scenario: &Scenario) -> Result<()> {
    let s = scenario.decision_space().len() as u64;
    let (n, h) = (scenario.num_robots as u32, scenario.horizon as u64);
    let ok = match trace.mode {
        PlannerMode::Centralized => trace.calls.total == s.pow(n) * h,
        _ => {
            let rounds = trace.iterations.len() as u64;
            trace.calls.total == s * rounds
                && (trace.reorders() > 0 || rounds == u64::from(n) * h)
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Internal(format!(
            "scorer call count {} breaks the {:?} law on scenario {:016x}",
            trace.calls.total, trace.mode, scenario.id
        )))
    }
}

/// Plans `test` with every variant at every level.
fn evaluate(
    cfg: &ExperimentConfig,
    scorer: &dyn Scorer,
    trial: usize,
    test: &Arc<Scenario>,
    levels: &[Level],
) -> Result<Vec<TrialOutcome>> {
    let seq_truth = if cfg.needs(PlannerMode::Distributed) {
        Some(calibration_record(test, scorer, &cfg.feasibility)?.min_score())
    } else {
        None
    };
    let joint_truth = if cfg.needs(PlannerMode::Centralized) {
        Some(joint_calibration_record(test, scorer, &cfg.feasibility)?.min_score())
    } else {
        None
    };
    let mut out = Vec::new();
    for level in levels {
        for (v, variant) in cfg.planners.iter().enumerate() {
            let (q, truth) = match variant.mode {
                PlannerMode::Distributed => (level.sequential.as_ref(), seq_truth),
                PlannerMode::Centralized => (level.joint.as_ref(), joint_truth),
                PlannerMode::ArgmaxNoHelp => (None, None),
            };
            let covered = q.zip(truth).map(|(q, score)| q.admits(score));
            let planner_cfg = variant.config(level.alpha, &cfg.feasibility);
            let mut outcome = TrialOutcome {
                trial,
                alpha: level.alpha,
                variant: v,
                mode: variant.mode,
                covered,
                success: false,
                planning_failed: false,
                full_set: q.is_some_and(Quantile::is_full_set),
                q_bar: q.and_then(Quantile::value),
                rounds: 0,
                singleton_rounds: 0,
                decisions: 0,
                user_decisions: 0,
                user_events: 0,
                reorders: 0,
                coverage_misses: 0,
                set_sizes: Vec::new(),
                calls: 0,
            };
            match Planner::new(Arc::clone(test), scorer, planner_cfg)?.run(q) {
                Ok(trace) => {
                    check_call_law(&trace, test)?;
                    outcome.success = validate_plan(test, &trace.plan).complete;
                    outcome.rounds = trace.iterations.len();
                    outcome.singleton_rounds = trace.singleton_rounds();
                    outcome.decisions = trace.decisions();
                    outcome.user_decisions = trace.user_decisions();
                    outcome.user_events = trace.user_events().count();
                    outcome.reorders = trace.reorders();
                    outcome.coverage_misses =
                        trace.user_events().filter(|e| e.coverage_miss).count();
                    outcome.set_sizes = trace.iterations.iter().map(|r| r.set_size).collect();
                    outcome.calls = trace.calls.total;
                    if variant.covered_implies_success()
                        && outcome.covered == Some(true)
                        && !outcome.success
                    {
                        return Err(Error::Internal(format!(
                            "scenario {:016x}: truth covered at alpha {} but the plan failed",
                            test.id, level.alpha
                        )));
                    }
                }
                Err(Error::PlanningFailure(_)) => outcome.planning_failed = true,
                Err(e) => return Err(e),
            }
            out.push(outcome);
        }
    }
    Ok(out)
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot start {n} workers: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Runs `trial` for every index not already in the checkpoint.
fn run_trials(
    cfg: &ExperimentConfig,
    scorer: &dyn Scorer,
    opts: &RunOptions,
    trial: impl Fn(usize) -> Result<Vec<TrialOutcome>> + Sync,
) -> Result<(Vec<TrialOutcome>, Timing)> {
    let started = Instant::now();
    let hash = cfg.hash();
    let checkpoint = opts
        .checkpoint
        .as_deref()
        .map(|p| Checkpoint::open(p, &hash))
        .transpose()?;
    let done = checkpoint.as_ref().map(Checkpoint::finished).unwrap_or_default();
    let pending: Vec<usize> = (0..cfg.trials).filter(|i| !done.contains_key(i)).collect();
    let one = |i: &usize| -> Result<(usize, Vec<TrialOutcome>)> {
        let outcomes = trial(*i)?;
        if let Some(c) = &checkpoint {
            c.append(*i, &outcomes)?;
        }
        Ok((*i, outcomes))
    };
    let fresh: Vec<(usize, Vec<TrialOutcome>)> = with_pool(opts.jobs, || {
        if scorer.concurrency_safe() {
            pending.par_iter().map(one).collect::<Result<Vec<_>>>()
        } else {
            pending.iter().map(one).collect::<Result<Vec<_>>>()
        }
    })??;
    let resumed = done.len();
    let mut all: Vec<(usize, Vec<TrialOutcome>)> = done.into_iter().collect();
    all.extend(fresh);
    all.sort_by_key(|(i, _)| *i);
    let outcomes = all.into_iter().flat_map(|(_, o)| o).collect();
    Ok((
        outcomes,
        Timing {
            wall_seconds: started.elapsed().as_secs_f64(),
            trials_computed: pending.len(),
            trials_resumed: resumed,
        },
    ))
}

/// Marginal mode: every trial draws its own M calibration scenarios and one
/// test scenario, calibrates, and plans the test scenario with every
/// configured variant at every level.
pub fn run_coverage_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRun> {
    cfg.validate()?;
    let scorer = cfg.scorer.build()?;
    let scorer: &dyn Scorer = scorer.as_ref();
    let (outcomes, timing) = run_trials(cfg, scorer, opts, |i| {
        let trial = i as u64;
        let calib = calibration_scenarios(cfg, &[cfg.seed, tag::CALIBRATION, trial])?;
        let (seq, joint) = calibration_ncs(cfg, scorer, &calib)?;
        let levels = cfg
            .alphas
            .iter()
            .map(|a| level(*a, &seq, &joint))
            .collect::<Result<Vec<_>>>()?;
        let test = scenario_at(cfg, &[cfg.seed, tag::TEST, trial])?;
        evaluate(cfg, scorer, i, &test, &levels)
    })?;
    let metrics = aggregate(cfg, &outcomes);
    Ok(ExperimentRun {
        report: ExperimentReport {
            config_hash: cfg.hash(),
            calibration: CalibrationMode::Marginal,
            metrics,
            dataset_conditional: None,
            comparison: Vec::new(),
            outcomes,
        },
        timing,
    })
}

/// Distributed against centralized on identical scenarios, calibrations and
/// scorer noise. The distributed variant keeps the reorder bound of the
/// first configured distributed planner.
pub fn run_comparison(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRun> {
    let distributed = cfg
        .planners
        .iter()
        .find(|p| p.mode == PlannerMode::Distributed)
        .copied()
        .unwrap_or_else(|| PlannerVariant::new(PlannerMode::Distributed));
    let centralized = cfg
        .planners
        .iter()
        .find(|p| p.mode == PlannerMode::Centralized)
        .copied()
        .unwrap_or_else(|| PlannerVariant::new(PlannerMode::Centralized));
    let cfg = ExperimentConfig {
        planners: vec![distributed, centralized],
        ..cfg.clone()
    };
    let mut run = run_coverage_experiment(&cfg, opts)?;
    run.report.comparison = compare(&run.report.metrics, &run.report.outcomes);
    Ok(run)
}

/// Fixed-calibration mode: one calibration set at the adjusted level α_M,
/// evaluated on R fresh test scenarios.
pub fn run_dataset_conditional(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<ExperimentRun> {
    cfg.validate()?;
    let spec = cfg.dataset_conditional.ok_or_else(|| {
        Error::Config("dataset-conditional mode needs delta and target".into())
    })?;
    let dc = dataset_conditional_alpha(cfg.calibration_size, spec.delta, spec.target)?;
    let scorer = cfg.scorer.build()?;
    let scorer: &dyn Scorer = scorer.as_ref();
    let calib = calibration_scenarios(cfg, &[cfg.seed, tag::FIXED_CALIBRATION])?;
    let (seq, joint) = calibration_ncs(cfg, scorer, &calib)?;
    let fixed = level(dc.alpha_m, &seq, &joint)?;
    let quantile = fixed
        .sequential
        .or(fixed.joint)
        .ok_or_else(|| Error::Config("dataset-conditional mode needs a conformal planner".into()))?;
    let levels = [fixed];
    let (outcomes, timing) = run_trials(cfg, scorer, opts, |i| {
        let test = scenario_at(cfg, &[cfg.seed, tag::TEST, i as u64])?;
        evaluate(cfg, scorer, i, &test, &levels)
    })?;
    let metrics = aggregate(cfg, &outcomes);
    Ok(ExperimentRun {
        report: ExperimentReport {
            config_hash: cfg.hash(),
            calibration: CalibrationMode::DatasetConditional,
            metrics,
            dataset_conditional: Some(DatasetConditionalSummary {
                delta: spec.delta,
                target: spec.target,
                m: cfg.calibration_size,
                alpha_m: dc.alpha_m,
                v: dc.v,
                coverage_bound: dc.coverage_bound,
                quantile,
            }),
            comparison: Vec::new(),
            outcomes,
        },
        timing,
    })
}

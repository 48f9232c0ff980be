//! Command line front end: scenario generation, calibration, planning and
//! the Monte Carlo experiments.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use satlas::conformal::{calibration_record, min_calibration_size, write_jsonl, CalibrationRecord, QuantileSummary};
use satlas::harness::{
    run_comparison, run_coverage_experiment, run_dataset_conditional, write_metrics_csv,
    DatasetConditionalSpec, ExperimentConfig, ExperimentRun, RunOptions,
};
use satlas::planner::{joint_calibration_record, HelpPolicy, Planner, PlannerConfig, PlannerMode, Terminal};
use satlas::scenario::{sample_indexed, DistributionParams, FeasibilityConfig, Scenario};
use satlas::scorer::ScorerSpec;
use satlas::world::validate_plan;
use satlas::{Error, Quantile, Result};

#[derive(Parser)]
#[command(name = "satlas", version, about = "Conformal multi-robot planning simulator")]
struct Cli {
    /// Master seed; all randomness derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (file for `plan`); results go to stdout when unset.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Miscoverage level; repeat for several levels in experiments.
    #[arg(long, global = true)]
    alpha: Vec<f64>,
    /// `oracle`, `noisy[:beta=..,sigma=..,eps=..]` or a scorer JSON file.
    #[arg(long, global = true)]
    scorer: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Distributed,
    Centralized,
    Argmax,
}

impl From<Mode> for PlannerMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Distributed => PlannerMode::Distributed,
            Mode::Centralized => PlannerMode::Centralized,
            Mode::Argmax => PlannerMode::ArgmaxNoHelp,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sample scenarios from a distribution.
    GenScenarios {
        /// Distribution parameters (JSON); the desk-scale profile when unset.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Use the household-scale profile.
        #[arg(long, conflicts_with = "params")]
        reference: bool,
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
    /// Label scenarios, write calibration records and the quantile summary.
    Calibrate {
        /// Scenario files (a single scenario or an array) or directories.
        #[arg(long, required = true, num_args = 1..)]
        scenarios: Vec<PathBuf>,
        /// Record per-step joint scores for the centralized planner.
        #[arg(long)]
        joint: bool,
    },
    /// Plan one scenario and write its trace.
    Plan {
        #[arg(long)]
        scenario: PathBuf,
        /// Quantile summary or bare quantile JSON; not needed for argmax.
        #[arg(long)]
        quantile: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Mode::Distributed)]
        mode: Mode,
        /// Ask for help on the terminal.
        #[arg(long, conflicts_with = "fail_on_help")]
        interactive: bool,
        /// Stop with exit status 1 on the first help request.
        #[arg(long)]
        fail_on_help: bool,
        /// Reorders per step before asking the user (W).
        #[arg(long, default_value_t = 0)]
        reorders: usize,
        #[arg(long)]
        joint_budget: Option<u64>,
    },
    /// Coverage and success rates over fresh calibrations.
    Coverage(ExperimentArgs),
    /// Distributed against centralized planning.
    Compare(ExperimentArgs),
    /// One fixed calibration at the adjusted level.
    DatasetConditional {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        delta: Option<f64>,
        #[arg(long)]
        target: Option<f64>,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (JSON); defaults plus flags when unset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Test scenarios (R).
    #[arg(long)]
    trials: Option<usize>,
    /// Calibration scenarios (M).
    #[arg(long)]
    calibration_size: Option<usize>,
    /// Reorders per step for the distributed planner (W).
    #[arg(long)]
    reorders: Option<usize>,
    /// JSONL file of finished trials for resuming.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenScenarios {
            params,
            reference,
            count,
        } => gen_scenarios(cli, params.as_deref(), *reference, *count),
        Command::Calibrate { scenarios, joint } => calibrate(cli, scenarios, *joint),
        Command::Plan {
            scenario,
            quantile,
            mode,
            interactive,
            fail_on_help,
            reorders,
            joint_budget,
        } => {
            let help = if *interactive {
                HelpPolicy::InteractiveUser
            } else if *fail_on_help {
                HelpPolicy::FailOnHelp
            } else {
                HelpPolicy::OracleUser
            };
            plan(cli, scenario, quantile.as_deref(), (*mode).into(), help, *reorders, *joint_budget)
        }
        Command::Coverage(exp) => {
            let cfg = experiment_config(cli, exp)?;
            let run = run_coverage_experiment(&cfg, &run_options(cli, exp))?;
            emit_experiment(cli, &cfg, &run)
        }
        Command::Compare(exp) => {
            let cfg = experiment_config(cli, exp)?;
            let run = run_comparison(&cfg, &run_options(cli, exp))?;
            emit_experiment(cli, &cfg, &run)
        }
        Command::DatasetConditional { exp, delta, target } => {
            let mut cfg = experiment_config(cli, exp)?;
            let spec = cfg.dataset_conditional.unwrap_or(DatasetConditionalSpec {
                delta: 0.1,
                target: 0.9,
            });
            cfg.dataset_conditional = Some(DatasetConditionalSpec {
                delta: delta.unwrap_or(spec.delta),
                target: target.unwrap_or(spec.target),
            });
            let run = run_dataset_conditional(&cfg, &run_options(cli, exp))?;
            emit_experiment(cli, &cfg, &run)
        }
    }
}

fn seed(cli: &Cli) -> u64 {
    cli.seed.unwrap_or(0)
}

fn scorer_spec(cli: &Cli) -> Result<ScorerSpec> {
    match &cli.scorer {
        Some(text) => ScorerSpec::parse(text, seed(cli)),
        None => Ok(ScorerSpec::noisy(4.0, 1.0, 0.15, seed(cli))),
    }
}

fn single_alpha(cli: &Cli) -> Result<f64> {
    match cli.alpha.as_slice() {
        [] => Ok(0.1),
        [a] => Ok(*a),
        _ => Err(Error::Argument("this command takes one --alpha".into())),
    }
}

fn pool(cli: &Cli) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.jobs {
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

fn stdout(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn out_dir(cli: &Cli) -> Result<Option<&Path>> {
    match &cli.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Ok(Some(dir.as_path()))
        }
        None => Ok(None),
    }
}

fn gen_scenarios(cli: &Cli, params: Option<&Path>, reference: bool, count: usize) -> Result<()> {
    let mut params = match params {
        Some(path) => DistributionParams::load(path)?,
        None if reference => DistributionParams::reference(),
        None => DistributionParams::default(),
    };
    if let Some(s) = cli.seed {
        params.seed = s;
    }
    let scenarios = pool(cli)?.install(|| {
        (0..count as u64)
            .into_par_iter()
            .map(|i| sample_indexed(&params, i))
            .collect::<Result<Vec<Scenario>>>()
    })?;
    match out_dir(cli)? {
        Some(dir) => {
            for (i, s) in scenarios.iter().enumerate() {
                s.save(&dir.join(format!("scenario_{i:04}.json")))?;
            }
            eprintln!("wrote {} scenarios to {}", scenarios.len(), dir.display());
            Ok(())
        }
        None => stdout(&to_json(&scenarios)?),
    }
}

fn load_scenarios(paths: &[PathBuf]) -> Result<Vec<Arc<Scenario>>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<_>>()?;
            entries.retain(|e| e.extension().is_some_and(|x| x == "json"));
            entries.sort();
            files.extend(entries);
        } else {
            files.push(p.clone());
        }
    }
    let mut out = Vec::new();
    for f in files {
        out.extend(Scenario::load_all(&f)?.into_iter().map(Arc::new));
    }
    if out.is_empty() {
        return Err(Error::Argument("no scenarios found".into()));
    }
    Ok(out)
}

fn calibrate(cli: &Cli, paths: &[PathBuf], joint: bool) -> Result<()> {
    let alpha = single_alpha(cli)?;
    let scenarios = load_scenarios(paths)?;
    let scorer = scorer_spec(cli)?.build()?;
    let feasibility = FeasibilityConfig::default();
    let one = |s: &Arc<Scenario>| {
        if joint {
            joint_calibration_record(s, scorer.as_ref(), &feasibility)
        } else {
            calibration_record(s, scorer.as_ref(), &feasibility)
        }
    };
    let records: Vec<CalibrationRecord> = if scorer.concurrency_safe() {
        pool(cli)?.install(|| scenarios.par_iter().map(one).collect::<Result<_>>())?
    } else {
        scenarios.iter().map(one).collect::<Result<_>>()?
    };
    let summary = QuantileSummary::from_records(&records, alpha)?;
    if let Some(w) = &summary.warning {
        eprintln!("warning: {w}");
    }
    match out_dir(cli)? {
        Some(dir) => {
            write_jsonl(&dir.join("calibration.jsonl"), &records)?;
            std::fs::write(dir.join("quantile.json"), to_json(&summary)?)?;
            eprintln!("wrote {} calibration records to {}", records.len(), dir.display());
            Ok(())
        }
        None => stdout(&to_json(&summary)?),
    }
}

/// Accepts a quantile summary or a bare quantile.
fn load_quantile(path: &Path) -> Result<Quantile> {
    let value: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let q = match value.get("quantile") {
        Some(inner) => serde_json::from_value(inner.clone())?,
        None => serde_json::from_value(value)?,
    };
    Ok(q)
}

#[derive(Serialize)]
struct PlanOutput<'a> {
    trace: &'a satlas::planner::PlanTrace,
    validation: &'a satlas::world::ValidationReport,
}

fn plan(
    cli: &Cli,
    scenario: &Path,
    quantile: Option<&Path>,
    mode: PlannerMode,
    help: HelpPolicy,
    reorders: usize,
    joint_budget: Option<u64>,
) -> Result<()> {
    let mut scenarios = Scenario::load_all(scenario)?;
    if scenarios.len() != 1 {
        return Err(Error::Argument(format!(
            "{} holds {} scenarios; plan takes one",
            scenario.display(),
            scenarios.len()
        )));
    }
    let scenario = Arc::new(scenarios.remove(0));
    let q = quantile.map(load_quantile).transpose()?;
    let alpha = q.map(|q| q.alpha).unwrap_or(single_alpha(cli)?);
    let mut cfg = PlannerConfig::new(mode, alpha);
    cfg.help = help;
    cfg.reorder_attempts = reorders;
    cfg.order_seed = cli.seed;
    if let Some(b) = joint_budget {
        cfg.joint_budget = b;
    }
    if mode != PlannerMode::ArgmaxNoHelp && q.is_none() {
        return Err(Error::Argument("--quantile is required for conformal planning".into()));
    }
    let scorer = scorer_spec(cli)?.build()?;
    let mut planner = Planner::new(Arc::clone(&scenario), scorer.as_ref(), cfg)?;
    let stdin = std::io::stdin();
    let mut input = stdin.lock();
    // Prompts go to stderr so a trace on stdout stays clean.
    let mut prompt = std::io::stderr();
    if help == HelpPolicy::InteractiveUser {
        planner = planner.with_terminal(Terminal {
            input: &mut input,
            output: &mut prompt,
        });
    }
    let trace = planner.run(q.as_ref())?;
    let validation = validate_plan(&scenario, &trace.plan);
    let text = to_json(&PlanOutput {
        trace: &trace,
        validation: &validation,
    })?;
    match &cli.out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, text)?;
        }
        None => stdout(&text)?,
    }
    if validation.complete {
        eprintln!(
            "plan complete in {} steps, {} help event(s), {} scorer calls",
            validation.steps_used,
            trace.help_events.len(),
            trace.calls.total
        );
        Ok(())
    } else {
        Err(Error::PlanningFailure(format!(
            "plan does not complete the mission: {:?}",
            validation.failure
        )))
    }
}

fn experiment_config(cli: &Cli, exp: &ExperimentArgs) -> Result<ExperimentConfig> {
    let mut cfg = match &exp.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::new(seed(cli)),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
        cfg.scorer.seed = s;
    }
    if cli.scorer.is_some() {
        cfg.scorer = scorer_spec(cli)?;
    }
    if !cli.alpha.is_empty() {
        cfg.alphas = cli.alpha.clone();
    }
    if let Some(r) = exp.trials {
        cfg.trials = r;
    }
    if let Some(m) = exp.calibration_size {
        cfg.calibration_size = m;
    }
    if let Some(w) = exp.reorders {
        for p in cfg.planners.iter_mut().filter(|p| p.mode == PlannerMode::Distributed) {
            p.reorder_attempts = w;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_options(cli: &Cli, exp: &ExperimentArgs) -> RunOptions {
    RunOptions {
        jobs: cli.jobs,
        checkpoint: exp.checkpoint.clone(),
    }
}

fn emit_experiment(cli: &Cli, cfg: &ExperimentConfig, run: &ExperimentRun) -> Result<()> {
    for m in &run.report.metrics {
        if m.full_set_trials > 0 {
            eprintln!(
                "warning: alpha = {} gave the FULL-SET quantile in {} of {} trials; \
                 at least M = {} calibration sequences are needed",
                m.alpha,
                m.full_set_trials,
                m.trials,
                min_calibration_size(m.alpha)
            );
        }
    }
    let metrics_text = match cli.format {
        Format::Json => to_json(&run.report.metrics)?,
        Format::Csv => {
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &run.report.metrics)?;
            String::from_utf8(buf).map_err(|e| Error::Internal(e.to_string()))?
        }
    };
    let dir = cli.out.as_ref().or(cfg.output.as_ref());
    match dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let name = match cli.format {
                Format::Json => "metrics.json",
                Format::Csv => "metrics.csv",
            };
            std::fs::write(dir.join(name), &metrics_text)?;
            run.report.save_json(&dir.join("detail.json"))?;
            std::fs::write(dir.join("config.json"), to_json(cfg)?)?;
            std::fs::write(dir.join("timing.json"), to_json(&run.timing)?)?;
            if !run.report.comparison.is_empty() {
                std::fs::write(dir.join("comparison.json"), to_json(&run.report.comparison)?)?;
            }
            if let Some(dc) = &run.report.dataset_conditional {
                std::fs::write(dir.join("dataset_conditional.json"), to_json(dc)?)?;
            }
            eprintln!("wrote results to {}", dir.display());
        }
        None => {
            stdout(&metrics_text)?;
            eprintln!("{}", serde_json::to_string(&run.timing)?);
        }
    }
    Ok(())
}

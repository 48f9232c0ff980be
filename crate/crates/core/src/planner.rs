//! The planning loop: robots pick decisions one after another, and a robot
//! whose local prediction set is not a singleton either triggers a new robot
//! order for the step or asks a user.

use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::conformal::{local_prediction_set, CalibrationRecord, PredictionSet, Quantile, RECORD_VERSION};
use crate::context::{plan_from_history, Context, Cursor, HistoryEntry, OrderSchedule, OrderedSet};
use crate::error::{Error, Result};
use crate::scenario::{
    selector_f, DecisionSpace, FeasibilityConfig, FeasibilitySearch, FeasibleSet, LabelStep,
    Scenario,
};
use crate::scorer::{CallCounter, ScoreVector, Scorer};
use crate::world::{validate_plan, Decision, Plan, RobotId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlannerMode {
    Distributed,
    /// The team is one agent choosing among all |S|^N joint decisions.
    Centralized,
    /// Per-iteration argmax, never asks for help.
    ArgmaxNoHelp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HelpPolicy {
    /// Simulated user: highest-scoring feasible decision of the presented set.
    OracleUser,
    /// Numbered prompt on a terminal.
    InteractiveUser,
    /// Any user request ends planning with a failure.
    FailOnHelp,
}

fn default_joint_budget() -> u64 {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub mode: PlannerMode,
    pub alpha: f64,
    /// Reorders allowed per step before the user is asked (W).
    pub reorder_attempts: usize,
    pub help: HelpPolicy,
    /// Seed of the per-step order schedule; the scenario's own seed if unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order_seed: Option<u64>,
    #[serde(default)]
    pub feasibility: FeasibilityConfig,
    /// Largest joint decision space the centralized planner will enumerate.
    #[serde(default = "default_joint_budget")]
    pub joint_budget: u64,
}

impl PlannerConfig {
    pub fn new(mode: PlannerMode, alpha: f64) -> Self {
        PlannerConfig {
            mode,
            alpha,
            reorder_attempts: 0,
            help: HelpPolicy::OracleUser,
            order_seed: None,
            feasibility: FeasibilityConfig::default(),
            joint_budget: default_joint_budget(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.joint_budget == 0 {
            return Err(Error::Config("joint_budget must be positive".into()));
        }
        Ok(())
    }

    pub fn schedule(&self, scenario: &Scenario) -> OrderSchedule {
        match self.order_seed {
            Some(seed) => OrderSchedule::new(scenario.num_robots, seed),
            None => OrderSchedule::for_scenario(scenario),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionSource {
    /// Unique member of a singleton set.
    Singleton,
    Argmax,
    User,
    /// Set was not a singleton and the step was restarted under a new order.
    Reorder,
}

/// One scoring round: a robot (or the whole team) and the set it produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    /// `None` when the whole team was scored jointly.
    pub robot: Option<RobotId>,
    /// Iteration index k of the committed sequence; `None` for joint rounds.
    pub k: Option<usize>,
    pub order: OrderedSet,
    pub set_size: usize,
    pub full_set: bool,
    /// Set members (decision or joint indices); omitted under the sentinel.
    pub members: Vec<usize>,
    /// Empty for abandoned iterations.
    pub chosen: Vec<Decision>,
    pub source: DecisionSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HelpKind {
    Reorder,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelpEvent {
    pub kind: HelpKind,
    pub t: usize,
    pub robot: Option<RobotId>,
    /// Position of the triggering round in [`PlanTrace::iterations`].
    pub iteration: usize,
    /// Presented members; empty when the full decision set was presented.
    pub presented: Vec<usize>,
    pub full_set: bool,
    pub resolution: Vec<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_order: Option<OrderedSet>,
    /// The resolution lies outside the local prediction set.
    #[serde(default)]
    pub coverage_miss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    pub scenario_id: u64,
    pub mode: PlannerMode,
    pub plan: Plan,
    pub iterations: Vec<IterationRecord>,
    pub help_events: Vec<HelpEvent>,
    pub calls: CallCounter,
}

impl PlanTrace {
    pub fn user_events(&self) -> impl Iterator<Item = &HelpEvent> {
        self.help_events.iter().filter(|e| e.kind == HelpKind::User)
    }

    pub fn reorders(&self) -> usize {
        self.help_events
            .iter()
            .filter(|e| e.kind == HelpKind::Reorder)
            .count()
    }

    /// Committed robot decisions (N·H once planning finished).
    pub fn decisions(&self) -> usize {
        self.iterations.iter().map(|r| r.chosen.len()).sum()
    }

    pub fn user_decisions(&self) -> usize {
        self.iterations
            .iter()
            .filter(|r| r.source == DecisionSource::User)
            .map(|r| r.chosen.len())
            .sum()
    }

    pub fn singleton_rounds(&self) -> usize {
        self.iterations.iter().filter(|r| r.set_size == 1).count()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Outcome of an oracle-user resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserChoice {
    pub index: usize,
    pub coverage_miss: bool,
}

/// Highest-scoring member of `pred ∩ feasible`; when the intersection is
/// empty, the highest-scoring feasible decision with the miss flag set.
/// Ties go to the lower index. `None` when nothing is feasible.
pub fn resolve_user_help(
    pred: &PredictionSet<f64>,
    feasible: &[usize],
    scores: &[f64],
) -> Option<UserChoice> {
    let best = |pool: &mut dyn Iterator<Item = usize>| {
        pool.fold(None::<usize>, |b, i| match b {
            Some(b) if scores[b] > scores[i] || (scores[b] == scores[i] && b < i) => Some(b),
            _ => Some(i),
        })
    };
    let presented = |i: &usize| pred.is_full_set() || pred.contains(*i);
    if let Some(index) = best(&mut feasible.iter().copied().filter(presented)) {
        return Some(UserChoice {
            index,
            coverage_miss: false,
        });
    }
    best(&mut feasible.iter().copied()).map(|index| UserChoice {
        index,
        coverage_miss: true,
    })
}

/// Oracle-user answer once the plan can no longer succeed: the best presented
/// decision, flagged as a miss.
fn doomed_choice(set: &PredictionSet<f64>, scores: &[f64]) -> UserChoice {
    let all: Vec<usize> = (0..scores.len()).collect();
    let pool = if set.is_full_set() || set.is_empty() { &all } else { &set.members };
    let index = pool
        .iter()
        .copied()
        .fold(None::<usize>, |b, i| match b {
            Some(b) if scores[b] >= scores[i] => Some(b),
            _ => Some(i),
        })
        .expect("nonempty decision space");
    UserChoice {
        index,
        coverage_miss: true,
    }
}

/// Terminal used by the interactive help policy.
pub struct Terminal<'t> {
    pub input: &'t mut dyn BufRead,
    pub output: &'t mut dyn Write,
}

const PROMPT_RETRIES: usize = 3;

impl Terminal<'_> {
    /// Shows a numbered menu and returns the position of the selected line.
    /// Invalid answers are re-prompted three times before the run aborts.
    pub fn choose(&mut self, title: &str, options: &[(String, f64)]) -> Result<usize> {
        writeln!(self.output, "{title}")?;
        for (i, (name, score)) in options.iter().enumerate() {
            writeln!(self.output, "  [{}] {name}  (score {score:.4})", i + 1)?;
        }
        for attempt in 0..=PROMPT_RETRIES {
            write!(self.output, "Select 1-{}: ", options.len())?;
            self.output.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 {
                return Err(Error::Aborted("input closed while waiting for a selection".into()));
            }
            match line.trim().parse::<usize>() {
                Ok(n) if (1..=options.len()).contains(&n) => return Ok(n - 1),
                _ if attempt < PROMPT_RETRIES => {
                    writeln!(self.output, "Invalid selection {:?}.", line.trim())?;
                }
                _ => {}
            }
        }
        Err(Error::Aborted(format!(
            "no valid selection after {} attempts",
            PROMPT_RETRIES + 1
        )))
    }
}

/// Builds the feasibility search on first use.
struct LazySearch<'s> {
    scenario: &'s Scenario,
    config: FeasibilityConfig,
    inner: Option<FeasibilitySearch<'s>>,
}

impl<'s> LazySearch<'s> {
    fn new(scenario: &'s Scenario, config: FeasibilityConfig) -> Self {
        LazySearch {
            scenario,
            config,
            inner: None,
        }
    }

    fn feasible(&mut self, history: &[HistoryEntry], robot: RobotId, t: usize) -> Result<FeasibleSet> {
        if self.inner.is_none() {
            self.inner = Some(FeasibilitySearch::new(self.scenario, self.config.clone())?);
        }
        self.inner
            .as_mut()
            .expect("initialized above")
            .feasible_next_or_fallback(history, robot, t)
    }
}

/// Index of a joint decision, robot 0 most significant.
fn encode(indices: &[usize], base: usize) -> usize {
    indices.iter().fold(0, |acc, i| acc * base + i)
}

fn decode(mut joint: usize, base: usize, n: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for slot in out.iter_mut().rev() {
        *slot = joint % base;
        joint /= base;
    }
    out
}

/// Context at the start of step `t` (identity order) with the cursor moved to
/// `robot`; what the centralized planner scores each robot on.
fn step_start_context(base: &Context, t: usize, robot: RobotId) -> Context {
    let mut ctx = base.clone();
    ctx.cursor = Some(Cursor {
        t,
        position: robot,
        robot,
    });
    ctx
}

/// Per-robot scores at step start. Logical calls are not recorded.
fn team_scores(scorer: &dyn Scorer, base: &Context, t: usize) -> Result<Vec<ScoreVector>> {
    let scenario = base.scenario();
    let space = scenario.decision_space();
    let mut scratch = CallCounter::default();
    (0..scenario.num_robots)
        .map(|r| scorer.score_all(&step_start_context(base, t, r), &space, &mut scratch))
        .collect()
}

fn joint_scores(per_robot: &[ScoreVector], base: usize, budget: u64) -> Result<Vec<f64>> {
    let size = (base as u64)
        .checked_pow(per_robot.len() as u32)
        .filter(|s| *s <= budget)
        .ok_or_else(|| {
            Error::Budget(format!(
                "joint decision space {base}^{} exceeds the budget of {budget}",
                per_robot.len()
            ))
        })?;
    Ok((0..size as usize)
        .map(|j| {
            decode(j, base, per_robot.len())
                .iter()
                .zip(per_robot)
                .map(|(i, s)| s.values[*i])
                .product()
        })
        .collect())
}

/// Members shown to a user; an empty set is presented as the full set.
fn presented_options(set: &PredictionSet<f64>, total: usize) -> Vec<usize> {
    if set.is_full_set() || set.is_empty() {
        (0..total).collect()
    } else {
        set.members.clone()
    }
}

pub struct Planner<'a, 't> {
    scenario: Arc<Scenario>,
    scorer: &'a dyn Scorer,
    config: PlannerConfig,
    terminal: Option<Terminal<'t>>,
}

impl<'a, 't> Planner<'a, 't> {
    pub fn new(scenario: Arc<Scenario>, scorer: &'a dyn Scorer, config: PlannerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Planner {
            scenario,
            scorer,
            config,
            terminal: None,
        })
    }

    pub fn with_terminal(mut self, terminal: Terminal<'t>) -> Self {
        self.terminal = Some(terminal);
        self
    }

    /// Runs the configured mode. `q` is unused by the argmax ablation.
    pub fn run(&mut self, q: Option<&Quantile<f64>>) -> Result<PlanTrace> {
        let need = || Error::Argument("this planner mode needs a quantile".into());
        match self.config.mode {
            PlannerMode::Distributed => self.distributed(q.ok_or_else(need)?),
            PlannerMode::Centralized => self.centralized(q.ok_or_else(need)?),
            PlannerMode::ArgmaxNoHelp => self.argmax(),
        }
    }

    fn finish(&self, mode: PlannerMode, ctx: &Context, iterations: Vec<IterationRecord>, help_events: Vec<HelpEvent>, calls: CallCounter) -> PlanTrace {
        let sc = &self.scenario;
        PlanTrace {
            scenario_id: sc.id,
            mode,
            plan: plan_from_history(&ctx.history, sc.num_robots, sc.horizon),
            iterations,
            help_events,
            calls,
        }
    }


    /// Asks the interactive terminal to pick among `options`.
    fn ask(&mut self, title: String, options: &[usize], scores: &[f64], name: impl Fn(usize) -> String) -> Result<usize> {
        let terminal = self
            .terminal
            .as_mut()
            .ok_or_else(|| Error::Config("interactive help needs a terminal".into()))?;
        let menu: Vec<(String, f64)> = options.iter().map(|i| (name(*i), scores[*i])).collect();
        Ok(options[terminal.choose(&title, &menu)?])
    }

    pub fn distributed(&mut self, q: &Quantile<f64>) -> Result<PlanTrace> {
        let scenario = Arc::clone(&self.scenario);
        let space = scenario.decision_space();
        let schedule = self.config.schedule(&scenario);
        let mut search = LazySearch::new(&scenario, self.config.feasibility.clone());
        let mut ctx = Context::initial(Arc::clone(&scenario), &schedule);
        let mut calls = CallCounter::default();
        let mut iterations = Vec::new();
        let mut events = Vec::new();
        for t in 1..=scenario.horizon {
            let mut w = 0;
            let mut candidates = schedule.reorder_candidates(t).into_iter();
            'step: loop {
                while let Some(c) = ctx.cursor.filter(|c| c.t == t) {
                    let scores = self.scorer.score_all(&ctx, &space, &mut calls)?;
                    let set = local_prediction_set(&scores.values, q);
                    let mut record = IterationRecord {
                        t,
                        robot: Some(c.robot),
                        k: ctx.k(),
                        order: ctx.order.clone(),
                        set_size: set.len(),
                        full_set: set.is_full_set(),
                        members: if set.is_full_set() { Vec::new() } else { set.members.clone() },
                        chosen: Vec::new(),
                        source: DecisionSource::Singleton,
                    };
                    if set.is_singleton() {
                        let d = space.get(set.members[0]);
                        record.chosen.push(d);
                        iterations.push(record);
                        ctx = ctx.advance(d, &schedule);
                        continue;
                    }
                    w += 1;
                    if w <= self.config.reorder_attempts {
                        if let Some(order) = candidates.next() {
                            record.source = DecisionSource::Reorder;
                            events.push(HelpEvent {
                                kind: HelpKind::Reorder,
                                t,
                                robot: Some(c.robot),
                                iteration: iterations.len(),
                                presented: record.members.clone(),
                                full_set: set.is_full_set() || set.is_empty(),
                                resolution: Vec::new(),
                                new_order: Some(order.clone()),
                                coverage_miss: false,
                            });
                            iterations.push(record);
                            ctx = ctx.reset_step(t, order);
                            continue 'step;
                        }
                    }
                    let choice = match self.config.help {
                        HelpPolicy::FailOnHelp => {
                            return Err(Error::PlanningFailure(format!(
                                "robot {} needs help at step {t} (set size {})",
                                c.robot,
                                set.len()
                            )))
                        }
                        HelpPolicy::OracleUser => {
                            let feasible = search.feasible(&ctx.history, c.robot, t)?;
                            resolve_user_help(&set, &feasible.indices, &scores.values)
                                .unwrap_or_else(|| doomed_choice(&set, &scores.values))
                        }
                        HelpPolicy::InteractiveUser => {
                            let env = &scenario.env;
                            let name = |i: usize| env.describe(&space.get(i));
                            let options = presented_options(&set, space.len());
                            let title = format!(
                                "Robot {} is unsure at step {t}; {} candidate decisions:",
                                c.robot,
                                options.len()
                            );
                            let index = self.ask(title, &options, &scores.values, name)?;
                            UserChoice {
                                index,
                                coverage_miss: !set.contains(index) && !set.is_full_set(),
                            }
                        }
                    };
                    let d = space.get(choice.index);
                    record.source = DecisionSource::User;
                    record.chosen.push(d);
                    events.push(HelpEvent {
                        kind: HelpKind::User,
                        t,
                        robot: Some(c.robot),
                        iteration: iterations.len(),
                        presented: record.members.clone(),
                        full_set: set.is_full_set() || set.is_empty(),
                        resolution: vec![d],
                        new_order: None,
                        coverage_miss: choice.coverage_miss,
                    });
                    iterations.push(record);
                    ctx = ctx.advance(d, &schedule);
                }
                break;
            }
        }
        Ok(self.finish(PlannerMode::Distributed, &ctx, iterations, events, calls))
    }

    pub fn argmax(&mut self) -> Result<PlanTrace> {
        let scenario = Arc::clone(&self.scenario);
        let space = scenario.decision_space();
        let schedule = self.config.schedule(&scenario);
        let mut ctx = Context::initial(Arc::clone(&scenario), &schedule);
        let mut calls = CallCounter::default();
        let mut iterations = Vec::new();
        while let Some(c) = ctx.cursor {
            let scores = self.scorer.score_all(&ctx, &space, &mut calls)?;
            let index = scores.argmax().ok_or_else(|| Error::Internal("empty decision space".into()))?;
            let d = space.get(index);
            iterations.push(IterationRecord {
                t: c.t,
                robot: Some(c.robot),
                k: ctx.k(),
                order: ctx.order.clone(),
                set_size: 1,
                full_set: false,
                members: vec![index],
                chosen: vec![d],
                source: DecisionSource::Argmax,
            });
            ctx = ctx.advance(d, &schedule);
        }
        Ok(self.finish(PlannerMode::ArgmaxNoHelp, &ctx, iterations, Vec::new(), calls))
    }

    /// Team-as-one-agent baseline. Every step scores all |S|^N joint
    /// decisions; the joint score is the product of each robot's normalized
    /// score on the step-start context.
    pub fn centralized(&mut self, q: &Quantile<f64>) -> Result<PlanTrace> {
        let scenario = Arc::clone(&self.scenario);
        let space = scenario.decision_space();
        let n = scenario.num_robots;
        let identity = OrderSchedule::identity(n);
        let mut search = LazySearch::new(&scenario, self.config.feasibility.clone());
        let mut ctx = Context::initial(Arc::clone(&scenario), &identity);
        let mut calls = CallCounter::default();
        let mut iterations = Vec::new();
        let mut events = Vec::new();
        for t in 1..=scenario.horizon {
            let per_robot = team_scores(self.scorer, &ctx, t)?;
            let joint = joint_scores(&per_robot, space.len(), self.config.joint_budget)?;
            calls.record(t, joint.len() as u64);
            let set = local_prediction_set(&joint, q);
            let mut record = IterationRecord {
                t,
                robot: None,
                k: None,
                order: ctx.order.clone(),
                set_size: set.len(),
                full_set: set.is_full_set(),
                members: if set.is_full_set() { Vec::new() } else { set.members.clone() },
                chosen: Vec::new(),
                source: DecisionSource::Singleton,
            };
            let (chosen, miss) = if set.is_singleton() {
                (decode(set.members[0], space.len(), n), false)
            } else {
                record.source = DecisionSource::User;
                match self.config.help {
                    HelpPolicy::FailOnHelp => {
                        return Err(Error::PlanningFailure(format!(
                            "the team needs help at step {t} (joint set size {})",
                            set.len()
                        )))
                    }
                    HelpPolicy::OracleUser => {
                        let c = sequential_team_choice(&mut search, &space, &ctx.history, t, &per_robot, Some(&set))?;
                        (c.chosen, c.miss)
                    }
                    HelpPolicy::InteractiveUser => {
                        let env = &scenario.env;
                        let name = |j: usize| {
                            decode(j, space.len(), n)
                                .iter()
                                .enumerate()
                                .map(|(r, i)| format!("robot {r}: {}", env.describe(&space.get(*i))))
                                .collect::<Vec<_>>()
                                .join("; ")
                        };
                        let options = presented_options(&set, joint.len());
                        let title = format!(
                            "The team is unsure at step {t}; {} candidate joint decisions:",
                            options.len()
                        );
                        let j = self.ask(title, &options, &joint, name)?;
                        (decode(j, space.len(), n), !set.contains(j) && !set.is_full_set())
                    }
                }
            };
            let decisions: Vec<Decision> = chosen.iter().map(|i| space.get(*i)).collect();
            record.chosen = decisions.clone();
            if record.source == DecisionSource::User {
                events.push(HelpEvent {
                    kind: HelpKind::User,
                    t,
                    robot: None,
                    iteration: iterations.len(),
                    presented: record.members.clone(),
                    full_set: set.is_full_set() || set.is_empty(),
                    resolution: decisions.clone(),
                    new_order: None,
                    coverage_miss: miss,
                });
            }
            iterations.push(record);
            for d in decisions {
                ctx = ctx.advance(d, &identity);
            }
        }
        Ok(self.finish(PlannerMode::Centralized, &ctx, iterations, events, calls))
    }
}

struct TeamChoice {
    chosen: Vec<usize>,
    feasible: Vec<FeasibleSet>,
    miss: bool,
}

/// Robot by robot in index order, the highest-scoring feasible decision that
/// keeps the joint choice inside `presented`; once no presented joint
/// decision extends the prefix, plain feasibility decides and the miss flag is
/// raised. With `presented = None` this is the joint labeling rule.
fn sequential_team_choice(
    search: &mut LazySearch<'_>,
    space: &DecisionSpace,
    history: &[HistoryEntry],
    t: usize,
    per_robot: &[ScoreVector],
    presented: Option<&PredictionSet<f64>>,
) -> Result<TeamChoice> {
    let n = per_robot.len();
    let base = space.len();
    let mut hist = history.to_vec();
    let mut out = TeamChoice {
        chosen: Vec::with_capacity(n),
        feasible: Vec::with_capacity(n),
        miss: false,
    };
    for (r, scores) in per_robot.iter().enumerate() {
        let feasible = search.feasible(&hist, r, t)?;
        let block = base.pow((n - r - 1) as u32);
        let extends = |d: usize| -> bool {
            match presented {
                Some(set) if !set.is_full_set() => {
                    let mut prefix = out.chosen.clone();
                    prefix.push(d);
                    let lo = encode(&prefix, base) * block;
                    let start = set.members.partition_point(|m| *m < lo);
                    set.members.get(start).is_some_and(|m| *m < lo + block)
                }
                _ => true,
            }
        };
        let allowed = FeasibleSet {
            indices: feasible.indices.iter().copied().filter(|d| extends(*d)).collect(),
            mode: feasible.mode,
        };
        let pick = if allowed.indices.is_empty() {
            out.miss = true;
            if feasible.indices.is_empty() {
                let all = FeasibleSet {
                    indices: (0..base).collect(),
                    mode: feasible.mode,
                };
                selector_f(scores, &all, r, t)?
            } else {
                selector_f(scores, &feasible, r, t)?
            }
        } else {
            selector_f(scores, &allowed, r, t)?
        };
        hist.push(HistoryEntry {
            t,
            robot: r,
            decision: space.get(pick),
        });
        out.chosen.push(pick);
        out.feasible.push(feasible);
    }
    Ok(out)
}

/// Calibration record for the centralized planner: labels follow the
/// sequential team rule on step-start scores and each step contributes the
/// product of its robots' label scores.
pub fn joint_calibration_record(
    scenario: &Arc<Scenario>,
    scorer: &dyn Scorer,
    feasibility: &FeasibilityConfig,
) -> Result<CalibrationRecord> {
    let n = scenario.num_robots;
    let space = scenario.decision_space();
    let identity = OrderSchedule::identity(n);
    let mut search = LazySearch::new(scenario, feasibility.clone());
    let mut ctx = Context::initial(Arc::clone(scenario), &identity);
    let mut labels = Vec::with_capacity(n * scenario.horizon);
    let mut scores = Vec::with_capacity(scenario.horizon);
    for t in 1..=scenario.horizon {
        let per_robot = team_scores(scorer, &ctx, t)?;
        let choice = sequential_team_choice(&mut search, &space, &ctx.history, t, &per_robot, None)?;
        let mut product = 1.0;
        for (r, (index, feasible)) in choice.chosen.iter().zip(&choice.feasible).enumerate() {
            let score = per_robot[r].values[*index];
            product *= score;
            labels.push(LabelStep {
                k: ctx.k().expect("cursor inside the horizon"),
                t,
                position: r,
                robot: r,
                decision: space.get(*index),
                index: *index,
                score,
                feasible: feasible.indices.len(),
                mode: feasible.mode,
            });
            ctx = ctx.advance(space.get(*index), &identity);
        }
        scores.push(product);
    }
    let plan = plan_from_history(&ctx.history, n, scenario.horizon);
    if !validate_plan(scenario, &plan).complete {
        return Err(Error::Internal(format!(
            "joint label for scenario {:016x} fails validation",
            scenario.id
        )));
    }
    Ok(CalibrationRecord {
        version: RECORD_VERSION,
        scenario_id: scenario.id,
        num_robots: n,
        horizon: scenario.horizon,
        joint: true,
        orders: vec![OrderedSet::identity(n); scenario.horizon],
        labels,
        scores,
    })
}

fn with_stdio<T>(interactive: bool, f: impl FnOnce(Option<Terminal<'_>>) -> Result<T>) -> Result<T> {
    if interactive {
        let stdin = std::io::stdin();
        let mut input = stdin.lock();
        let mut output = std::io::stdout();
        f(Some(Terminal {
            input: &mut input,
            output: &mut output,
        }))
    } else {
        f(None)
    }
}

fn plan_with(
    scenario: &Arc<Scenario>,
    scorer: &dyn Scorer,
    q: Option<&Quantile<f64>>,
    cfg: &PlannerConfig,
    mode: PlannerMode,
) -> Result<PlanTrace> {
    let cfg = PlannerConfig { mode, ..cfg.clone() };
    with_stdio(cfg.help == HelpPolicy::InteractiveUser, |terminal| {
        let mut planner = Planner::new(Arc::clone(scenario), scorer, cfg)?;
        if let Some(t) = terminal {
            planner = planner.with_terminal(t);
        }
        planner.run(q)
    })
}

/// Distributed planning; the interactive policy talks to stdin/stdout.
pub fn plan_distributed(
    scenario: &Arc<Scenario>,
    scorer: &dyn Scorer,
    q: &Quantile<f64>,
    cfg: &PlannerConfig,
) -> Result<PlanTrace> {
    plan_with(scenario, scorer, Some(q), cfg, PlannerMode::Distributed)
}

pub fn plan_centralized(
    scenario: &Arc<Scenario>,
    scorer: &dyn Scorer,
    q_joint: &Quantile<f64>,
    cfg: &PlannerConfig,
) -> Result<PlanTrace> {
    plan_with(scenario, scorer, Some(q_joint), cfg, PlannerMode::Centralized)
}

pub fn plan_argmax(scenario: &Arc<Scenario>, scorer: &dyn Scorer, cfg: &PlannerConfig) -> Result<PlanTrace> {
    plan_with(scenario, scorer, None, cfg, PlannerMode::ArgmaxNoHelp)
}

#[cfg(test)]
mod tests {
    use std::io::Cursor as Input;

    use super::*;
    use crate::conformal::conformal_quantile;
    use crate::context::order_family;
    use crate::scenario::tests::fixture;
    use crate::scenario::{oracle_plan, reference_decision, sample_indexed, DistributionParams, IntRange};
    use crate::scorer::{FnScorer, OracleIndicator};

    fn q(value: f64) -> Quantile<f64> {
        conformal_quantile(&[value], 0.5).unwrap()
    }

    fn oracle_cfg(mode: PlannerMode) -> PlannerConfig {
        PlannerConfig::new(mode, 0.1)
    }

    fn run(sc: &Scenario, scorer: &dyn Scorer, q: Option<&Quantile<f64>>, cfg: PlannerConfig) -> Result<PlanTrace> {
        Planner::new(Arc::new(sc.clone()), scorer, cfg)?.run(q)
    }

    /// Every committed decision is explained by its round.
    fn assert_plumbing(trace: &PlanTrace) {
        for r in &trace.iterations {
            match r.source {
                DecisionSource::Singleton => {
                    assert_eq!(r.set_size, 1);
                    assert_eq!(r.chosen.len(), trace.plan.steps[0].0.len().min(r.chosen.len()));
                }
                DecisionSource::Reorder => assert!(r.chosen.is_empty()),
                DecisionSource::User => assert_ne!(r.set_size, 1),
                DecisionSource::Argmax => assert_eq!(r.chosen.len(), 1),
            }
        }
    }

    #[test]
    fn indicator_with_room_above_the_tie_reproduces_the_oracle() {
        // |S| = 9: the reference scores 0.2536 and every other decision 0.0933.
        let sc = fixture(2, 12);
        let trace = run(&sc, &OracleIndicator, Some(&q(0.8)), oracle_cfg(PlannerMode::Distributed)).unwrap();
        assert_eq!(trace.plan, oracle_plan(&sc).unwrap());
        assert!(trace.help_events.is_empty());
        assert_eq!(trace.calls.total, (2 * 9 * 12) as u64);
        assert_plumbing(&trace);
    }

    #[test]
    fn indicator_with_its_own_calibration_still_reaches_the_oracle_plan() {
        // q̄ equals this scenario's own nonconformity, so the reference score
        // sits on the threshold; strict membership may drop it, in which case
        // the oracle user restores it.
        let sc = Arc::new(fixture(1, 10));
        let record = crate::conformal::calibration_record(&sc, &OracleIndicator, &FeasibilityConfig::default()).unwrap();
        let q = conformal_quantile(&[record.ncs().unwrap()], 0.5).unwrap();
        let trace = run(&sc, &OracleIndicator, Some(&q), oracle_cfg(PlannerMode::Distributed)).unwrap();
        assert_eq!(trace.plan, oracle_plan(&sc).unwrap());
        assert!(trace.iterations.iter().all(|r| r.set_size <= 1));
        assert_eq!(trace.singleton_rounds() + trace.user_events().count(), 10);
    }

    #[test]
    fn non_executable_singleton_fails_validation_without_crashing() {
        let sc = fixture(1, 10);
        let scorer = FnScorer(|ctx: &Context, space: &DecisionSpace| {
            let mut raw = ambiguous_at(usize::MAX)(ctx, space);
            if ctx.k() == Some(1) {
                raw.iter_mut().for_each(|r| *r = 0.0);
                raw[space.index_of(&Decision::PutDown(crate::world::LocationId(0))).unwrap()] = 9.0;
            }
            raw
        });
        let trace = run(&sc, &scorer, Some(&q(0.8)), oracle_cfg(PlannerMode::Distributed)).unwrap();
        assert_eq!(trace.plan.steps[0].0[0], Decision::PutDown(crate::world::LocationId(0)));
        assert!(!validate_plan(&sc, &trace.plan).complete);
    }

    fn ambiguous_at(k_star: usize) -> impl Fn(&Context, &DecisionSpace) -> Vec<f64> + Send + Sync {
        move |ctx, space| {
            let truth = space.index_of(&reference_decision(ctx).unwrap()).unwrap();
            let mut raw = vec![0.0; space.len()];
            if ctx.k() == Some(k_star) {
                raw[truth] = 3.0;
                raw[(truth + 1) % space.len()] = 3.2;
            } else {
                raw[truth] = 5.0;
            }
            raw
        }
    }

    #[test]
    fn one_ambiguous_iteration_asks_once() {
        let sc = fixture(1, 10);
        let scorer = FnScorer(ambiguous_at(3));
        let trace = run(&sc, &scorer, Some(&q(0.8)), oracle_cfg(PlannerMode::Distributed)).unwrap();
        let events: Vec<&HelpEvent> = trace.user_events().collect();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].t, 3);
        assert_eq!(events[0].presented.len(), 2);
        // The distractor scores higher but leads nowhere; the user picks the
        // best feasible member, which is the oracle's move.
        assert_eq!(trace.plan, oracle_plan(&sc).unwrap());
        assert!(validate_plan(&sc, &trace.plan).complete);
        assert_plumbing(&trace);
    }

    #[test]
    fn fail_on_help_turns_the_request_into_a_failure() {
        let sc = fixture(1, 10);
        let scorer = FnScorer(ambiguous_at(3));
        let cfg = PlannerConfig {
            help: HelpPolicy::FailOnHelp,
            ..oracle_cfg(PlannerMode::Distributed)
        };
        let err = run(&sc, &scorer, Some(&q(0.8)), cfg).unwrap_err();
        assert!(matches!(err, Error::PlanningFailure(_)));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn empty_mission_plans_idle_everywhere() {
        let mut sc = fixture(2, 3);
        sc.mission.sub_tasks.clear();
        let trace = run(&sc, &OracleIndicator, Some(&q(0.8)), oracle_cfg(PlannerMode::Distributed)).unwrap();
        assert_eq!(trace.plan, Plan::all_idle(2, 3));
        assert_eq!(trace.iterations.len(), 6);
    }

    #[test]
    fn reorder_restarts_the_step_under_a_new_order() {
        let sc = fixture(2, 12);
        let cfg = PlannerConfig {
            reorder_attempts: 1,
            ..oracle_cfg(PlannerMode::Distributed)
        };
        let first = cfg.schedule(&sc).order_at(1).clone();
        let base = ambiguous_at(usize::MAX);
        let scorer = FnScorer(move |ctx: &Context, space: &DecisionSpace| {
            let mut raw = base(ctx, space);
            let c = ctx.cursor.unwrap();
            if c.t == 1 && c.position == 1 && ctx.order == first {
                raw.iter_mut().for_each(|r| *r = 0.0);
            }
            raw
        });
        let trace = run(&sc, &scorer, Some(&q(0.8)), cfg.clone()).unwrap();
        assert_eq!(trace.reorders(), 1);
        assert_eq!(trace.user_events().count(), 0);
        // Two rounds of step 1 were abandoned work: N·|S|·H plus 2·|S|.
        assert_eq!(trace.calls.total, (2 * 9 * 12 + 2 * 9) as u64);
        assert_eq!(trace.calls.per_step[&1], (4 * 9) as u64);
        let family = order_family(2);
        assert!(trace.iterations.iter().all(|r| family.contains(&r.order)));
        assert!(validate_plan(&sc, &trace.plan).complete);
        assert_plumbing(&trace);
    }

    #[test]
    fn exhausted_order_family_falls_through_to_the_user() {
        let sc = fixture(2, 12);
        let cfg = PlannerConfig {
            reorder_attempts: 5,
            ..oracle_cfg(PlannerMode::Distributed)
        };
        let scorer = FnScorer(|ctx: &Context, space: &DecisionSpace| {
            let c = ctx.cursor.unwrap();
            let truth = space.index_of(&reference_decision(ctx).unwrap()).unwrap();
            let mut raw = vec![0.0; space.len()];
            raw[truth] = if c.t == 1 && c.position == 0 { 0.0 } else { 5.0 };
            raw
        });
        let trace = run(&sc, &scorer, Some(&q(0.8)), cfg).unwrap();
        // Two robots give a family of one alternative order.
        assert_eq!(trace.reorders(), 1);
        assert_eq!(trace.user_events().count(), 1);
        let first_user = trace.user_events().next().unwrap();
        let reorder_at = trace.help_events.iter().position(|e| e.kind == HelpKind::Reorder).unwrap();
        assert!(trace.help_events.iter().position(|e| e == first_user).unwrap() > reorder_at);
        assert!(trace.iterations.len() <= 2 * 12 * (5 + 1));
    }

    #[test]
    fn argmax_follows_the_top_score_without_help() {
        let sc = fixture(2, 12);
        let trace = run(&sc, &OracleIndicator, None, oracle_cfg(PlannerMode::ArgmaxNoHelp)).unwrap();
        assert_eq!(trace.plan, oracle_plan(&sc).unwrap());
        assert!(trace.help_events.is_empty());
        let again = run(&sc, &OracleIndicator, None, oracle_cfg(PlannerMode::ArgmaxNoHelp)).unwrap();
        assert_eq!(trace, again);
    }

    #[test]
    fn argmax_on_a_wrong_move_fails_validation() {
        let loose = fixture(1, 30);
        let len = oracle_plan(&loose)
            .unwrap()
            .steps
            .iter()
            .rposition(|j| j.0[0] != Decision::Idle)
            .unwrap()
            + 1;
        let sc = fixture(1, len);
        let scorer = FnScorer(|ctx: &Context, space: &DecisionSpace| {
            let mut raw = ambiguous_at(usize::MAX)(ctx, space);
            if ctx.k() == Some(1) {
                raw[space.index_of(&Decision::Idle).unwrap()] = 9.0;
            }
            raw
        });
        let trace = run(&sc, &scorer, None, oracle_cfg(PlannerMode::ArgmaxNoHelp)).unwrap();
        assert!(!validate_plan(&sc, &trace.plan).complete);
        // The conformal planner notices the wide set and recovers.
        let cp = run(&sc, &scorer, Some(&q(0.99)), oracle_cfg(PlannerMode::Distributed)).unwrap();
        assert_eq!(cp.user_events().count(), 1);
        assert!(validate_plan(&sc, &cp.plan).complete);
    }

    #[test]
    fn centralized_counts_joint_decisions() {
        let mut sc = fixture(2, 3);
        sc.mission.sub_tasks.clear();
        // Joint top score (e/(e+8))^2 ≈ 0.0643; the runner-up ≈ 0.0237.
        let d = run(&sc, &OracleIndicator, Some(&q(0.8)), oracle_cfg(PlannerMode::Distributed)).unwrap();
        let c = run(&sc, &OracleIndicator, Some(&q(0.96)), oracle_cfg(PlannerMode::Centralized)).unwrap();
        assert_eq!(d.calls.total, 54);
        assert_eq!(c.calls.total, 243);
        assert_eq!(c.calls.per_step[&2], 81);
        assert!(c.help_events.is_empty());
        assert_eq!(c.plan, d.plan);
    }

    #[test]
    fn centralized_flags_the_whole_team() {
        let sc = fixture(2, 12);
        let scorer = FnScorer(ambiguous_at(3));
        let c = run(&sc, &scorer, Some(&q(0.999)), oracle_cfg(PlannerMode::Centralized)).unwrap();
        assert!(c.user_events().count() >= 1);
        assert!(c.user_events().all(|e| e.robot.is_none() && e.resolution.len() == 2));
        assert!(validate_plan(&sc, &c.plan).complete);
    }

    #[test]
    fn centralized_respects_the_joint_budget() {
        let sc = fixture(2, 12);
        let cfg = PlannerConfig {
            joint_budget: 80,
            ..oracle_cfg(PlannerMode::Centralized)
        };
        let err = run(&sc, &OracleIndicator, Some(&q(0.9)), cfg).unwrap_err();
        assert!(matches!(err, Error::Budget(_)));
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn single_robot_modes_coincide() {
        let params = DistributionParams {
            robots: IntRange::exactly(1),
            ..DistributionParams::default()
        };
        let scorer = crate::scorer::NoisyOracle {
            beta: 4.0,
            sigma: 1.0,
            epsilon: 0.15,
            seed: 3,
        };
        for i in 0..8 {
            let sc = sample_indexed(&params, i).unwrap();
            let d = run(&sc, &scorer, Some(&q(0.7)), oracle_cfg(PlannerMode::Distributed)).unwrap();
            let c = run(&sc, &scorer, Some(&q(0.7)), oracle_cfg(PlannerMode::Centralized)).unwrap();
            assert_eq!(d.plan, c.plan);
            assert_eq!(d.calls, c.calls);
            let shape = |t: &PlanTrace| -> Vec<(usize, usize, Vec<Decision>, DecisionSource)> {
                t.iterations
                    .iter()
                    .map(|r| (r.t, r.set_size, r.chosen.clone(), r.source))
                    .collect()
            };
            assert_eq!(shape(&d), shape(&c));
            let sc = Arc::new(sc);
            let joint = joint_calibration_record(&sc, &scorer, &FeasibilityConfig::default()).unwrap();
            let seq = crate::conformal::calibration_record(&sc, &scorer, &FeasibilityConfig::default()).unwrap();
            assert_eq!(joint.scores, seq.scores);
        }
    }

    #[test]
    fn user_help_examples() {
        let set = |members: Vec<usize>, scores: &[f64]| PredictionSet {
            scores: members.iter().map(|i| scores[*i]).collect(),
            members,
            threshold: Some(0.3),
        };
        // a = 0, b = 1, c = 2
        let scores = [0.4, 0.35, 0.25];
        assert_eq!(
            resolve_user_help(&set(vec![0, 1], &scores), &[0], &scores),
            Some(UserChoice { index: 0, coverage_miss: false })
        );
        assert_eq!(
            resolve_user_help(&set(vec![1], &scores), &[0], &scores),
            Some(UserChoice { index: 0, coverage_miss: true })
        );
        let scores = [0.2, 0.3, 0.5];
        let full = local_prediction_set(&scores, &Quantile::full_set(4, 0.1));
        assert_eq!(
            resolve_user_help(&full, &[0, 2], &scores),
            Some(UserChoice { index: 2, coverage_miss: false })
        );
        assert_eq!(resolve_user_help(&full, &[], &scores), None);
    }

    fn terminal_run(input: &str) -> (Result<PlanTrace>, String) {
        let sc = Arc::new(fixture(1, 10));
        let scorer = FnScorer(ambiguous_at(3));
        let cfg = PlannerConfig {
            help: HelpPolicy::InteractiveUser,
            ..oracle_cfg(PlannerMode::Distributed)
        };
        let mut reader = Input::new(input.as_bytes().to_vec());
        let mut out = Vec::new();
        let trace = Planner::new(sc, &scorer, cfg).unwrap().with_terminal(Terminal {
            input: &mut reader,
            output: &mut out,
        });
        let mut planner = trace;
        let r = planner.run(Some(&q(0.8)));
        drop(planner);
        (r, String::from_utf8(out).unwrap())
    }

    #[test]
    fn interactive_user_reads_a_numbered_choice() {
        let (trace, shown) = terminal_run("zero\n1\n");
        let trace = trace.unwrap();
        assert!(shown.contains("[1]") && shown.contains("[2]") && shown.contains("score"));
        assert!(shown.contains("Invalid selection"));
        let event = trace.user_events().next().unwrap();
        assert_eq!(trace.help_events.len(), 1);
        assert!(!event.coverage_miss);
    }

    #[test]
    fn interactive_user_gives_up_after_three_reprompts() {
        let (r, shown) = terminal_run("a\nb\nc\nd\n1\n");
        assert!(matches!(r, Err(Error::Aborted(_))));
        assert_eq!(shown.matches("Select").count(), 4);
        let (r, _) = terminal_run("");
        assert!(matches!(r, Err(Error::Aborted(_))));
    }

    #[test]
    fn trace_serializes() {
        let sc = fixture(1, 10);
        let trace = run(&sc, &FnScorer(ambiguous_at(3)), Some(&q(0.8)), oracle_cfg(PlannerMode::Distributed)).unwrap();
        let text = serde_json::to_string(&trace).unwrap();
        let back: PlanTrace = serde_json::from_str(&text).unwrap();
        assert_eq!(back, trace);
    }
}

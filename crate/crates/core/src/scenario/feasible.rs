//! Mission-feasible next decisions, the selector that picks one of them, and
//! the auto-regressive labeling of decision sequences.

use std::collections::HashSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::oracle::Oracle;
use super::{DecisionSpace, Scenario};
use crate::context::{plan_from_history, Context, HistoryEntry, OrderSchedule, OrderedSet};
use crate::error::{Error, Result};
use crate::scorer::{CallCounter, ScoreVector, Scorer};
use crate::world::{validate_plan, Decision, Door, JointDecision, Placement, RobotId, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeasibilityMode {
    /// Exhaustive search over every completion of the remaining horizon.
    Exact,
    /// A decision is certified when the oracle policy completes the mission
    /// after it. Sound but possibly incomplete.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityConfig {
    /// Exact search is used while |S|^(remaining iterations) stays below this.
    pub exact_limit: f64,
    /// Search nodes allowed per query before giving up with a budget error.
    pub node_budget: u64,
    /// Forces one mode regardless of instance size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub force: Option<FeasibilityMode>,
}

impl Default for FeasibilityConfig {
    fn default() -> Self {
        FeasibilityConfig {
            exact_limit: 1e6,
            node_budget: 2_000_000,
            force: None,
        }
    }
}

/// Indices into the decision space, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub indices: Vec<usize>,
    pub mode: FeasibilityMode,
}

/// Answers feasibility queries for one scenario. Failed step-boundary states
/// are remembered across queries.
pub struct FeasibilitySearch<'a> {
    oracle: Oracle<'a>,
    space: DecisionSpace,
    config: FeasibilityConfig,
    dead: HashSet<WorldState>,
    nodes: u64,
}

impl<'a> FeasibilitySearch<'a> {
    pub fn new(scenario: &'a Scenario, config: FeasibilityConfig) -> Result<Self> {
        Ok(FeasibilitySearch {
            oracle: Oracle::new(scenario)?,
            space: scenario.decision_space(),
            config,
            dead: HashSet::new(),
            nodes: 0,
        })
    }

    pub fn oracle(&self) -> &Oracle<'a> {
        &self.oracle
    }

    fn scenario(&self) -> &'a Scenario {
        self.oracle.scenario
    }

    /// State at the start of step `t` and the decisions already fixed at `t`.
    pub fn replay(
        &self,
        history: &[HistoryEntry],
        t: usize,
    ) -> Result<(WorldState, Vec<Option<Decision>>)> {
        replay(self.scenario(), history, t)
    }

    /// The oracle policy's decision for `robot` at the start of step `t`.
    pub fn reference(&self, history: &[HistoryEntry], robot: RobotId, t: usize) -> Result<Decision> {
        let (state, _) = self.replay(history, t)?;
        Ok(self.oracle.policy(&state, robot))
    }

    pub fn mode_for(&self, free_robots: usize, t: usize) -> FeasibilityMode {
        if let Some(m) = self.config.force {
            return m;
        }
        let sc = self.scenario();
        let remaining = free_robots + (sc.horizon - t) * sc.num_robots;
        if (self.space.len() as f64).powi(remaining as i32) <= self.config.exact_limit {
            FeasibilityMode::Exact
        } else {
            FeasibilityMode::Heuristic
        }
    }

    /// Every decision of `robot` at step `t` that is executable and leaves the
    /// mission completable within the horizon. Exact searches that exhaust
    /// the node budget return [`Error::Budget`].
    pub fn feasible_next(
        &mut self,
        history: &[HistoryEntry],
        robot: RobotId,
        t: usize,
    ) -> Result<FeasibleSet> {
        let (state, committed) = self.replay(history, t)?;
        let free = committed.iter().filter(|c| c.is_none()).count();
        let mode = self.mode_for(free, t);
        self.feasible_in_mode(&state, &committed, robot, mode)
    }

    /// [`Self::feasible_next`], falling back to the heuristic when the exact
    /// search runs out of budget.
    pub fn feasible_next_or_fallback(
        &mut self,
        history: &[HistoryEntry],
        robot: RobotId,
        t: usize,
    ) -> Result<FeasibleSet> {
        match self.feasible_next(history, robot, t) {
            Err(Error::Budget(_)) => {
                let (state, committed) = self.replay(history, t)?;
                self.feasible_in_mode(&state, &committed, robot, FeasibilityMode::Heuristic)
            }
            other => other,
        }
    }

    fn feasible_in_mode(
        &mut self,
        state: &WorldState,
        committed: &[Option<Decision>],
        robot: RobotId,
        mode: FeasibilityMode,
    ) -> Result<FeasibleSet> {
        let horizon = self.scenario().horizon;
        let mut indices = Vec::new();
        self.nodes = 0;
        for d in self.candidates(state, robot, committed, &[]) {
            let mut fixed = committed.to_vec();
            fixed[robot] = Some(d);
            let ok = match mode {
                FeasibilityMode::Heuristic => self
                    .oracle
                    .greedy_completion(state, &fixed, horizon)
                    .is_some(),
                FeasibilityMode::Exact => self.exists_completion(state, &fixed)?,
            };
            if ok {
                indices.push(self.space.index_of(&d).expect("candidate from space"));
            }
        }
        indices.sort_unstable();
        Ok(FeasibleSet { indices, mode })
    }

    /// Executable decisions for `robot` at `state`, policy move first.
    fn candidates(
        &self,
        state: &WorldState,
        robot: RobotId,
        committed: &[Option<Decision>],
        chosen: &[Decision],
    ) -> Vec<Decision> {
        let sc = self.scenario();
        let safety = sc.mission.safety;
        let taken = |o| {
            committed
                .iter()
                .enumerate()
                .any(|(r, c)| r != robot && *c == Some(Decision::Grab(o)))
                || chosen.contains(&Decision::Grab(o))
        };
        let ok = |d: &Decision| {
            sc.env.check_decision(state, robot, d).is_ok()
                && !(safety.is_some_and(|s| s.robot == robot && s.is_violated_by(d)))
                && !matches!(d, Decision::Grab(o) if taken(*o))
        };
        let first = self.oracle.policy(state, robot);
        let mut out: Vec<Decision> = Vec::with_capacity(self.space.len());
        if ok(&first) {
            out.push(first);
        }
        out.extend(
            self.space
                .decisions()
                .iter()
                .filter(|d| **d != first && ok(d))
                .copied(),
        );
        out
    }

    fn exists_completion(
        &mut self,
        state: &WorldState,
        committed: &[Option<Decision>],
    ) -> Result<bool> {
        let mut joint = Vec::with_capacity(committed.len());
        self.fill(state, committed, &mut joint)
    }

    fn fill(
        &mut self,
        state: &WorldState,
        committed: &[Option<Decision>],
        joint: &mut Vec<Decision>,
    ) -> Result<bool> {
        let r = joint.len();
        if r == committed.len() {
            let sc = self.scenario();
            let next = match sc
                .env
                .step(state, &JointDecision(joint.clone()), sc.mission.safety.as_ref())
            {
                Ok(n) if !n.safety_violated => n,
                _ => return Ok(false),
            };
            return self.boundary(next);
        }
        if let Some(d) = committed[r] {
            joint.push(d);
            let res = self.fill(state, committed, joint);
            joint.pop();
            return res;
        }
        for d in self.candidates(state, r, committed, joint) {
            self.nodes += 1;
            if self.nodes > self.config.node_budget {
                return Err(Error::Budget(format!(
                    "feasibility search exceeded {} nodes",
                    self.config.node_budget
                )));
            }
            joint.push(d);
            let res = self.fill(state, committed, joint);
            joint.pop();
            if res? {
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn boundary(&mut self, state: WorldState) -> Result<bool> {
        let sc = self.scenario();
        if sc.env.mission_satisfied(&state, &sc.mission) {
            return Ok(true);
        }
        if state.time >= sc.horizon || self.dead.contains(&state) {
            return Ok(false);
        }
        if sc.horizon - state.time < self.lower_bound(&state) {
            self.dead.insert(state);
            return Ok(false);
        }
        let free = vec![None; sc.num_robots];
        let res = self.exists_completion(&state, &free)?;
        if !res {
            self.dead.insert(state);
        }
        Ok(res)
    }

    /// Steps still needed by the slowest sub-task, assuming each one gets its
    /// cheapest matching object and ignoring contention. Never overestimates.
    fn lower_bound(&self, state: &WorldState) -> usize {
        let sc = self.scenario();
        let env = &sc.env;
        sc.mission
            .sub_tasks
            .iter()
            .map(|task| {
                env.objects
                    .iter()
                    .filter(|o| o.label == task.object_label)
                    .map(|o| match state.objects[o.id.0] {
                        Placement::Held { robot } => {
                            if task.destinations.contains(&state.robots[robot].at) {
                                1
                            } else {
                                2
                            }
                        }
                        Placement::At { location, .. } if task.destinations.contains(&location) => 0,
                        Placement::At { location, inside } => {
                            let reach = usize::from(!state.robots.iter().any(|r| r.at == location));
                            let open = usize::from(
                                inside.is_some_and(|c| state.containers[c.0] == Door::Closed),
                            );
                            reach + open + 3
                        }
                    })
                    .min()
                    .unwrap_or(usize::MAX)
            })
            .max()
            .unwrap_or(0)
    }
}

/// Replays complete steps `1..t` of `history` and collects the entries of
/// step `t`. Non-executable decisions are skipped (see
/// [`crate::world::Environment::step_lenient`]), so a plan that went wrong can
/// still be scored to the end.
pub(crate) fn replay(
    scenario: &Scenario,
    history: &[HistoryEntry],
    t: usize,
) -> Result<(WorldState, Vec<Option<Decision>>)> {
    let n = scenario.num_robots;
    let mut state = scenario.env.initial_state();
    let mut steps: Vec<Vec<Option<Decision>>> = vec![vec![None; n]; t];
    for e in history {
        if e.t == 0 || e.t > t || e.robot >= n || steps[e.t - 1][e.robot].is_some() {
            return Err(Error::Argument(format!(
                "history entry {e:?} does not fit step {t} of a {n}-robot team"
            )));
        }
        steps[e.t - 1][e.robot] = Some(e.decision);
    }
    let current = steps.pop().unwrap_or_else(|| vec![None; n]);
    for (i, step) in steps.into_iter().enumerate() {
        let joint = step
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .map(JointDecision)
            .ok_or_else(|| Error::Argument(format!("step {} of the history is incomplete", i + 1)))?;
        state = scenario
            .env
            .step_lenient(&state, &joint, scenario.mission.safety.as_ref());
    }
    Ok((state, current))
}

/// The oracle policy's decision for the robot under the context's cursor,
/// evaluated at the start of the cursor's step.
pub fn reference_decision(ctx: &Context) -> Result<Decision> {
    let cursor = ctx
        .cursor
        .ok_or_else(|| Error::Argument("context has no cursor".into()))?;
    let scenario = ctx.scenario();
    let (state, _) = replay(scenario, &ctx.history, cursor.t)?;
    Ok(Oracle::new(scenario)?.policy(&state, cursor.robot))
}

/// Highest-scoring feasible decision; exact ties go to the lower
/// decision-space index.
pub fn selector_f(
    scores: &ScoreVector,
    feasible: &FeasibleSet,
    robot: RobotId,
    t: usize,
) -> Result<usize> {
    let mut best: Option<usize> = None;
    for &i in &feasible.indices {
        if best.is_none_or(|b| scores.values[i] > scores.values[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::NoFeasible { robot, t })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStep {
    pub k: usize,
    pub t: usize,
    pub position: usize,
    pub robot: RobotId,
    pub decision: Decision,
    /// Index of `decision` in the decision space.
    pub index: usize,
    /// Normalized score the scorer gave the labeled decision.
    pub score: f64,
    pub feasible: usize,
    pub mode: FeasibilityMode,
}

/// A ground-truth decision sequence with the orders it was produced under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSequence {
    pub orders: Vec<OrderedSet>,
    pub steps: Vec<LabelStep>,
}

impl LabeledSequence {
    pub fn min_score(&self) -> f64 {
        self.steps.iter().map(|s| s.score).fold(f64::INFINITY, f64::min)
    }

    pub fn history(&self) -> Vec<HistoryEntry> {
        self.steps
            .iter()
            .map(|s| HistoryEntry {
                t: s.t,
                robot: s.robot,
                decision: s.decision,
            })
            .collect()
    }

    pub fn exact(&self) -> bool {
        self.steps.iter().all(|s| s.mode == FeasibilityMode::Exact)
    }
}

/// Builds the ground-truth sequence auto-regressively: at every iteration the
/// feasible set is computed and the scorer's favourite feasible decision is
/// appended to the context.
pub fn label_sequence(
    scenario: &Arc<Scenario>,
    scorer: &dyn Scorer,
    schedule: &OrderSchedule,
    config: &FeasibilityConfig,
    counter: &mut CallCounter,
) -> Result<LabeledSequence> {
    let space = scenario.decision_space();
    let mut search = FeasibilitySearch::new(scenario, config.clone())?;
    let mut ctx = Context::initial(scenario.clone(), schedule);
    let mut steps = Vec::with_capacity(scenario.num_robots * scenario.horizon);
    while let Some(c) = ctx.cursor {
        let feasible = search.feasible_next_or_fallback(&ctx.history, c.robot, c.t)?;
        let scores = scorer.score_all(&ctx, &space, counter)?;
        let index = selector_f(&scores, &feasible, c.robot, c.t)?;
        let decision = space.get(index);
        steps.push(LabelStep {
            k: ctx.k().expect("cursor set"),
            t: c.t,
            position: c.position,
            robot: c.robot,
            decision,
            index,
            score: scores.values[index],
            feasible: feasible.indices.len(),
            mode: feasible.mode,
        });
        ctx = ctx.advance(decision, schedule);
    }
    let plan = plan_from_history(&ctx.history, scenario.num_robots, scenario.horizon);
    let report = validate_plan(scenario, &plan);
    if !report.complete {
        return Err(Error::Internal(format!(
            "label for scenario {:016x} fails validation: {:?}",
            scenario.id, report.failure
        )));
    }
    Ok(LabeledSequence {
        orders: (1..=scenario.horizon)
            .map(|t| schedule.order_at(t).clone())
            .collect(),
        steps,
    })
}

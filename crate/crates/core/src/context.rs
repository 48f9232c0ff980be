//! Per-robot planning context: the prompt handed from robot to robot.
//!
//! A [`Context`] is a structured value. Its six parts are the skill list (a),
//! the environment listing (b), the task (c), the response format (d), the
//! decision history (e) and the cursor naming the robot and step that must
//! decide next (f). Text for external scorers is a projection produced by
//! [`Context::render_text`].

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scenario::{Scenario, Skill};
use crate::seeding::{self, tag};
use crate::world::{Decision, Plan, RobotId, Target};

/// A permutation of robot indices: the order in which robots decide within
/// one step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct OrderedSet(Vec<usize>);

impl OrderedSet {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &r in &order {
            if r >= order.len() || seen[r] {
                return Err(Error::Argument(format!(
                    "{order:?} is not a permutation of 0..{}",
                    order.len()
                )));
            }
            seen[r] = true;
        }
        if order.is_empty() {
            return Err(Error::Argument("ordered set must not be empty".into()));
        }
        Ok(OrderedSet(order))
    }

    pub fn identity(n: usize) -> Self {
        OrderedSet((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Robot deciding at `position`.
    pub fn robot_at(&self, position: usize) -> RobotId {
        self.0[position]
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }
}

impl TryFrom<Vec<usize>> for OrderedSet {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        OrderedSet::new(v)
    }
}

impl From<OrderedSet> for Vec<usize> {
    fn from(o: OrderedSet) -> Self {
        o.0
    }
}

/// The finite family of orders a schedule draws from: every rotation of the
/// identity plus its reversal, without duplicates.
pub fn order_family(num_robots: usize) -> Vec<OrderedSet> {
    let mut family: Vec<OrderedSet> = (0..num_robots)
        .map(|shift| OrderedSet((0..num_robots).map(|i| (i + shift) % num_robots).collect()))
        .collect();
    let reversed = OrderedSet((0..num_robots).rev().collect());
    if !family.contains(&reversed) {
        family.push(reversed);
    }
    family
}

/// Draws the order used at each step from a fixed family. Calibration and
/// test sequences use the same mechanism.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderSchedule {
    seed: u64,
    family: Vec<OrderedSet>,
}

impl OrderSchedule {
    pub fn new(num_robots: usize, seed: u64) -> Self {
        OrderSchedule {
            seed,
            family: order_family(num_robots),
        }
    }

    /// A schedule that always uses the identity order.
    pub fn identity(num_robots: usize) -> Self {
        OrderSchedule {
            seed: 0,
            family: vec![OrderedSet::identity(num_robots)],
        }
    }

    pub fn for_scenario(scenario: &Scenario) -> Self {
        Self::new(scenario.num_robots, scenario.order_seed)
    }

    pub fn family(&self) -> &[OrderedSet] {
        &self.family
    }

    pub fn order_at(&self, t: usize) -> &OrderedSet {
        let i = seeding::mix(&[self.seed, tag::ORDER, t as u64]) % self.family.len() as u64;
        &self.family[i as usize]
    }

    /// Alternative orders for step `t`, in the sequence the planner tries them
    /// when asking teammates for help. Drawn without replacement; never
    /// contains the step's initial order.
    pub fn reorder_candidates(&self, t: usize) -> Vec<OrderedSet> {
        let first = self.order_at(t);
        let mut rest: Vec<OrderedSet> = self.family.iter().filter(|o| *o != first).cloned().collect();
        rest.shuffle(&mut seeding::stream(&[self.seed, tag::REORDER, t as u64]));
        rest
    }
}

/// Bijection between iteration index `k` (1-based) and (step, position).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceIndex {
    pub num_robots: usize,
    pub horizon: usize,
}

impl SequenceIndex {
    pub fn new(num_robots: usize, horizon: usize) -> Self {
        SequenceIndex {
            num_robots,
            horizon,
        }
    }

    /// Total number of iterations T = N * H.
    pub fn len(&self) -> usize {
        self.num_robots * self.horizon
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn k(&self, t: usize, position: usize) -> usize {
        (t - 1) * self.num_robots + position + 1
    }

    pub fn step_and_position(&self, k: usize) -> (usize, usize) {
        ((k - 1) / self.num_robots + 1, (k - 1) % self.num_robots)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub t: usize,
    pub robot: RobotId,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cursor {
    pub t: usize,
    pub position: usize,
    pub robot: RobotId,
}

/// Phrasing used by [`Context::render_text`]. Placeholders in braces are
/// substituted; unknown placeholders are left as is.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system_heading: String,
    pub system: String,
    pub environment_heading: String,
    pub task_heading: String,
    pub response_heading: String,
    pub response_structure: String,
    pub history_heading: String,
    pub history_empty: String,
    pub history_line: String,
    pub cursor_heading: String,
    pub cursor_line: String,
    pub cursor_done: String,
}

const DEFAULT_TEMPLATE: &str = include_str!("../templates/prompt.json");

impl Default for PromptTemplate {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TEMPLATE).expect("shipped template parses")
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

fn fill(template: &str, vars: &[(&str, String)]) -> String {
    vars.iter().fold(template.to_string(), |acc, (k, v)| {
        acc.replace(&format!("{{{k}}}"), v)
    })
}

/// Parts (a) to (d); identical for every robot and step of a scenario.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptHeader {
    pub system: String,
    pub environment: String,
    pub task: String,
    pub response_structure: String,
}

impl PromptHeader {
    pub fn build(scenario: &Scenario, template: &PromptTemplate) -> Self {
        let skills = scenario
            .skills
            .iter()
            .map(Skill::phrase)
            .collect::<Vec<_>>()
            .join(", ");
        PromptHeader {
            system: fill(
                &template.system,
                &[
                    ("num_robots", scenario.num_robots.to_string()),
                    ("skills", skills),
                ],
            ),
            environment: environment_listing(scenario),
            task: task_listing(scenario),
            response_structure: template.response_structure.clone(),
        }
    }
}

fn environment_listing(scenario: &Scenario) -> String {
    let env = &scenario.env;
    let mut lines = vec![format!("Scenario {:016x}.", scenario.id)];
    for o in &env.objects {
        let name = env.entity_name(Target::Object(o.id));
        let place = env.entity_name(Target::Location(o.at));
        match o.inside {
            Some(c) => {
                let c = env.container(c).expect("validated");
                let door = match c.door {
                    crate::world::Door::Open => "open",
                    crate::world::Door::Closed => "closed",
                };
                lines.push(format!(
                    "{name} is inside {} ({door}) at {place}.",
                    env.entity_name(Target::Container(c.id))
                ));
            }
            None => lines.push(format!("{name} is at {place}.")),
        }
    }
    for c in &env.containers {
        lines.push(format!(
            "{} stands at {}.",
            env.entity_name(Target::Container(c.id)),
            env.entity_name(Target::Location(c.at))
        ));
    }
    let dests: Vec<String> = env
        .destinations
        .iter()
        .map(|d| env.entity_name(Target::Location(*d)))
        .collect();
    lines.push(format!("Objects can be put down at: {}.", dests.join(", ")));
    for (r, s) in env.robot_starts.iter().enumerate() {
        lines.push(format!("robot {r} starts at {}.", env.entity_name(Target::Location(*s))));
    }
    lines.join("\n")
}

fn task_listing(scenario: &Scenario) -> String {
    let env = &scenario.env;
    let mut lines: Vec<String> = scenario
        .mission
        .sub_tasks
        .iter()
        .map(|task| {
            let dests: Vec<String> = task
                .destinations
                .iter()
                .map(|d| env.entity_name(Target::Location(*d)))
                .collect();
            format!("Deliver a {} to {}.", task.object_label, dests.join(" or "))
        })
        .collect();
    if lines.is_empty() {
        lines.push("Nothing needs to be delivered.".into());
    }
    if let Some(s) = &scenario.mission.safety {
        lines.push(format!(
            "robot {} must never approach or grab {}.",
            s.robot,
            env.entity_name(Target::Object(s.forbidden_object))
        ));
    }
    lines.push(format!("The plan may use at most {} steps.", scenario.horizon));
    lines.join("\n")
}

#[derive(Debug, Clone)]
pub struct Context {
    scenario: Arc<Scenario>,
    header: Arc<PromptHeader>,
    pub history: Vec<HistoryEntry>,
    /// Order in force for the cursor's step.
    pub order: OrderedSet,
    pub cursor: Option<Cursor>,
}

impl PartialEq for Context {
    fn eq(&self, other: &Self) -> bool {
        self.scenario.id == other.scenario.id
            && self.header == other.header
            && self.history == other.history
            && self.order == other.order
            && self.cursor == other.cursor
    }
}

impl Context {
    /// Empty-history context for the first robot of step 1.
    pub fn initial(scenario: Arc<Scenario>, schedule: &OrderSchedule) -> Self {
        Self::initial_with_template(scenario, schedule, &PromptTemplate::default())
    }

    pub fn initial_with_template(
        scenario: Arc<Scenario>,
        schedule: &OrderSchedule,
        template: &PromptTemplate,
    ) -> Self {
        let header = Arc::new(PromptHeader::build(&scenario, template));
        let order = schedule.order_at(1).clone();
        let cursor = (scenario.horizon > 0).then(|| Cursor {
            t: 1,
            position: 0,
            robot: order.robot_at(0),
        });
        Context {
            scenario,
            header,
            history: Vec::new(),
            order,
            cursor,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn scenario_arc(&self) -> &Arc<Scenario> {
        &self.scenario
    }

    pub fn header(&self) -> &PromptHeader {
        &self.header
    }

    pub fn index(&self) -> SequenceIndex {
        SequenceIndex::new(self.scenario.num_robots, self.scenario.horizon)
    }

    /// Iteration index of the cursor.
    pub fn k(&self) -> Option<usize> {
        self.cursor.map(|c| self.index().k(c.t, c.position))
    }

    /// Records the cursor robot's decision and hands the context to the next
    /// robot, or to the first robot of the next step's order.
    pub fn advance(&self, chosen: Decision, schedule: &OrderSchedule) -> Self {
        let cursor = self.cursor.expect("advance past the end of the horizon");
        let mut next = self.clone();
        next.history.push(HistoryEntry {
            t: cursor.t,
            robot: cursor.robot,
            decision: chosen,
        });
        if cursor.position + 1 < self.order.len() {
            next.cursor = Some(Cursor {
                t: cursor.t,
                position: cursor.position + 1,
                robot: self.order.robot_at(cursor.position + 1),
            });
        } else if cursor.t < self.scenario.horizon {
            next.order = schedule.order_at(cursor.t + 1).clone();
            next.cursor = Some(Cursor {
                t: cursor.t + 1,
                position: 0,
                robot: next.order.robot_at(0),
            });
        } else {
            next.cursor = None;
        }
        next
    }

    /// Forgets every decision made at step `t` and restarts the step with
    /// `order`.
    pub fn reset_step(&self, t: usize, order: OrderedSet) -> Self {
        debug_assert_eq!(self.cursor.map(|c| c.t), Some(t));
        let mut next = self.clone();
        next.history.retain(|e| e.t != t);
        next.cursor = Some(Cursor {
            t,
            position: 0,
            robot: order.robot_at(0),
        });
        next.order = order;
        next
    }

    pub fn render_text(&self) -> String {
        self.render_with(&PromptTemplate::default())
    }

    pub fn render_with(&self, template: &PromptTemplate) -> String {
        let env = &self.scenario.env;
        let mut out = String::new();
        let mut section = |heading: &str, body: &str| {
            out.push_str(heading);
            out.push('\n');
            out.push_str(body);
            out.push_str("\n\n");
        };
        section(&template.system_heading, &self.header.system);
        section(&template.environment_heading, &self.header.environment);
        section(&template.task_heading, &self.header.task);
        section(&template.response_heading, &self.header.response_structure);
        let history = if self.history.is_empty() {
            template.history_empty.clone()
        } else {
            self.history
                .iter()
                .map(|e| {
                    fill(
                        &template.history_line,
                        &[
                            ("robot", e.robot.to_string()),
                            ("t", e.t.to_string()),
                            ("action", env.describe(&e.decision)),
                        ],
                    )
                })
                .collect::<Vec<_>>()
                .join("\n")
        };
        section(&template.history_heading, &history);
        let cursor = match self.cursor {
            Some(c) => fill(
                &template.cursor_line,
                &[
                    ("robot", c.robot.to_string()),
                    ("t", c.t.to_string()),
                    ("order", format!("{:?}", self.order.as_slice())),
                ],
            ),
            None => template.cursor_done.clone(),
        };
        out.push_str(&template.cursor_heading);
        out.push('\n');
        out.push_str(&cursor);
        out.push('\n');
        out
    }

    /// Decisions recorded so far at the cursor's step, keyed by robot.
    pub fn current_step_decisions(&self) -> BTreeMap<RobotId, Decision> {
        let Some(c) = self.cursor else {
            return BTreeMap::new();
        };
        self.history
            .iter()
            .filter(|e| e.t == c.t)
            .map(|e| (e.robot, e.decision))
            .collect()
    }
}

/// Joint-decision plan spelled out by a decision history; robots without an
/// entry at some step idle there.
pub fn plan_from_history(history: &[HistoryEntry], num_robots: usize, horizon: usize) -> Plan {
    let mut plan = Plan::all_idle(num_robots, horizon);
    for e in history {
        plan.steps[e.t - 1].0[e.robot] = e.decision;
    }
    plan
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::tests::fixture;

    #[test]
    fn family_contents() {
        assert_eq!(order_family(1), vec![OrderedSet::identity(1)]);
        assert_eq!(order_family(2).len(), 2);
        let f3: Vec<Vec<usize>> = order_family(3).into_iter().map(Into::into).collect();
        assert_eq!(
            f3,
            vec![vec![0, 1, 2], vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0]]
        );
        for o in order_family(5) {
            assert!(OrderedSet::new(o.as_slice().to_vec()).is_ok());
        }
    }

    #[test]
    fn rejects_non_permutations() {
        assert!(OrderedSet::new(vec![0, 0]).is_err());
        assert!(OrderedSet::new(vec![1, 2]).is_err());
        assert!(OrderedSet::new(vec![]).is_err());
        assert!(serde_json::from_str::<OrderedSet>("[1,0,1]").is_err());
    }

    #[test]
    fn reorder_candidates_exclude_the_initial_order() {
        let s = OrderSchedule::new(3, 11);
        for t in 1..20 {
            let alt = s.reorder_candidates(t);
            assert_eq!(alt.len(), 3);
            assert!(!alt.contains(s.order_at(t)));
            assert!(alt.iter().all(|o| s.family().contains(o)));
        }
        assert!(OrderSchedule::new(1, 5).reorder_candidates(1).is_empty());
    }

    #[test]
    fn sequence_index_round_trip() {
        let idx = SequenceIndex::new(3, 7);
        for k in 1..=idx.len() {
            let (t, p) = idx.step_and_position(k);
            assert!((1..=7).contains(&t) && p < 3);
            assert_eq!(idx.k(t, p), k);
        }
    }

    #[test]
    fn initial_context_and_rendering() {
        let sc = Arc::new(fixture(1, 6));
        let sched = OrderSchedule::for_scenario(&sc);
        let ctx = Context::initial(sc.clone(), &sched);
        assert!(ctx.history.is_empty());
        assert_eq!(
            ctx.cursor,
            Some(Cursor {
                t: 1,
                position: 0,
                robot: 0
            })
        );
        let text = ctx.render_text();
        assert!(text.contains("go to, grab object, put object down, open door, remain idle"));
        assert!(text.contains("No actions yet."));
        assert_eq!(text, Context::initial(sc, &sched).render_text());
    }

    #[test]
    fn advance_single_robot_moves_to_next_step() {
        let sc = Arc::new(fixture(1, 6));
        let sched = OrderSchedule::for_scenario(&sc);
        let ctx = Context::initial(sc, &sched).advance(Decision::Idle, &sched);
        assert_eq!(ctx.cursor.map(|c| (c.t, c.robot)), Some((2, 0)));
    }

    #[test]
    fn advance_walks_the_permutation() {
        let sc = Arc::new(fixture(3, 4));
        let sched = OrderSchedule::for_scenario(&sc);
        let mut ctx = Context::initial(sc, &sched);
        ctx.order = OrderedSet::new(vec![1, 0, 2]).unwrap();
        ctx.cursor = Some(Cursor {
            t: 1,
            position: 0,
            robot: 1,
        });
        let next = ctx.advance(Decision::Idle, &sched);
        assert_eq!(next.cursor.map(|c| (c.t, c.robot)), Some((1, 0)));
    }

    #[test]
    fn advancing_t_times_exhausts_the_cursor() {
        let sc = Arc::new(fixture(2, 3));
        let sched = OrderSchedule::for_scenario(&sc);
        let mut ctx = Context::initial(sc, &sched);
        for k in 1..=6 {
            assert_eq!(ctx.k(), Some(k));
            ctx = ctx.advance(Decision::Idle, &sched);
        }
        assert_eq!(ctx.cursor, None);
        assert_eq!(ctx.history.len(), 6);
        assert!(ctx.render_text().contains("All decisions have been made."));
    }

    #[test]
    fn reset_step_semantics() {
        let sc = Arc::new(fixture(2, 3));
        let sched = OrderSchedule::for_scenario(&sc);
        let init = Context::initial(sc, &sched);
        let swapped = OrderedSet::new(vec![1, 0]).unwrap();

        let one = init.advance(Decision::Idle, &sched);
        let reset = one.reset_step(1, swapped.clone());
        let mut expected = init.clone();
        expected.order = swapped.clone();
        expected.cursor = Some(Cursor {
            t: 1,
            position: 0,
            robot: 1,
        });
        assert_eq!(reset, expected);

        let step2 = init
            .advance(Decision::Idle, &sched)
            .advance(Decision::Idle, &sched)
            .advance(Decision::Idle, &sched);
        let same_order = step2.order.clone();
        let reset = step2.reset_step(2, same_order.clone());
        assert_eq!(reset.history.len(), 2);
        assert!(reset.history.iter().all(|e| e.t == 1));
        assert_eq!(reset.order, same_order);
    }

    #[test]
    fn history_lines_follow_the_template() {
        let sc = Arc::new(fixture(1, 6));
        let sched = OrderSchedule::for_scenario(&sc);
        let obj = sc.env.objects[0].id;
        let ctx = Context::initial(sc.clone(), &sched)
            .advance(Decision::GoTo(Target::Object(obj)), &sched)
            .advance(Decision::Grab(obj), &sched);
        let text = ctx.render_text();
        let name = sc.env.entity_name(Target::Object(obj));
        assert!(text.contains(&format!("robot 0 at step 2: grab {name}")), "{text}");
    }

    #[test]
    fn custom_template_is_honoured() {
        let sc = Arc::new(fixture(1, 6));
        let sched = OrderSchedule::for_scenario(&sc);
        let mut tpl = PromptTemplate::default();
        tpl.history_empty = "<empty>".into();
        let text = Context::initial(sc, &sched).render_with(&tpl);
        assert!(text.contains("<empty>"));
    }
}

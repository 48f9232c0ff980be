//! Symbolic household environment and the deterministic state machine that
//! executes robot decisions.
//!
//! Locations carry no geometry: every listed location is reachable, so `GoTo`
//! always succeeds. The remaining skills have preconditions that are checked
//! against the state at the start of a step; all robots of a team act
//! synchronously, so one robot's effects become visible to teammates on the
//! next step only.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{Mission, SafetyConstraint, Scenario};

pub type RobotId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LocationId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContainerId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocationKind {
    ObjectSite,
    Destination,
    ContainerSite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub id: LocationId,
    pub label: String,
    pub kind: LocationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticObject {
    pub id: ObjectId,
    pub label: String,
    pub at: LocationId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inside: Option<ContainerId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Door {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Container {
    pub id: ContainerId,
    pub label: String,
    pub at: LocationId,
    pub door: Door,
}

/// Static description of a household: what exists and where robots start.
///
/// `destinations` lists the locations where objects may be put down. A
/// destination is either a `Destination` location or the site of a container
/// (e.g. "put the bread in the microwave").
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub locations: Vec<Location>,
    pub objects: Vec<SemanticObject>,
    pub containers: Vec<Container>,
    pub destinations: Vec<LocationId>,
    pub robot_starts: Vec<LocationId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id", rename_all = "kebab-case")]
pub enum Target {
    Location(LocationId),
    Object(ObjectId),
    Container(ContainerId),
}

/// One skill applied to one entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(tag = "action", content = "target", rename_all = "kebab-case")]
pub enum Decision {
    GoTo(Target),
    Grab(ObjectId),
    PutDown(LocationId),
    OpenDoor(ContainerId),
    Idle,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RobotState {
    pub at: LocationId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holding: Option<ObjectId>,
}

/// Where an object currently is. A held object has no location of its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum Placement {
    At {
        location: LocationId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inside: Option<ContainerId>,
    },
    Held {
        robot: RobotId,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorldState {
    /// Number of joint decisions executed so far.
    pub time: usize,
    pub robots: Vec<RobotState>,
    pub objects: Vec<Placement>,
    pub containers: Vec<Door>,
    #[serde(default)]
    pub safety_violated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointDecision(pub Vec<Decision>);

impl JointDecision {
    pub fn idle(num_robots: usize) -> Self {
        JointDecision(vec![Decision::Idle; num_robots])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<JointDecision>,
}

impl Plan {
    pub fn all_idle(num_robots: usize, horizon: usize) -> Self {
        Plan {
            steps: vec![JointDecision::idle(num_robots); horizon],
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Error, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Infeasibility {
    #[error("robot is not at the target")]
    NotAtTarget,
    #[error("container is closed")]
    ContainerClosed,
    #[error("robot is already holding an object")]
    HandsFull,
    #[error("robot is not holding anything")]
    HandsEmpty,
    #[error("no such entity")]
    NoSuchEntity,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", rename_all = "kebab-case")]
pub enum StepError {
    #[error("joint decision has {got} entries, team has {expected} robots")]
    Arity { expected: usize, got: usize },
    #[error("robot {robot}: {reason}")]
    Infeasible { robot: RobotId, reason: Infeasibility },
    #[error("robots {first} and {second} both grab object {}", object.0)]
    Conflict {
        object: ObjectId,
        first: RobotId,
        second: RobotId,
    },
}

impl Environment {
    pub fn empty() -> Self {
        Environment {
            locations: Vec::new(),
            objects: Vec::new(),
            containers: Vec::new(),
            destinations: Vec::new(),
            robot_starts: Vec::new(),
        }
    }

    pub fn num_robots(&self) -> usize {
        self.robot_starts.len()
    }

    /// Checks id density and cross references.
    pub fn validate(&self) -> Result<(), String> {
        for (i, l) in self.locations.iter().enumerate() {
            if l.id.0 != i {
                return Err(format!("location at index {i} has id {}", l.id.0));
            }
        }
        for (i, c) in self.containers.iter().enumerate() {
            if c.id.0 != i {
                return Err(format!("container at index {i} has id {}", c.id.0));
            }
            if self.location(c.at).is_none() {
                return Err(format!("container {i} references missing location"));
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            if o.id.0 != i {
                return Err(format!("object at index {i} has id {}", o.id.0));
            }
            if self.location(o.at).is_none() {
                return Err(format!("object {i} references missing location"));
            }
            if let Some(c) = o.inside {
                match self.container(c) {
                    Some(c) if c.at == o.at => {}
                    Some(_) => return Err(format!("object {i} is inside a container elsewhere")),
                    None => return Err(format!("object {i} references missing container")),
                }
            }
        }
        for d in &self.destinations {
            match self.location(*d) {
                Some(l) if l.kind != LocationKind::ObjectSite => {}
                Some(_) => return Err(format!("destination {} is an object site", d.0)),
                None => return Err(format!("destination {} does not exist", d.0)),
            }
        }
        for s in &self.robot_starts {
            if self.location(*s).is_none() {
                return Err(format!("robot start {} does not exist", s.0));
            }
        }
        Ok(())
    }

    pub fn location(&self, id: LocationId) -> Option<&Location> {
        self.locations.get(id.0)
    }

    pub fn object(&self, id: ObjectId) -> Option<&SemanticObject> {
        self.objects.get(id.0)
    }

    pub fn container(&self, id: ContainerId) -> Option<&Container> {
        self.containers.get(id.0)
    }

    /// Container whose site is `loc`, if any.
    pub fn container_at(&self, loc: LocationId) -> Option<&Container> {
        self.containers.iter().find(|c| c.at == loc)
    }

    /// The `GoTo` decision that reaches a destination. Destinations at a
    /// container's site are reached by going to the container.
    pub fn goto_for_destination(&self, loc: LocationId) -> Decision {
        match self.container_at(loc) {
            Some(c) => Decision::GoTo(Target::Container(c.id)),
            None => Decision::GoTo(Target::Location(loc)),
        }
    }

    pub fn initial_state(&self) -> WorldState {
        WorldState {
            time: 0,
            robots: self
                .robot_starts
                .iter()
                .map(|&at| RobotState { at, holding: None })
                .collect(),
            objects: self
                .objects
                .iter()
                .map(|o| Placement::At {
                    location: o.at,
                    inside: o.inside,
                })
                .collect(),
            containers: self.containers.iter().map(|c| c.door).collect(),
            safety_violated: false,
        }
    }

    fn resolve(&self, state: &WorldState, target: Target) -> Result<LocationId, Infeasibility> {
        match target {
            Target::Location(l) => self
                .location(l)
                .map(|l| l.id)
                .ok_or(Infeasibility::NoSuchEntity),
            Target::Object(o) => match state.objects.get(o.0) {
                Some(Placement::At { location, .. }) => Ok(*location),
                Some(Placement::Held { robot }) => Ok(state.robots[*robot].at),
                None => Err(Infeasibility::NoSuchEntity),
            },
            Target::Container(c) => self
                .container(c)
                .map(|c| c.at)
                .ok_or(Infeasibility::NoSuchEntity),
        }
    }

    /// Precondition check only; `state` is left untouched.
    pub fn check_decision(
        &self,
        state: &WorldState,
        robot: RobotId,
        decision: &Decision,
    ) -> Result<(), Infeasibility> {
        let rs = state.robots.get(robot).ok_or(Infeasibility::NoSuchEntity)?;
        match *decision {
            Decision::Idle => Ok(()),
            Decision::GoTo(target) => self.resolve(state, target).map(|_| ()),
            Decision::Grab(o) => {
                let placement = state.objects.get(o.0).ok_or(Infeasibility::NoSuchEntity)?;
                if rs.holding.is_some() {
                    return Err(Infeasibility::HandsFull);
                }
                match *placement {
                    Placement::Held { .. } => Err(Infeasibility::NotAtTarget),
                    Placement::At { location, .. } if location != rs.at => {
                        Err(Infeasibility::NotAtTarget)
                    }
                    Placement::At {
                        inside: Some(c), ..
                    } if state.containers[c.0] == Door::Closed => {
                        Err(Infeasibility::ContainerClosed)
                    }
                    Placement::At { .. } => Ok(()),
                }
            }
            Decision::PutDown(dest) => {
                if self.location(dest).is_none() {
                    return Err(Infeasibility::NoSuchEntity);
                }
                if rs.holding.is_none() {
                    return Err(Infeasibility::HandsEmpty);
                }
                if rs.at != dest {
                    return Err(Infeasibility::NotAtTarget);
                }
                Ok(())
            }
            Decision::OpenDoor(c) => {
                let container = self.container(c).ok_or(Infeasibility::NoSuchEntity)?;
                if container.at != rs.at {
                    return Err(Infeasibility::NotAtTarget);
                }
                Ok(())
            }
        }
    }

    fn apply_unchecked(&self, state: &mut WorldState, robot: RobotId, decision: &Decision) {
        match *decision {
            Decision::Idle => {}
            Decision::GoTo(target) => {
                let at = self.resolve(state, target).expect("checked");
                state.robots[robot].at = at;
            }
            Decision::Grab(o) => {
                state.objects[o.0] = Placement::Held { robot };
                state.robots[robot].holding = Some(o);
            }
            Decision::PutDown(dest) => {
                let o = state.robots[robot].holding.take().expect("checked");
                state.objects[o.0] = Placement::At {
                    location: dest,
                    inside: None,
                };
            }
            Decision::OpenDoor(c) => state.containers[c.0] = Door::Open,
        }
    }

    /// Executes one robot's decision in isolation.
    pub fn apply_decision(
        &self,
        state: &WorldState,
        robot: RobotId,
        decision: &Decision,
    ) -> Result<WorldState, Infeasibility> {
        self.check_decision(state, robot, decision)?;
        let mut next = state.clone();
        self.apply_unchecked(&mut next, robot, decision);
        Ok(next)
    }

    /// Executes a joint decision. Preconditions are evaluated against the
    /// state at the start of the step, then effects are applied in robot-index
    /// order and time advances by one.
    pub fn apply_joint(
        &self,
        state: &WorldState,
        joint: &JointDecision,
    ) -> Result<WorldState, StepError> {
        if joint.0.len() != state.robots.len() {
            return Err(StepError::Arity {
                expected: state.robots.len(),
                got: joint.0.len(),
            });
        }
        for (robot, d) in joint.0.iter().enumerate() {
            self.check_decision(state, robot, d)
                .map_err(|reason| StepError::Infeasible { robot, reason })?;
        }
        if let Some((object, first, second)) = grab_conflict(&joint.0) {
            return Err(StepError::Conflict {
                object,
                first,
                second,
            });
        }
        let mut next = state.clone();
        for (robot, d) in joint.0.iter().enumerate() {
            self.apply_unchecked(&mut next, robot, d);
        }
        next.time += 1;
        Ok(next)
    }

    /// [`Environment::apply_joint`] plus safety bookkeeping.
    pub fn step(
        &self,
        state: &WorldState,
        joint: &JointDecision,
        safety: Option<&SafetyConstraint>,
    ) -> Result<WorldState, StepError> {
        let mut next = self.apply_joint(state, joint)?;
        if let Some(s) = safety {
            if let Some(d) = joint.0.get(s.robot) {
                next.safety_violated |= s.is_violated_by(d);
            }
        }
        Ok(next)
    }

    /// [`Environment::step`] for plans that may already have gone wrong: a
    /// decision whose preconditions fail at the start of the step, or a second
    /// Grab of an object grabbed earlier in the same step, has no effect.
    pub fn step_lenient(
        &self,
        state: &WorldState,
        joint: &JointDecision,
        safety: Option<&SafetyConstraint>,
    ) -> WorldState {
        let mut next = state.clone();
        let mut grabbed = Vec::new();
        for (robot, d) in joint.0.iter().enumerate() {
            if self.check_decision(state, robot, d).is_err() {
                continue;
            }
            if let Decision::Grab(o) = d {
                if grabbed.contains(o) {
                    continue;
                }
                grabbed.push(*o);
            }
            self.apply_unchecked(&mut next, robot, d);
        }
        next.time += 1;
        if let Some(s) = safety {
            if let Some(d) = joint.0.get(s.robot) {
                next.safety_violated |= s.is_violated_by(d);
            }
        }
        next
    }

    /// True iff no safety violation was recorded and every sub-task can be
    /// matched to a distinct, placed object with the right label at one of its
    /// allowed destinations.
    pub fn mission_satisfied(&self, state: &WorldState, mission: &Mission) -> bool {
        if state.safety_violated {
            return false;
        }
        self.unsatisfied_count(state, mission) == 0
    }

    /// Number of sub-tasks left unmatched by a maximum matching.
    pub fn unsatisfied_count(&self, state: &WorldState, mission: &Mission) -> usize {
        let candidates: Vec<Vec<usize>> = mission
            .sub_tasks
            .iter()
            .map(|task| {
                self.objects
                    .iter()
                    .filter(|o| o.label == task.object_label)
                    .filter(|o| match state.objects[o.id.0] {
                        Placement::At { location, .. } => task.destinations.contains(&location),
                        Placement::Held { .. } => false,
                    })
                    .map(|o| o.id.0)
                    .collect()
            })
            .collect();
        mission.sub_tasks.len() - max_matching(&candidates, self.objects.len())
    }

    /// Human-readable entity name, unique within the environment.
    pub fn entity_name(&self, target: Target) -> String {
        match target {
            Target::Location(l) => self
                .location(l)
                .map(|x| format!("{}#L{}", x.label, l.0))
                .unwrap_or_else(|| format!("?L{}", l.0)),
            Target::Object(o) => self
                .object(o)
                .map(|x| format!("{}#O{}", x.label, o.0))
                .unwrap_or_else(|| format!("?O{}", o.0)),
            Target::Container(c) => self
                .container(c)
                .map(|x| format!("{}#C{}", x.label, c.0))
                .unwrap_or_else(|| format!("?C{}", c.0)),
        }
    }

    pub fn describe(&self, decision: &Decision) -> String {
        match *decision {
            Decision::GoTo(t) => format!("go to {}", self.entity_name(t)),
            Decision::Grab(o) => format!("grab {}", self.entity_name(Target::Object(o))),
            Decision::PutDown(l) => {
                format!("put object down at {}", self.entity_name(Target::Location(l)))
            }
            Decision::OpenDoor(c) => {
                format!("open door of {}", self.entity_name(Target::Container(c)))
            }
            Decision::Idle => "remain idle".to_string(),
        }
    }
}

fn grab_conflict(decisions: &[Decision]) -> Option<(ObjectId, RobotId, RobotId)> {
    for (i, a) in decisions.iter().enumerate() {
        if let Decision::Grab(o) = a {
            for (j, b) in decisions.iter().enumerate().skip(i + 1) {
                if *b == Decision::Grab(*o) {
                    return Some((*o, i, j));
                }
            }
        }
    }
    None
}

/// Kuhn's augmenting-path bipartite matching; returns the matching size.
fn max_matching(candidates: &[Vec<usize>], right: usize) -> usize {
    fn augment(
        u: usize,
        candidates: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &candidates[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, candidates, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }
    let mut owner = vec![None; right];
    let mut size = 0;
    for u in 0..candidates.len() {
        let mut seen = vec![false; right];
        if augment(u, candidates, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "failure", rename_all = "kebab-case")]
pub enum ValidationFailure {
    TooLong { length: usize, horizon: usize },
    Infeasible { t: usize, error: StepError },
    SafetyViolation { t: usize },
    MissionIncomplete,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<StepError>,
    pub safety_violated: bool,
    pub mission_satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub complete: bool,
    /// Earliest step after which the mission stays satisfied.
    pub steps_used: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<ValidationFailure>,
    pub trace: Vec<StepOutcome>,
}

/// Simulates `plan` from the scenario's initial state.
///
/// Safety violations fail the plan but simulation continues so the trace
/// shows everything that happened. An infeasible step ends simulation.
pub fn validate_plan(scenario: &Scenario, plan: &Plan) -> ValidationReport {
    let env = &scenario.env;
    let mission = &scenario.mission;
    let safety = mission.safety.as_ref();
    let mut state = env.initial_state();
    let mut trace = Vec::with_capacity(plan.len());
    let mut failure = None;
    let mut first_violation = None;
    let mut satisfied_since = if env.mission_satisfied(&state, mission) {
        Some(0)
    } else {
        None
    };

    if plan.len() > scenario.horizon {
        failure = Some(ValidationFailure::TooLong {
            length: plan.len(),
            horizon: scenario.horizon,
        });
    }

    for (i, joint) in plan.steps.iter().enumerate() {
        let t = i + 1;
        match env.step(&state, joint, safety) {
            Ok(next) => {
                if next.safety_violated && first_violation.is_none() {
                    first_violation = Some(t);
                }
                let satisfied = env.mission_satisfied(&next, mission);
                satisfied_since = match (satisfied, satisfied_since) {
                    (true, None) => Some(t),
                    (true, s) => s,
                    (false, _) => None,
                };
                trace.push(StepOutcome {
                    t,
                    error: None,
                    safety_violated: next.safety_violated,
                    mission_satisfied: satisfied,
                });
                state = next;
            }
            Err(error) => {
                trace.push(StepOutcome {
                    t,
                    error: Some(error.clone()),
                    safety_violated: state.safety_violated,
                    mission_satisfied: false,
                });
                failure.get_or_insert(ValidationFailure::Infeasible { t, error });
                satisfied_since = None;
                break;
            }
        }
    }

    if failure.is_none() {
        if let Some(t) = first_violation {
            failure = Some(ValidationFailure::SafetyViolation { t });
        } else if satisfied_since.is_none() {
            failure = Some(ValidationFailure::MissionIncomplete);
        }
    }

    ValidationReport {
        complete: failure.is_none(),
        steps_used: satisfied_since.unwrap_or(plan.len()),
        failure,
        trace,
    }
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Decision::GoTo(Target::Location(l)) => write!(f, "GoTo(L{})", l.0),
            Decision::GoTo(Target::Object(o)) => write!(f, "GoTo(O{})", o.0),
            Decision::GoTo(Target::Container(c)) => write!(f, "GoTo(C{})", c.0),
            Decision::Grab(o) => write!(f, "Grab(O{})", o.0),
            Decision::PutDown(l) => write!(f, "PutDown(L{})", l.0),
            Decision::OpenDoor(c) => write!(f, "OpenDoor(C{})", c.0),
            Decision::Idle => f.write_str("Idle"),
        }
    }
}

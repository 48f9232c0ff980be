//! Canonical ground-truth behaviour: a fixed sub-task assignment computed from
//! the initial state and a per-robot policy that depends only on the current
//! world state. Because the policy is state-pure, it can finish the mission
//! from any state reached by following it, which makes it usable both as the
//! oracle plan and as a completion certificate during feasibility search.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::scenario::Scenario;
use crate::world::{
    Decision, Door, JointDecision, ObjectId, Placement, Plan, RobotId, Target, WorldState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssignedTask {
    /// Index into the mission's sub-task list.
    pub task: usize,
    pub robot: RobotId,
    pub object: ObjectId,
}

/// One entry per sub-task, in mission order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub tasks: Vec<AssignedTask>,
}

impl Assignment {
    /// Greedy list scheduling: each sub-task goes to the robot that would
    /// finish it earliest given the work already assigned, ties to the lowest
    /// index. The object is the lowest-id unclaimed object with the right
    /// label that the robot is allowed to touch.
    pub fn compute(scenario: &Scenario) -> Result<Self, String> {
        let env = &scenario.env;
        let mission = &scenario.mission;
        let mut finish = vec![0usize; scenario.num_robots];
        let mut claimed: HashSet<ObjectId> = HashSet::new();
        let mut tasks = Vec::with_capacity(mission.sub_tasks.len());
        for (ti, task) in mission.sub_tasks.iter().enumerate() {
            let mut best: Option<(usize, RobotId, ObjectId, usize)> = None;
            for robot in 0..scenario.num_robots {
                let Some(obj) = env.objects.iter().find(|o| {
                    o.label == task.object_label
                        && !claimed.contains(&o.id)
                        && !mission.forbids(robot, o.id)
                }) else {
                    continue;
                };
                let enclosed = obj
                    .inside
                    .is_some_and(|c| env.containers[c.0].door == Door::Closed);
                let cost = if enclosed { 5 } else { 4 };
                let key = finish[robot] + cost;
                if best.is_none_or(|b| key < b.0) {
                    best = Some((key, robot, obj.id, cost));
                }
            }
            let (_, robot, object, cost) =
                best.ok_or_else(|| format!("no robot can serve sub-task {ti}"))?;
            finish[robot] += cost;
            claimed.insert(object);
            tasks.push(AssignedTask {
                task: ti,
                robot,
                object,
            });
        }
        Ok(Assignment { tasks })
    }
}

/// The ground-truth policy bound to one scenario.
#[derive(Debug, Clone)]
pub struct Oracle<'a> {
    pub scenario: &'a Scenario,
    pub assignment: Assignment,
}

impl<'a> Oracle<'a> {
    pub fn new(scenario: &'a Scenario) -> Result<Self> {
        let assignment = Assignment::compute(scenario).map_err(Error::Internal)?;
        Ok(Oracle {
            scenario,
            assignment,
        })
    }

    fn delivered(&self, state: &WorldState, a: &AssignedTask) -> bool {
        let dests = &self.scenario.mission.sub_tasks[a.task].destinations;
        matches!(state.objects[a.object.0], Placement::At { location, .. } if dests.contains(&location))
    }

    /// Next decision of `robot` in `state`.
    pub fn policy(&self, state: &WorldState, robot: RobotId) -> Decision {
        let env = &self.scenario.env;
        let rs = &state.robots[robot];
        if let Some(held) = rs.holding {
            let dests = self
                .assignment
                .tasks
                .iter()
                .find(|a| a.object == held)
                .map(|a| &self.scenario.mission.sub_tasks[a.task].destinations)
                .unwrap_or(&env.destinations);
            return match dests.first() {
                _ if dests.contains(&rs.at) => Decision::PutDown(rs.at),
                Some(d) => env.goto_for_destination(*d),
                None => Decision::Idle,
            };
        }
        let Some(head) = self
            .assignment
            .tasks
            .iter()
            .find(|a| a.robot == robot && !self.delivered(state, a))
        else {
            return Decision::Idle;
        };
        let Placement::At { location, inside } = state.objects[head.object.0] else {
            return Decision::Idle;
        };
        let closed = inside.filter(|c| state.containers[c.0] == Door::Closed);
        match (rs.at == location, closed) {
            (false, Some(c)) => Decision::GoTo(Target::Container(c)),
            (false, None) => Decision::GoTo(Target::Object(head.object)),
            (true, Some(c)) => Decision::OpenDoor(c),
            (true, None) => Decision::Grab(head.object),
        }
    }

    pub fn joint_policy(&self, state: &WorldState) -> JointDecision {
        JointDecision(
            (0..self.scenario.num_robots)
                .map(|r| self.policy(state, r))
                .collect(),
        )
    }

    /// Runs the policy from `state` until the mission holds or `limit` joint
    /// steps have been executed overall. `committed` fixes some robots'
    /// decisions for the first step. Returns the executed joint decisions on
    /// success; `None` when a step fails, safety is violated or time runs out.
    pub fn greedy_completion(
        &self,
        state: &WorldState,
        committed: &[Option<Decision>],
        limit: usize,
    ) -> Option<Vec<JointDecision>> {
        let env = &self.scenario.env;
        let mission = &self.scenario.mission;
        let safety = mission.safety.as_ref();
        if committed.iter().all(Option::is_none) && env.mission_satisfied(state, mission) {
            return Some(Vec::new());
        }
        let mut s = state.clone();
        let mut steps = Vec::new();
        while s.time < limit {
            let mut joint = self.joint_policy(&s);
            if steps.is_empty() {
                for (r, c) in committed.iter().enumerate() {
                    if let Some(d) = c {
                        joint.0[r] = *d;
                    }
                }
            }
            s = env.step(&s, &joint, safety).ok()?;
            if s.safety_violated {
                return None;
            }
            steps.push(joint);
            if env.mission_satisfied(&s, mission) {
                return Some(steps);
            }
        }
        None
    }

    /// Length of the unpadded canonical plan, if the policy completes within
    /// `limit` steps.
    pub fn canonical_len(&self, limit: usize) -> Option<usize> {
        self.greedy_completion(&self.scenario.env.initial_state(), &[], limit)
            .map(|s| s.len())
    }
}

/// Canonical ground-truth plan padded with `Idle` to the scenario horizon.
/// The plan is checked by the world simulator before it is returned.
pub fn oracle_plan(scenario: &Scenario) -> Result<Plan> {
    let oracle = Oracle::new(scenario)?;
    let init = scenario.env.initial_state();
    let mut steps = oracle
        .greedy_completion(&init, &[], scenario.horizon)
        .ok_or_else(|| Error::Internal(format!("oracle cannot finish scenario {:016x}", scenario.id)))?;
    steps.resize(scenario.horizon, JointDecision::idle(scenario.num_robots));
    let plan = Plan { steps };
    let report = crate::world::validate_plan(scenario, &plan);
    if !report.complete {
        return Err(Error::Internal(format!(
            "oracle plan for scenario {:016x} fails validation: {:?}",
            scenario.id, report.failure
        )));
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::tests::fixture;
    use crate::scenario::{Mission, SafetyConstraint, Skill, SubTask, SCHEMA_VERSION};
    use crate::world::{
        Environment, Location, LocationId, LocationKind, SemanticObject,
    };

    /// One robot, four objects on two counters, sink and table as
    /// destinations; no containers.
    fn four_task_scenario() -> Scenario {
        let loc = |id, label: &str, kind| Location {
            id: LocationId(id),
            label: label.into(),
            kind,
        };
        let obj = |id, label: &str, at| SemanticObject {
            id: ObjectId(id),
            label: label.into(),
            at: LocationId(at),
            inside: None,
        };
        let env = Environment {
            locations: vec![
                loc(0, "Sink", LocationKind::Destination),
                loc(1, "Table", LocationKind::Destination),
                loc(2, "Counter", LocationKind::ObjectSite),
                loc(3, "Shelf", LocationKind::ObjectSite),
            ],
            objects: vec![
                obj(0, "Tomato", 2),
                obj(1, "Apple", 3),
                obj(2, "Kettle", 2),
                obj(3, "Bread", 3),
            ],
            containers: vec![],
            destinations: vec![LocationId(0), LocationId(1)],
            robot_starts: vec![LocationId(1)],
        };
        let to = |label: &str, d| SubTask {
            object_label: label.into(),
            destinations: vec![LocationId(d)],
        };
        Scenario {
            schema_version: SCHEMA_VERSION,
            id: 3,
            num_robots: 1,
            skills: Skill::ALL.to_vec(),
            mission: Mission {
                sub_tasks: vec![to("Tomato", 0), to("Apple", 0), to("Kettle", 1), to("Bread", 1)],
                safety: None,
            },
            horizon: 16,
            env,
            order_seed: 0,
        }
    }

    #[test]
    fn four_deliveries_take_sixteen_steps() {
        let sc = four_task_scenario();
        let plan = oracle_plan(&sc).unwrap();
        assert_eq!(plan.len(), 16);
        assert_eq!(Oracle::new(&sc).unwrap().canonical_len(100), Some(16));
        let first: Vec<String> = plan.steps[..4].iter().map(|j| j.0[0].to_string()).collect();
        assert_eq!(first, ["GoTo(O0)", "Grab(O0)", "GoTo(L0)", "PutDown(L0)"]);
    }

    #[test]
    fn enclosed_object_expands_to_five_steps() {
        let mut sc = fixture(1, 20);
        sc.mission.sub_tasks.truncate(1);
        let plan = oracle_plan(&sc).unwrap();
        let names: Vec<String> = plan.steps.iter().take(5).map(|j| j.0[0].to_string()).collect();
        assert_eq!(names, ["GoTo(C0)", "OpenDoor(C0)", "Grab(O0)", "GoTo(L0)", "PutDown(L0)"]);
        assert!(plan.steps[5..].iter().all(|j| j.0 == vec![Decision::Idle]));
    }

    #[test]
    fn three_robots_two_tasks_leaves_the_last_robot_idle() {
        let sc = fixture(3, 10);
        let plan = oracle_plan(&sc).unwrap();
        assert!(plan.steps.iter().all(|j| j.0[2] == Decision::Idle));
        assert!(plan.steps.iter().any(|j| j.0[0] != Decision::Idle));
        assert!(plan.steps.iter().any(|j| j.0[1] != Decision::Idle));
    }

    #[test]
    fn empty_mission_is_all_idle() {
        let mut sc = fixture(2, 3);
        sc.mission.sub_tasks.clear();
        assert_eq!(oracle_plan(&sc).unwrap(), Plan::all_idle(2, 3));
    }

    #[test]
    fn safety_steers_the_assignment() {
        let mut sc = fixture(2, 10);
        sc.mission.safety = Some(SafetyConstraint {
            robot: 0,
            forbidden_object: ObjectId(0),
        });
        let oracle = Oracle::new(&sc).unwrap();
        let apple = oracle.assignment.tasks[0];
        assert_eq!(apple.robot, 1);
        assert!(crate::world::validate_plan(&sc, &oracle_plan(&sc).unwrap()).complete);
    }

    #[test]
    fn unserviceable_mission_is_an_error() {
        let mut sc = fixture(1, 10);
        sc.mission.safety = Some(SafetyConstraint {
            robot: 0,
            forbidden_object: ObjectId(1),
        });
        assert!(Oracle::new(&sc).is_err());
    }

    #[test]
    fn too_short_horizon_is_reported() {
        let sc = fixture(1, 3);
        assert!(oracle_plan(&sc).is_err());
    }

    #[test]
    fn policy_recovers_a_misplaced_object() {
        let sc = fixture(1, 20);
        let oracle = Oracle::new(&sc).unwrap();
        let env = &sc.env;
        // Take the kettle, then drop it at the fridge area by hand.
        let mut s = env.initial_state();
        for d in [
            Decision::GoTo(Target::Object(ObjectId(1))),
            Decision::Grab(ObjectId(1)),
        ] {
            s = env.apply_decision(&s, 0, &d).unwrap();
        }
        let rest = oracle.greedy_completion(&s, &[], 20).unwrap();
        assert!(!rest.is_empty());
    }
}

//! Scenario distribution: missions, environments, horizons, the decision set
//! and the ground-truth machinery used to label calibration data.

mod feasible;
mod oracle;
mod sampling;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::world::{Decision, Environment, LocationId, ObjectId, RobotId, Target};

pub use feasible::{
    label_sequence, reference_decision, selector_f, FeasibilityConfig, FeasibilityMode, FeasibilitySearch,
    FeasibleSet, LabelStep, LabeledSequence,
};
pub use oracle::{oracle_plan, Assignment, AssignedTask, Oracle};
pub use sampling::{sample_indexed, sample_scenario, DistributionParams, IntRange};

pub const SCHEMA_VERSION: u32 = 1;

/// Skill kinds every robot in a team can execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Skill {
    GoTo,
    Grab,
    PutDown,
    OpenDoor,
    Idle,
}

impl Skill {
    pub const ALL: [Skill; 5] = [
        Skill::GoTo,
        Skill::Grab,
        Skill::PutDown,
        Skill::OpenDoor,
        Skill::Idle,
    ];

    pub fn phrase(&self) -> &'static str {
        match self {
            Skill::GoTo => "go to",
            Skill::Grab => "grab object",
            Skill::PutDown => "put object down",
            Skill::OpenDoor => "open door",
            Skill::Idle => "remain idle",
        }
    }
}

/// Deliver one object carrying `object_label` to any of `destinations`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubTask {
    pub object_label: String,
    pub destinations: Vec<LocationId>,
}

/// `robot` must never go to or grab `forbidden_object`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SafetyConstraint {
    pub robot: RobotId,
    pub forbidden_object: ObjectId,
}

impl SafetyConstraint {
    pub fn is_violated_by(&self, decision: &Decision) -> bool {
        match *decision {
            Decision::Grab(o) | Decision::GoTo(Target::Object(o)) => o == self.forbidden_object,
            _ => false,
        }
    }

    pub fn forbids(&self, robot: RobotId, object: ObjectId) -> bool {
        self.robot == robot && self.forbidden_object == object
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mission {
    pub sub_tasks: Vec<SubTask>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safety: Option<SafetyConstraint>,
}

impl Mission {
    pub fn forbids(&self, robot: RobotId, object: ObjectId) -> bool {
        self.safety.is_some_and(|s| s.forbids(robot, object))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub schema_version: u32,
    pub id: u64,
    pub num_robots: usize,
    pub skills: Vec<Skill>,
    pub mission: Mission,
    pub horizon: usize,
    pub env: Environment,
    /// Seed of the per-step robot order schedule.
    pub order_seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario {:016x}: {m}", self.id)));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema version {}", self.schema_version));
        }
        if let Err(e) = self.env.validate() {
            return bad(e);
        }
        if self.num_robots == 0 || self.num_robots != self.env.num_robots() {
            return bad(format!(
                "{} robots declared, {} start locations",
                self.num_robots,
                self.env.num_robots()
            ));
        }
        if self.horizon == 0 {
            return bad("horizon must be positive".into());
        }
        for (i, task) in self.mission.sub_tasks.iter().enumerate() {
            if !self.env.objects.iter().any(|o| o.label == task.object_label) {
                return bad(format!("sub-task {i} names unknown label {}", task.object_label));
            }
            if task.destinations.is_empty()
                || task.destinations.iter().any(|d| !self.env.destinations.contains(d))
            {
                return bad(format!("sub-task {i} has invalid destinations"));
            }
        }
        if let Some(s) = self.mission.safety {
            if s.robot >= self.num_robots || self.env.object(s.forbidden_object).is_none() {
                return bad("safety constraint references unknown entities".into());
            }
        }
        Ok(())
    }

    pub fn decision_space(&self) -> DecisionSpace {
        DecisionSpace::build(&self.env, &self.skills)
    }

    pub fn load_all(path: &Path) -> Result<Vec<Scenario>> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let scenarios: Vec<Scenario> = if value.is_array() {
            serde_json::from_value(value)?
        } else {
            vec![serde_json::from_value(value)?]
        };
        for s in &scenarios {
            s.validate()?;
        }
        Ok(scenarios)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// The ordered decision set shared by all robots of a scenario.
///
/// Order: `GoTo` over objects, containers and destinations, `Grab` over
/// objects, `PutDown` over destinations, `OpenDoor` over containers, `Idle`.
/// A destination that is a container's site is reached through the
/// container, so it gets no separate `GoTo`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecisionSpace {
    decisions: Vec<Decision>,
    index: HashMap<Decision, usize>,
}

impl DecisionSpace {
    pub fn build(env: &Environment, skills: &[Skill]) -> Self {
        let has = |s: Skill| skills.contains(&s);
        let mut decisions = Vec::new();
        if has(Skill::GoTo) {
            decisions.extend(env.objects.iter().map(|o| Decision::GoTo(Target::Object(o.id))));
            decisions.extend(
                env.containers
                    .iter()
                    .map(|c| Decision::GoTo(Target::Container(c.id))),
            );
            decisions.extend(
                env.destinations
                    .iter()
                    .filter(|d| env.container_at(**d).is_none())
                    .map(|d| Decision::GoTo(Target::Location(*d))),
            );
        }
        if has(Skill::Grab) {
            decisions.extend(env.objects.iter().map(|o| Decision::Grab(o.id)));
        }
        if has(Skill::PutDown) {
            decisions.extend(env.destinations.iter().map(|d| Decision::PutDown(*d)));
        }
        if has(Skill::OpenDoor) {
            decisions.extend(env.containers.iter().map(|c| Decision::OpenDoor(c.id)));
        }
        if has(Skill::Idle) {
            decisions.push(Decision::Idle);
        }
        let index = decisions.iter().enumerate().map(|(i, d)| (*d, i)).collect();
        DecisionSpace { decisions, index }
    }

    pub fn len(&self) -> usize {
        self.decisions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.decisions.is_empty()
    }

    pub fn get(&self, i: usize) -> Decision {
        self.decisions[i]
    }

    pub fn index_of(&self, d: &Decision) -> Option<usize> {
        self.index.get(d).copied()
    }

    pub fn decisions(&self) -> &[Decision] {
        &self.decisions
    }
}

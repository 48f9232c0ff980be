//! Random scenario generator.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::oracle::Oracle;
use super::{Mission, SafetyConstraint, Scenario, Skill, SubTask, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::seeding::{self, tag, StreamRng};
use crate::world::{
    Container, ContainerId, Door, Environment, Location, LocationId, LocationKind, ObjectId,
    SemanticObject,
};

pub const OBJECT_LABELS: [&str; 10] = [
    "Apple", "Kettle", "Tomato", "Bread", "Potato", "Knife", "Coke", "Mug", "Egg", "Lettuce",
];
const DESTINATION_LABELS: [&str; 6] = ["Table", "Sink", "Stove", "Desk", "Shelf", "Bin"];
const SITE_LABELS: [&str; 6] = ["Counter", "Pantry", "Bench", "Windowsill", "Cupboard", "Island"];
const CONTAINER_LABELS: [&str; 4] = ["Fridge", "Microwave", "Cabinet", "Drawer"];

/// Inclusive integer range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntRange {
    pub min: usize,
    pub max: usize,
}

impl IntRange {
    pub const fn new(min: usize, max: usize) -> Self {
        IntRange { min, max }
    }

    pub const fn exactly(n: usize) -> Self {
        IntRange { min: n, max: n }
    }

    fn sample(&self, rng: &mut StreamRng) -> usize {
        rng.random_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionParams {
    pub schema_version: u32,
    pub robots: IntRange,
    pub sub_tasks: IntRange,
    pub objects: IntRange,
    pub containers: IntRange,
    /// Destinations that are ordinary locations.
    pub destinations: IntRange,
    /// Containers whose site is also a destination ("put it in the fridge").
    pub container_destinations: IntRange,
    /// Number of distinct object labels drawn from.
    pub label_pool: usize,
    pub enclosure_prob: f64,
    pub safety_prob: f64,
    pub multi_destination_prob: f64,
    pub horizon_slack: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for DistributionParams {
    /// Desk-scale profile: |S| between 7 and 15, horizons up to about 8.
    fn default() -> Self {
        DistributionParams {
            schema_version: SCHEMA_VERSION,
            robots: IntRange::new(1, 3),
            sub_tasks: IntRange::new(1, 3),
            objects: IntRange::new(2, 4),
            containers: IntRange::new(0, 1),
            destinations: IntRange::new(1, 2),
            container_destinations: IntRange::exactly(0),
            label_pool: 6,
            enclosure_prob: 0.3,
            safety_prob: 0.3,
            multi_destination_prob: 0.3,
            horizon_slack: 2,
            max_retries: 100,
            seed: 0,
        }
    }
}

impl DistributionParams {
    /// Household-scale configuration with 28 decisions per robot.
    pub fn reference() -> Self {
        DistributionParams {
            objects: IntRange::exactly(8),
            containers: IntRange::exactly(2),
            destinations: IntRange::exactly(3),
            container_destinations: IntRange::exactly(1),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("distribution params: {m}")));
        if self.schema_version != SCHEMA_VERSION {
            return bad("unsupported schema version");
        }
        for (name, r) in [
            ("robots", self.robots),
            ("sub_tasks", self.sub_tasks),
            ("objects", self.objects),
            ("containers", self.containers),
            ("destinations", self.destinations),
            ("container_destinations", self.container_destinations),
        ] {
            if r.min > r.max {
                return bad(&format!("{name} range is empty"));
            }
        }
        if self.robots.min == 0 {
            return bad("at least one robot is required");
        }
        if self.label_pool == 0 || self.label_pool > OBJECT_LABELS.len() {
            return bad("label_pool must be in 1..=10");
        }
        for (name, p) in [
            ("enclosure_prob", self.enclosure_prob),
            ("safety_prob", self.safety_prob),
            ("multi_destination_prob", self.multi_destination_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if self.max_retries == 0 {
            return bad("max_retries must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        p.validate()?;
        Ok(p)
    }
}

/// Draws the `index`-th scenario of the distribution. The same
/// `(params, index)` always yields the same scenario.
pub fn sample_indexed(params: &DistributionParams, index: u64) -> Result<Scenario> {
    let mut rng = seeding::stream(&[params.seed, tag::SCENARIO, index]);
    sample_scenario(params, &mut rng)
}

/// Rejection sampler: draws candidates until one is solvable by the oracle.
pub fn sample_scenario(params: &DistributionParams, rng: &mut StreamRng) -> Result<Scenario> {
    params.validate()?;
    let mut last = String::new();
    for _ in 0..params.max_retries {
        match try_sample(params, rng) {
            Ok(s) => return Ok(s),
            Err(reason) => last = reason,
        }
    }
    Err(Error::Generation {
        retries: params.max_retries,
        reason: last,
    })
}

fn pick_labels(pool: &[&'static str], n: usize, rng: &mut StreamRng) -> Vec<&'static str> {
    if n <= pool.len() {
        pool.choose_multiple(rng, n).copied().collect()
    } else {
        (0..n).map(|_| *pool.choose(rng).expect("nonempty pool")).collect()
    }
}

fn try_sample(p: &DistributionParams, rng: &mut StreamRng) -> Result<Scenario, String> {
    let num_robots = p.robots.sample(rng);
    let k = p.sub_tasks.sample(rng);
    let n_objects = p.objects.sample(rng);
    let n_containers = p.containers.sample(rng);
    let n_dests = p.destinations.sample(rng);
    let n_container_dests = p.container_destinations.sample(rng);
    if n_objects < k {
        return Err(format!("{k} sub-tasks need at least as many objects, got {n_objects}"));
    }
    if n_container_dests > n_containers {
        return Err(format!(
            "{n_container_dests} container destinations but only {n_containers} containers"
        ));
    }
    if k > 0 && n_dests + n_container_dests == 0 {
        return Err("sub-tasks need at least one destination".into());
    }

    let mut locations = Vec::new();
    let mut add = |label: &str, kind| {
        let id = LocationId(locations.len());
        locations.push(Location {
            id,
            label: label.to_string(),
            kind,
        });
        id
    };
    let plain: Vec<LocationId> = pick_labels(&DESTINATION_LABELS, n_dests, rng)
        .into_iter()
        .map(|l| add(l, LocationKind::Destination))
        .collect();
    let n_sites = if n_objects == 0 {
        0
    } else {
        rng.random_range(1..=n_objects.min(SITE_LABELS.len()))
    };
    let sites: Vec<LocationId> = pick_labels(&SITE_LABELS, n_sites, rng)
        .into_iter()
        .map(|l| add(l, LocationKind::ObjectSite))
        .collect();
    let container_labels = pick_labels(&CONTAINER_LABELS, n_containers, rng);
    let containers: Vec<Container> = container_labels
        .iter()
        .enumerate()
        .map(|(i, l)| Container {
            id: ContainerId(i),
            label: l.to_string(),
            at: add(&format!("{l}Area"), LocationKind::ContainerSite),
            door: Door::Closed,
        })
        .collect();
    if locations.is_empty() {
        return Err("environment has no locations".into());
    }

    let pool = &OBJECT_LABELS[..p.label_pool];
    let objects: Vec<SemanticObject> = (0..n_objects)
        .map(|i| {
            let label = pool.choose(rng).expect("nonempty pool").to_string();
            let enclosed = !containers.is_empty() && rng.random_bool(p.enclosure_prob);
            let (at, inside) = if enclosed {
                let c = containers.choose(rng).expect("nonempty");
                (c.at, Some(c.id))
            } else {
                (*sites.choose(rng).expect("objects imply sites"), None)
            };
            SemanticObject {
                id: ObjectId(i),
                label,
                at,
                inside,
            }
        })
        .collect();

    let mut destinations = plain.clone();
    let mut cdest: Vec<LocationId> = containers.iter().map(|c| c.at).collect();
    cdest.shuffle(rng);
    cdest.truncate(n_container_dests);
    cdest.sort();
    destinations.extend(cdest);

    let mut chosen: Vec<usize> = (0..n_objects).collect();
    chosen.shuffle(rng);
    chosen.truncate(k);
    let mut sub_tasks = Vec::with_capacity(k);
    for oi in chosen {
        let label = &objects[oi].label;
        let mut allowed: Vec<LocationId> = destinations
            .iter()
            .copied()
            .filter(|d| !objects.iter().any(|o| &o.label == label && o.at == *d))
            .collect();
        if allowed.is_empty() {
            return Err(format!("every destination already holds a {label}"));
        }
        allowed.shuffle(rng);
        let count = if allowed.len() >= 2 && rng.random_bool(p.multi_destination_prob) {
            2
        } else {
            1
        };
        allowed.truncate(count);
        sub_tasks.push(SubTask {
            object_label: label.clone(),
            destinations: allowed,
        });
    }

    let safety = (n_objects > 0 && rng.random_bool(p.safety_prob)).then(|| SafetyConstraint {
        robot: rng.random_range(0..num_robots),
        forbidden_object: ObjectId(rng.random_range(0..n_objects)),
    });

    let start_pool: Vec<LocationId> = if plain.is_empty() {
        locations.iter().map(|l| l.id).collect()
    } else {
        plain
    };
    let robot_starts = (0..num_robots)
        .map(|_| *start_pool.choose(rng).expect("nonempty"))
        .collect();

    let mut scenario = Scenario {
        schema_version: SCHEMA_VERSION,
        id: rng.random(),
        num_robots,
        skills: Skill::ALL.to_vec(),
        mission: Mission { sub_tasks, safety },
        horizon: 0,
        env: Environment {
            locations,
            objects,
            containers,
            destinations,
            robot_starts,
        },
        order_seed: rng.random(),
    };
    let limit = 8 * (k + 1) * (num_robots + 1);
    let len = Oracle::new(&scenario)
        .map_err(|e| e.to_string())?
        .canonical_len(limit)
        .ok_or("oracle cannot finish the mission")?;
    scenario.horizon = (len + p.horizon_slack).max(1);
    scenario.validate().map_err(|e| e.to_string())?;
    Ok(scenario)
}

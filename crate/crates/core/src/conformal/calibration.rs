//! Calibration records, their JSONL files and the quantile summary.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{conformal_quantile, min_calibration_size, sequence_ncs, Quantile};
use crate::context::{OrderSchedule, OrderedSet};
use crate::error::{Error, Result};
use crate::scenario::{
    label_sequence, sample_indexed, DistributionParams, FeasibilityConfig, LabelStep, Scenario,
};
use crate::scorer::{CallCounter, Scorer};
use crate::seeding::{self, tag};

pub const RECORD_VERSION: u32 = 1;

pub type LabelEntry = LabelStep;

fn is_false(b: &bool) -> bool {
    !*b
}

/// One calibration example: a labeled decision sequence and the normalized
/// score of each labeled decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub version: u32,
    pub scenario_id: u64,
    pub num_robots: usize,
    pub horizon: usize,
    /// Scores are per joint step (length H) rather than per iteration.
    #[serde(default, skip_serializing_if = "is_false")]
    pub joint: bool,
    /// Robot order used at each step; the prompt of iteration k is rebuilt by
    /// folding the labels of iterations before k into the scenario's initial
    /// context under these orders.
    pub orders: Vec<OrderedSet>,
    pub labels: Vec<LabelEntry>,
    pub scores: Vec<f64>,
}

impl CalibrationRecord {
    pub fn validate(&self) -> Result<()> {
        let t = self.num_robots * self.horizon;
        let want = if self.joint { self.horizon } else { t };
        if self.version != RECORD_VERSION
            || self.labels.len() != t
            || self.scores.len() != want
            || self.orders.len() != self.horizon
            || self.scores.iter().any(|s| !(0.0..=1.0).contains(s))
        {
            return Err(Error::Config(format!(
                "calibration record for scenario {:016x} is inconsistent",
                self.scenario_id
            )));
        }
        Ok(())
    }

    pub fn min_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn ncs(&self) -> Result<f64> {
        sequence_ncs(&self.scores)
    }
}

/// Labels `scenario` with `scorer` and records the labeled decisions'
/// scores.
pub fn calibration_record(
    scenario: &Arc<Scenario>,
    scorer: &dyn Scorer,
    feasibility: &FeasibilityConfig,
) -> Result<CalibrationRecord> {
    let schedule = OrderSchedule::for_scenario(scenario);
    let mut counter = CallCounter::default();
    let labels = label_sequence(scenario, scorer, &schedule, feasibility, &mut counter)?;
    Ok(CalibrationRecord {
        version: RECORD_VERSION,
        scenario_id: scenario.id,
        num_robots: scenario.num_robots,
        horizon: scenario.horizon,
        joint: false,
        scores: labels.steps.iter().map(|s| s.score).collect(),
        orders: labels.orders,
        labels: labels.steps,
    })
}

/// Samples `m` calibration scenarios keyed by `seed` and records them.
/// Scenarios are scored in parallel when the scorer allows it.
pub fn build_calibration_set(
    params: &DistributionParams,
    m: usize,
    scorer: &dyn Scorer,
    seed: u64,
    feasibility: &FeasibilityConfig,
) -> Result<Vec<CalibrationRecord>> {
    if m == 0 {
        return Err(Error::Argument("calibration size M must be at least 1".into()));
    }
    let one = |i: usize| -> Result<CalibrationRecord> {
        let index = seeding::mix(&[seed, tag::CALIBRATION, i as u64]);
        let scenario = Arc::new(sample_indexed(params, index)?);
        calibration_record(&scenario, scorer, feasibility)
    };
    if scorer.concurrency_safe() {
        (0..m).into_par_iter().map(one).collect()
    } else {
        (0..m).map(one).collect()
    }
}

pub fn write_jsonl(path: &Path, records: &[CalibrationRecord]) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CalibrationRecord>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CalibrationRecord = serde_json::from_str(&line)?;
        record.validate()?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Small report describing a calibration outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub quantile: Quantile<f64>,
    /// Smallest calibration size for which this α gives a finite quantile.
    pub min_m: usize,
    /// Ten equal-width bins over [0, 1] of the calibration NCS values.
    pub ncs_histogram: Vec<HistogramBin>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl QuantileSummary {
    pub fn from_records(records: &[CalibrationRecord], alpha: f64) -> Result<Self> {
        let ncs = records
            .iter()
            .map(CalibrationRecord::ncs)
            .collect::<Result<Vec<f64>>>()?;
        Self::from_ncs(&ncs, alpha)
    }

    pub fn from_ncs(ncs: &[f64], alpha: f64) -> Result<Self> {
        let quantile = conformal_quantile(ncs, alpha)?;
        let min_m = min_calibration_size(alpha);
        let mut ncs_histogram: Vec<HistogramBin> = (0..10)
            .map(|i| HistogramBin {
                lo: i as f64 / 10.0,
                hi: (i + 1) as f64 / 10.0,
                count: 0,
            })
            .collect();
        for x in ncs {
            ncs_histogram[((x * 10.0).floor() as usize).min(9)].count += 1;
        }
        let warning = quantile.is_full_set().then(|| {
            format!(
                "M = {} is too small for alpha = {alpha}: rank {} exceeds M, every local set is \
                 the full decision set; at least M = {min_m} calibration sequences are needed",
                quantile.m, quantile.rank
            )
        });
        Ok(QuantileSummary {
            quantile,
            min_m,
            ncs_histogram,
            warning,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::OracleIndicator;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_size_is_rejected() {
        let p = DistributionParams::default();
        assert!(matches!(
            build_calibration_set(&p, 0, &OracleIndicator, 1, &FeasibilityConfig::default()),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn indicator_records_have_the_softmax_top_score() {
        let p = DistributionParams::default();
        let records =
            build_calibration_set(&p, 6, &OracleIndicator, 3, &FeasibilityConfig::default()).unwrap();
        let e = std::f64::consts::E;
        for (i, r) in records.iter().enumerate() {
            r.validate().unwrap();
            let index = seeding::mix(&[3, tag::CALIBRATION, i as u64]);
            let s = sample_indexed(&p, index).unwrap().decision_space().len() as f64;
            for score in &r.scores {
                assert_abs_diff_eq!(*score, e / (e + s - 1.0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn jsonl_round_trip_is_byte_stable() {
        let p = DistributionParams::default();
        let cfg = FeasibilityConfig::default();
        let a = build_calibration_set(&p, 4, &OracleIndicator, 8, &cfg).unwrap();
        let b = build_calibration_set(&p, 4, &OracleIndicator, 8, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (pa, pb) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_jsonl(&pa, &a).unwrap();
        write_jsonl(&pb, &b).unwrap();
        assert_eq!(std::fs::read(&pa).unwrap(), std::fs::read(&pb).unwrap());
        assert_eq!(read_jsonl(&pa).unwrap(), a);
    }

    #[test]
    fn summary_warns_below_the_minimal_size() {
        let s = QuantileSummary::from_ncs(&[0.1, 0.2, 0.3, 0.4], 0.05).unwrap();
        assert!(s.quantile.is_full_set());
        assert_eq!(s.min_m, 19);
        assert!(s.warning.as_deref().unwrap().contains("M = 19"));
        assert_eq!(s.ncs_histogram.iter().map(|b| b.count).sum::<usize>(), 4);
        let s = QuantileSummary::from_ncs(&[0.5; 30], 0.05).unwrap();
        assert!(s.warning.is_none());
        assert_eq!(s.ncs_histogram[5].count, 30);
    }
}

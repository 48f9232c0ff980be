//! Aggregation of trial outcomes into one metrics row per level and planner.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{ExperimentConfig, TrialOutcome};
use crate::error::Result;
use crate::planner::{HelpPolicy, PlannerMode};

/// Metrics of one planner variant at one level. Wall-clock time lives in
/// [`super::Timing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub alpha: f64,
    pub variant: usize,
    pub mode: PlannerMode,
    pub reorder_attempts: usize,
    pub help: HelpPolicy,
    pub trials: usize,
    /// Fraction of trials whose labeled truth lies in the product set.
    pub coverage: Option<f64>,
    pub coverage_se: Option<f64>,
    pub success: f64,
    pub success_se: f64,
    /// Fraction of local (or joint) sets with exactly one member.
    pub singleton_rate: f64,
    /// Fraction of committed decisions that came from the user.
    pub help_rate: f64,
    pub help_rate_se: f64,
    pub mean_set_size: f64,
    pub median_set_size: f64,
    pub p90_set_size: f64,
    pub mean_calls: f64,
    pub total_calls: u64,
    pub user_events: usize,
    pub reorders: usize,
    pub coverage_misses: usize,
    pub planning_failures: usize,
    pub full_set_trials: usize,
    /// Covered trials that still failed. Zero whenever help is answered by
    /// the oracle user without reorders.
    pub coverage_without_success: usize,
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

/// Nearest-rank percentile of a sorted sample.
fn percentile(sorted: &[usize], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1] as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One row per (α, variant), in the order the config lists them.
pub fn aggregate(cfg: &ExperimentConfig, outcomes: &[TrialOutcome]) -> Vec<Metrics> {
    let mut alphas: Vec<f64> = Vec::new();
    for o in outcomes {
        if !alphas.contains(&o.alpha) {
            alphas.push(o.alpha);
        }
    }
    let mut rows = Vec::new();
    for alpha in alphas {
        for (v, variant) in cfg.planners.iter().enumerate() {
            let group: Vec<&TrialOutcome> = outcomes
                .iter()
                .filter(|o| o.alpha == alpha && o.variant == v)
                .collect();
            if group.is_empty() {
                continue;
            }
            let n = group.len();
            let covered: Vec<bool> = group.iter().filter_map(|o| o.covered).collect();
            let coverage = (!covered.is_empty())
                .then(|| ratio(covered.iter().filter(|c| **c).count(), covered.len()));
            let success = ratio(group.iter().filter(|o| o.success).count(), n);
            let mut sizes: Vec<usize> = group.iter().flat_map(|o| o.set_sizes.iter().copied()).collect();
            sizes.sort_unstable();
            let rounds: usize = group.iter().map(|o| o.rounds).sum();
            let decisions: usize = group.iter().map(|o| o.decisions).sum();
            let help_rate = ratio(group.iter().map(|o| o.user_decisions).sum(), decisions);
            let total_calls: u64 = group.iter().map(|o| o.calls).sum();
            rows.push(Metrics {
                alpha,
                variant: v,
                mode: variant.mode,
                reorder_attempts: variant.reorder_attempts,
                help: variant.help,
                trials: n,
                coverage,
                coverage_se: coverage.map(|c| binomial_se(c, covered.len())),
                success,
                success_se: binomial_se(success, n),
                singleton_rate: ratio(group.iter().map(|o| o.singleton_rounds).sum(), rounds),
                help_rate,
                help_rate_se: binomial_se(help_rate, decisions.max(1)),
                mean_set_size: ratio(sizes.iter().sum(), sizes.len()),
                median_set_size: percentile(&sizes, 0.5),
                p90_set_size: percentile(&sizes, 0.9),
                mean_calls: total_calls as f64 / n as f64,
                total_calls,
                user_events: group.iter().map(|o| o.user_events).sum(),
                reorders: group.iter().map(|o| o.reorders).sum(),
                coverage_misses: group.iter().map(|o| o.coverage_misses).sum(),
                planning_failures: group.iter().filter(|o| o.planning_failed).count(),
                full_set_trials: group.iter().filter(|o| o.full_set).count(),
                coverage_without_success: group
                    .iter()
                    .filter(|o| o.covered == Some(true) && !o.success)
                    .count(),
            });
        }
    }
    rows
}

/// Help rates of the two planners on the same trials at one level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub alpha: f64,
    pub distributed_help_rate: f64,
    pub centralized_help_rate: f64,
    /// Mean over trials of centralized minus distributed per-trial help rate.
    pub help_rate_difference: f64,
    /// Paired standard error of the difference.
    pub difference_se: f64,
    pub distributed_mean_calls: f64,
    pub centralized_mean_calls: f64,
}

fn trial_help_rate(o: &TrialOutcome) -> f64 {
    ratio(o.user_decisions, o.decisions)
}

pub fn compare(metrics: &[Metrics], outcomes: &[TrialOutcome]) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for d in metrics.iter().filter(|m| m.mode == PlannerMode::Distributed) {
        let Some(c) = metrics
            .iter()
            .find(|m| m.alpha == d.alpha && m.mode == PlannerMode::Centralized)
        else {
            continue;
        };
        let per = |v: usize| -> Vec<&TrialOutcome> {
            outcomes
                .iter()
                .filter(|o| o.alpha == d.alpha && o.variant == v)
                .collect()
        };
        let (ds, cs) = (per(d.variant), per(c.variant));
        let diffs: Vec<f64> = ds
            .iter()
            .zip(&cs)
            .map(|(a, b)| trial_help_rate(b) - trial_help_rate(a))
            .collect();
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = if diffs.len() > 1 {
            diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        rows.push(ComparisonRow {
            alpha: d.alpha,
            distributed_help_rate: d.help_rate,
            centralized_help_rate: c.help_rate,
            help_rate_difference: mean,
            difference_se: (var / n).sqrt(),
            distributed_mean_calls: d.mean_calls,
            centralized_mean_calls: c.mean_calls,
        });
    }
    rows
}

/// One CSV row per α × planner variant.
pub fn write_metrics_csv(out: impl Write, metrics: &[Metrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_percentiles() {
        let s = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
        assert_eq!(percentile(&s, 0.5), 5.0);
        assert_eq!(percentile(&s, 0.9), 9.0);
        assert_eq!(percentile(&[4], 0.9), 4.0);
        assert_eq!(percentile(&[], 0.5), 0.0);
    }

    #[test]
    fn binomial_standard_error() {
        assert!((binomial_se(0.5, 100) - 0.05).abs() < 1e-15);
        assert_eq!(binomial_se(1.0, 10), 0.0);
    }
}

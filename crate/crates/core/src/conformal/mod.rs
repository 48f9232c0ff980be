//! Split conformal prediction over decision sequences.
//!
//! A calibration example is a whole labeled sequence; its nonconformity
//! score is one minus the lowest score the scorer gave any labeled decision.
//! The resulting quantile q̄ thresholds every local prediction set at
//! `score > 1 − q̄`, and the Cartesian product of the local sets is exactly
//! the sequence-level set.

pub mod beta;
mod calibration;

use std::cmp::Ordering;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calibration::{
    build_calibration_set, calibration_record, read_jsonl, write_jsonl, CalibrationRecord,
    HistogramBin, LabelEntry, QuantileSummary, RECORD_VERSION,
};

/// 1 − min(step scores).
pub fn sequence_ncs<F: Float>(scores: &[F]) -> Result<F> {
    if scores.is_empty() {
        return Err(Error::Argument("sequence has no scores".into()));
    }
    let min = scores.iter().copied().fold(F::infinity(), F::min);
    Ok(F::one() - min)
}

/// Rank j = ⌈(M+1)(1−α)⌉ of the calibration order statistic used as q̄.
/// The product is nudged down by a few ulps so that exact integers are not
/// pushed to the next rank by rounding.
pub fn conformal_rank<F: Float>(m: usize, alpha: F) -> usize {
    let x = (m as f64 + 1.0) * (1.0 - alpha.to_f64().expect("finite alpha"));
    let tol = 64.0 * F::epsilon().to_f64().expect("finite") * x.max(1.0);
    (x - tol).ceil().max(0.0) as usize
}

/// Smallest M for which level `alpha` yields a finite quantile.
pub fn min_calibration_size<F: Float>(alpha: F) -> usize {
    (1..).find(|m| conformal_rank(*m, alpha) <= *m).expect("alpha > 0")
}

/// Either a threshold value or the marker that every decision is kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QuantileValue<F> {
    Value(F),
    Sentinel(FullSet),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FullSet {
    #[serde(rename = "FULL-SET")]
    FullSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantile<F> {
    pub q_bar: QuantileValue<F>,
    pub m: usize,
    pub alpha: F,
    /// Rank j of the order statistic; greater than `m` for the sentinel.
    pub rank: usize,
}

impl<F: Float> Quantile<F> {
    pub fn full_set(m: usize, alpha: F) -> Self {
        Quantile {
            q_bar: QuantileValue::Sentinel(FullSet::FullSet),
            m,
            alpha,
            rank: conformal_rank(m, alpha),
        }
    }

    pub fn is_full_set(&self) -> bool {
        matches!(self.q_bar, QuantileValue::Sentinel(_))
    }

    pub fn value(&self) -> Option<F> {
        match self.q_bar {
            QuantileValue::Value(v) => Some(v),
            QuantileValue::Sentinel(_) => None,
        }
    }

    /// Scores strictly above this are kept; `None` keeps everything.
    pub fn threshold(&self) -> Option<F> {
        self.value().map(|q| F::one() - q)
    }

    pub fn admits(&self, score: F) -> bool {
        self.threshold().is_none_or(|t| score > t)
    }
}

fn check_alpha<F: Float>(alpha: F) -> Result<()> {
    if alpha > F::zero() && alpha < F::one() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "alpha must lie in (0, 1), got {}",
            alpha.to_f64().unwrap_or(f64::NAN)
        )))
    }
}

/// The j-th smallest nonconformity score, j = ⌈(M+1)(1−α)⌉, or the
/// full-set sentinel when j exceeds M.
pub fn conformal_quantile<F: Float>(ncs: &[F], alpha: F) -> Result<Quantile<F>> {
    check_alpha(alpha)?;
    if ncs.is_empty() {
        return Err(Error::Argument("calibration set is empty".into()));
    }
    if ncs.iter().any(|x| x.is_nan()) {
        return Err(Error::Argument("nonconformity score is NaN".into()));
    }
    let m = ncs.len();
    let rank = conformal_rank(m, alpha);
    if rank > m {
        return Ok(Quantile::full_set(m, alpha));
    }
    let mut sorted = ncs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    Ok(Quantile {
        q_bar: QuantileValue::Value(sorted[rank.max(1) - 1]),
        m,
        alpha,
        rank,
    })
}

/// Quantile of the sequence nonconformity scores of `sequences`.
pub fn calibrate<F: Float, S: AsRef<[F]>>(sequences: &[S], alpha: F) -> Result<Quantile<F>> {
    let ncs = sequences
        .iter()
        .map(|s| sequence_ncs(s.as_ref()))
        .collect::<Result<Vec<F>>>()?;
    conformal_quantile(&ncs, alpha)
}

/// Decisions kept by a local prediction set, ascending by index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet<F> {
    pub members: Vec<usize>,
    /// Score of each member, aligned with `members`.
    pub scores: Vec<F>,
    /// `None` when the full-set sentinel applied.
    pub threshold: Option<F>,
}

impl<F: Float> PredictionSet<F> {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn is_singleton(&self) -> bool {
        self.members.len() == 1
    }

    pub fn is_full_set(&self) -> bool {
        self.threshold.is_none()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.members.binary_search(&index).is_ok()
    }
}

/// {d : g(d) > 1 − q̄}, or every decision under the sentinel.
pub fn local_prediction_set<F: Float>(scores: &[F], q: &Quantile<F>) -> PredictionSet<F> {
    let members: Vec<usize> = (0..scores.len()).filter(|i| q.admits(scores[*i])).collect();
    PredictionSet {
        scores: members.iter().map(|i| scores[*i]).collect(),
        members,
        threshold: q.threshold(),
    }
}

/// Brute-force sequence-level set: every plan (one decision index per
/// iteration) whose lowest step score clears the threshold. Enumerates
/// |S|^T plans in lexicographic order; refuses when that exceeds `budget`.
pub fn global_prediction_set<F: Float>(
    tables: &[Vec<F>],
    q: &Quantile<F>,
    budget: u64,
) -> Result<Vec<Vec<usize>>> {
    if tables.is_empty() {
        return Err(Error::Argument("no score tables".into()));
    }
    let size = tables
        .iter()
        .try_fold(1u64, |acc, t| acc.checked_mul(t.len() as u64))
        .filter(|s| *s <= budget)
        .ok_or_else(|| Error::Budget(format!("plan space exceeds {budget}")))?;
    let mut out = Vec::new();
    let mut plan = vec![0usize; tables.len()];
    for _ in 0..size {
        let min = plan
            .iter()
            .zip(tables)
            .map(|(i, t)| t[*i])
            .fold(F::infinity(), F::min);
        if q.admits(min) {
            out.push(plan.clone());
        }
        for pos in (0..plan.len()).rev() {
            plan[pos] += 1;
            if plan[pos] < tables[pos].len() {
                break;
            }
            plan[pos] = 0;
        }
    }
    Ok(out)
}

/// Cartesian product of local sets, kept in factored form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductSet {
    pub sets: Vec<Vec<usize>>,
}

impl ProductSet {
    pub fn new<F: Float>(locals: &[PredictionSet<F>]) -> Self {
        ProductSet {
            sets: locals.iter().map(|l| l.members.clone()).collect(),
        }
    }

    pub fn cardinality(&self) -> u128 {
        self.sets
            .iter()
            .fold(1u128, |acc, s| acc.saturating_mul(s.len() as u128))
    }

    /// O(T) membership test.
    pub fn contains(&self, plan: &[usize]) -> bool {
        plan.len() == self.sets.len()
            && plan
                .iter()
                .zip(&self.sets)
                .all(|(d, s)| s.binary_search(d).is_ok())
    }

    /// All member plans in lexicographic order.
    pub fn materialize(&self, budget: u64) -> Result<Vec<Vec<usize>>> {
        let size = self.cardinality();
        if size > budget as u128 {
            return Err(Error::Budget(format!("product set has {size} plans")));
        }
        let mut out: Vec<Vec<usize>> = vec![Vec::new()];
        for set in &self.sets {
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    set.iter().map(move |d| {
                        let mut p = prefix.clone();
                        p.push(*d);
                        p
                    })
                })
                .collect();
        }
        Ok(out)
    }
}

/// Outcome of the dataset-conditional level search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConditional<F> {
    /// Level to calibrate with: v / (M + 1).
    pub alpha_m: F,
    pub v: usize,
    /// Coverage guaranteed with probability 1 − δ: Beta⁻¹_{M+1−v, v}(δ).
    pub coverage_bound: F,
}

/// Smallest M whose most conservative level (v = 1, bound δ^{1/M}) reaches
/// `target` coverage.
pub fn min_dataset_conditional_size<F: Float>(delta: F, target: F) -> usize {
    let (d, t) = (delta.to_f64().expect("finite"), target.to_f64().expect("finite"));
    let m = (d.ln() / t.ln()).ceil().max(1.0) as usize;
    (m.saturating_sub(1).max(1)..)
        .find(|m| d.powf(1.0 / *m as f64) >= t)
        .expect("unbounded search")
}

/// Largest level α_M = v/(M+1) whose fixed-calibration coverage bound
/// Beta⁻¹_{M+1−v, v}(δ) still reaches `target`.
pub fn dataset_conditional_alpha<F: Float>(
    m: usize,
    delta: F,
    target: F,
) -> Result<DatasetConditional<F>> {
    if m == 0 {
        return Err(Error::Argument("calibration size must be positive".into()));
    }
    check_alpha(delta)?;
    check_alpha(target)?;
    let bound = |v: usize| {
        beta::beta_quantile(
            delta,
            F::from(m + 1 - v).expect("count"),
            F::from(v).expect("count"),
        )
    };
    // The bound decreases in v, so the feasible levels form a prefix.
    let (mut lo, mut hi) = (0usize, m);
    if bound(1)? < target {
        return Err(Error::InfeasibleLevel {
            m,
            delta: delta.to_f64().unwrap_or(f64::NAN),
            target: target.to_f64().unwrap_or(f64::NAN),
            min_m: min_dataset_conditional_size(delta, target),
        });
    }
    lo += 1;
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if bound(mid)? >= target {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    Ok(DatasetConditional {
        alpha_m: F::from(lo).expect("count") / F::from(m + 1).expect("count"),
        v: lo,
        coverage_bound: bound(lo)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ncs_examples() {
        assert_eq!(sequence_ncs(&[1.0f64, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(sequence_ncs(&[0.9f64, 0.5, 0.7]).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(sequence_ncs(&[0.3f64, 0.0]).unwrap(), 1.0);
        assert!(sequence_ncs::<f64>(&[]).is_err());
    }

    #[test]
    fn quantile_examples() {
        let ncs: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
        let q = conformal_quantile(&ncs, 0.1).unwrap();
        assert_eq!(q.rank, 9);
        assert_eq!(q.value(), Some(0.9));
        assert_eq!(ncs.iter().filter(|x| **x < 0.9).count(), 8);

        let q = conformal_quantile(&[0.37f64], 0.5).unwrap();
        assert_eq!(q.value(), Some(0.37));

        let q = conformal_quantile(&[0.1f64, 0.2, 0.3, 0.4], 0.1).unwrap();
        assert!(q.is_full_set());
        assert_eq!(q.rank, 5);

        assert!(conformal_quantile(&[0.1f64], 0.0).is_err());
        assert!(conformal_quantile(&[0.1f64], 1.0).is_err());
        assert!(conformal_quantile::<f64>(&[], 0.1).is_err());
    }

    #[test]
    fn rank_handles_exact_products() {
        assert_eq!(conformal_rank(9, 0.1f64), 9);
        assert_eq!(conformal_rank(9, 0.1f32), 9);
        assert_eq!(conformal_rank(9, 0.7f32), 3);
        assert_eq!(conformal_rank(19, 0.05f64), 19);
        assert_eq!(conformal_rank(99, 0.01f64), 99);
        assert_eq!(min_calibration_size(0.05f64), 19);
        assert_eq!(min_calibration_size(0.1f64), 9);
        assert_eq!(min_calibration_size(0.5f64), 1);
    }

    #[test]
    fn calibrate_composes() {
        let q = calibrate(&[vec![0.4f64, 0.9]], 0.5).unwrap();
        assert_abs_diff_eq!(q.value().unwrap(), 0.6, epsilon = 1e-15);
        let perfect = vec![vec![1.0f64; 3]; 10];
        let q = calibrate(&perfect, 0.2).unwrap();
        assert_eq!(q.value(), Some(0.0));
        // Strict threshold at 1: nothing, not even a perfect score, passes.
        assert!(local_prediction_set(&[1.0f64, 0.0], &q).is_empty());
        assert!(calibrate(&perfect[..3], 0.2).unwrap().is_full_set());
    }

    fn q(v: f64) -> Quantile<f64> {
        Quantile {
            q_bar: QuantileValue::Value(v),
            m: 10,
            alpha: 0.1,
            rank: 10,
        }
    }

    #[test]
    fn local_set_examples() {
        assert_eq!(local_prediction_set(&[0.9, 0.05, 0.05], &q(0.2)).members, vec![0]);
        let third = 1.0 / 3.0;
        assert_eq!(
            local_prediction_set(&[third; 3], &q(0.7)).members,
            vec![0, 1, 2]
        );
        let full = Quantile::full_set(3, 0.1f64);
        let s = local_prediction_set(&[1.0, 0.0, 0.0], &full);
        assert_eq!(s.members, vec![0, 1, 2]);
        assert!(s.is_full_set());
        // A score equal to the threshold is excluded.
        assert!(local_prediction_set(&[0.75, 0.25], &q(0.25)).is_empty());
    }

    #[test]
    fn global_set_examples() {
        let tables = vec![vec![0.7, 0.2, 0.1], vec![0.45, 0.45, 0.1]];
        let g = global_prediction_set(&tables, &q(0.6), 100).unwrap();
        assert_eq!(g, vec![vec![0, 0], vec![0, 1]]);
        let locals: Vec<_> = tables.iter().map(|t| local_prediction_set(t, &q(0.6))).collect();
        assert_eq!(ProductSet::new(&locals).materialize(100).unwrap(), g);

        let single = global_prediction_set(&tables[..1], &q(0.6), 100).unwrap();
        assert_eq!(single, vec![vec![0]]);
        assert!(global_prediction_set(&tables, &q(0.0), 100).unwrap().is_empty());
        assert!(matches!(
            global_prediction_set(&tables, &q(0.5), 8),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn product_set_basics() {
        let p = ProductSet {
            sets: vec![vec![0, 2], vec![1], vec![0, 1, 3]],
        };
        assert_eq!(p.cardinality(), 6);
        assert!(p.contains(&[2, 1, 3]));
        assert!(!p.contains(&[1, 1, 3]));
        assert!(!p.contains(&[2, 1]));
        assert_eq!(p.materialize(10).unwrap().len(), 6);
        let one = ProductSet {
            sets: vec![vec![4], vec![1]],
        };
        assert_eq!(one.materialize(10).unwrap(), vec![vec![4, 1]]);
    }

    #[test]
    fn dataset_conditional_examples() {
        // For M = 99, delta = 0.01: v = 1 gives delta^(1/99), the largest
        // feasible level for target 0.9 sits at v = 4.
        let r = dataset_conditional_alpha(99, 0.01f64, 0.9).unwrap();
        assert_eq!(r.v, 4);
        assert_abs_diff_eq!(r.alpha_m, 0.04, epsilon = 1e-15);
        assert!(r.coverage_bound >= 0.9);
        let next = beta::beta_quantile(0.01f64, 95.0, 5.0).unwrap();
        assert!(next < 0.9);
        assert_abs_diff_eq!(
            beta::beta_quantile(0.01f64, 99.0, 1.0).unwrap(),
            0.01f64.powf(1.0 / 99.0),
            epsilon = 1e-9
        );

        match dataset_conditional_alpha(10, 0.01f64, 0.9) {
            Err(Error::InfeasibleLevel { min_m, .. }) => {
                assert_eq!(min_m, 44);
                assert!(dataset_conditional_alpha(44, 0.01f64, 0.9).is_ok());
                assert!(dataset_conditional_alpha(43, 0.01f64, 0.9).is_err());
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(dataset_conditional_alpha(0, 0.01f64, 0.9).is_err());
    }

    #[test]
    fn dataset_conditional_level_grows_with_delta() {
        // At delta = 0.5 the coverage median sits at the target, so the level
        // is close to the marginal 1 - target.
        let target = 0.9f64;
        let median = dataset_conditional_alpha(1000, 0.5, target).unwrap();
        assert!((median.alpha_m - (1.0 - target)).abs() < 0.01, "{}", median.alpha_m);
        let mut last = 0.0;
        for delta in [0.01, 0.1, 0.5, 0.9] {
            let r = dataset_conditional_alpha(200, delta, target).unwrap();
            assert!(r.alpha_m >= last);
            last = r.alpha_m;
        }
    }

    #[test]
    fn quantile_serialization() {
        let text = serde_json::to_string(&Quantile::full_set(4, 0.1f64)).unwrap();
        assert!(text.contains("\"FULL-SET\""));
        let back: Quantile<f64> = serde_json::from_str(&text).unwrap();
        assert!(back.is_full_set());
        let text = serde_json::to_string(&q(0.25)).unwrap();
        let back: Quantile<f64> = serde_json::from_str(&text).unwrap();
        assert_eq!(back.value(), Some(0.25));
    }

    proptest! {
        #[test]
        fn ncs_is_bounded_and_order_free(mut scores in prop::collection::vec(0.0f64..=1.0, 1..20)) {
            let r = sequence_ncs(&scores).unwrap();
            prop_assert!((0.0..=1.0).contains(&r));
            scores.reverse();
            prop_assert_eq!(sequence_ncs(&scores).unwrap(), r);
        }

        #[test]
        fn smaller_alpha_gives_larger_sets(
            ncs in prop::collection::vec(0.0f64..=1.0, 1..60),
            scores in prop::collection::vec(0.0f64..=1.0, 1..12),
            a1 in 0.01f64..0.99,
            a2 in 0.01f64..0.99,
        ) {
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let q_lo = conformal_quantile(&ncs, lo).unwrap();
            let q_hi = conformal_quantile(&ncs, hi).unwrap();
            match (q_lo.value(), q_hi.value()) {
                (Some(a), Some(b)) => prop_assert!(a >= b),
                (Some(_), None) => prop_assert!(false, "larger alpha gave the sentinel"),
                _ => {}
            }
            let big = local_prediction_set(&scores, &q_lo);
            let small = local_prediction_set(&scores, &q_hi);
            prop_assert!(small.members.iter().all(|m| big.contains(*m)));
        }

        #[test]
        fn argmax_is_in_every_nonempty_set(
            scores in prop::collection::vec(0.0f64..=1.0, 1..12),
            qv in 0.0f64..=1.0,
        ) {
            let set = local_prediction_set(&scores, &q(qv));
            if !set.is_empty() {
                let mut best = 0;
                for (i, s) in scores.iter().enumerate() {
                    if *s > scores[best] { best = i; }
                }
                prop_assert!(set.contains(best));
            }
        }

        #[test]
        fn single_and_double_precision_agree(
            ncs in prop::collection::vec(0.0f64..=1.0, 1..40),
            a in 1u32..999,
        ) {
            let alpha = a as f64 / 1000.0;
            let q64 = conformal_quantile(&ncs, alpha).unwrap();
            let n32: Vec<f32> = ncs.iter().map(|x| *x as f32).collect();
            let q32 = conformal_quantile(&n32, alpha as f32).unwrap();
            prop_assert_eq!(q64.rank, q32.rank);
            prop_assert_eq!(q64.is_full_set(), q32.is_full_set());
        }
    }
}

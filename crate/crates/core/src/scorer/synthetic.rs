//! Scorers that know the ground truth and blur it with seeded noise.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Scorer;
use crate::context::Context;
use crate::error::{Error, Result};
use crate::scenario::{reference_decision, DecisionSpace};
use crate::seeding::{self, tag};

/// Raw score 1 on the oracle's next decision and 0 on every other one.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleIndicator;

impl Scorer for OracleIndicator {
    fn raw_scores(&self, ctx: &Context, space: &DecisionSpace) -> Result<Vec<f64>> {
        let truth = space.index_of(&reference_decision(ctx)?);
        Ok((0..space.len())
            .map(|i| if Some(i) == truth { 1.0 } else { 0.0 })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoisyOracle {
    pub beta: f64,
    pub sigma: f64,
    pub epsilon: f64,
    pub seed: u64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl NoisyOracle {
    /// Extra raw score that gives the distractor, absent noise, a share
    /// `epsilon` of the combined mass of itself and the reference decision:
    /// ln(1 + ε/(1−ε)·e^β).
    pub fn distractor_bonus(&self) -> f64 {
        if self.epsilon == 0.0 {
            return 0.0;
        }
        softplus((self.epsilon / (1.0 - self.epsilon)).ln() + self.beta)
    }

    /// Raw scores for iteration `k` of scenario `scenario_id` given the
    /// reference index. Also returns the distractor's index.
    pub fn raw_for(
        &self,
        scenario_id: u64,
        k: usize,
        truth: Option<usize>,
        len: usize,
    ) -> (Vec<f64>, Option<usize>) {
        let mut rng = seeding::stream(&[self.seed, tag::NOISE, scenario_id, k as u64]);
        let mut raw: Vec<f64> = (0..len)
            .map(|i| {
                let z: f64 = rng.sample(StandardNormal);
                let hit = if Some(i) == truth { self.beta } else { 0.0 };
                hit + self.sigma * z
            })
            .collect();
        let others = len - usize::from(truth.is_some());
        let distractor = (others > 0).then(|| {
            let d = rng.random_range(0..others);
            match truth {
                Some(t) if d >= t => d + 1,
                _ => d,
            }
        });
        if let Some(d) = distractor {
            raw[d] += self.distractor_bonus();
        }
        (raw, distractor)
    }
}

impl Scorer for NoisyOracle {
    fn raw_scores(&self, ctx: &Context, space: &DecisionSpace) -> Result<Vec<f64>> {
        let truth = space.index_of(&reference_decision(ctx)?);
        let k = ctx
            .k()
            .ok_or_else(|| Error::Argument("context has no cursor".into()))?;
        Ok(self.raw_for(ctx.scenario().id, k, truth, space.len()).0)
    }
}

/// Scorer backed by a closure; handy for hand-built test instances.
pub struct FnScorer<F>(pub F);

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&Context, &DecisionSpace) -> Vec<f64> + Send + Sync,
{
    fn raw_scores(&self, ctx: &Context, space: &DecisionSpace) -> Result<Vec<f64>> {
        Ok((self.0)(ctx, space))
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::context::OrderSchedule;
    use crate::scenario::tests::fixture;
    use crate::scenario::{oracle_plan, Scenario};
    use crate::scorer::CallCounter;

    fn start(sc: Scenario) -> (Context, DecisionSpace) {
        let sc = Arc::new(sc);
        let space = sc.decision_space();
        (Context::initial(sc.clone(), &OrderSchedule::for_scenario(&sc)), space)
    }

    #[test]
    fn indicator_marks_the_oracle_decision() {
        let sc = fixture(1, 10);
        let first = oracle_plan(&sc).unwrap().steps[0].0[0];
        let (ctx, space) = start(sc);
        let mut counter = CallCounter::default();
        let s = OracleIndicator.score_all(&ctx, &space, &mut counter).unwrap();
        let top = space.index_of(&first).unwrap();
        assert_eq!(s.raw[top], 1.0);
        assert_eq!(s.raw.iter().sum::<f64>(), 1.0);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(s.values[top], e / (e + space.len() as f64 - 1.0), epsilon = 1e-12);
        assert_eq!(counter.total, space.len() as u64);
        assert_eq!(counter.per_step[&1], space.len() as u64);
    }

    #[test]
    fn noiseless_noisy_oracle_is_a_scaled_indicator() {
        let n = NoisyOracle {
            beta: 3.0,
            sigma: 0.0,
            epsilon: 0.0,
            seed: 1,
        };
        let (raw, _) = n.raw_for(5, 1, Some(2), 6);
        assert_eq!(raw, vec![0.0, 0.0, 3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sharp_oracle_approaches_one_hot() {
        let n = NoisyOracle {
            beta: 60.0,
            sigma: 0.0,
            epsilon: 0.0,
            seed: 1,
        };
        let v = crate::scorer::softmax(&n.raw_for(5, 1, Some(0), 9).0);
        assert!(v[0] > 1.0 - 1e-15);
        assert!(v[1..].iter().all(|x| *x < 1e-20));
    }

    #[test]
    fn exactly_one_distractor_receives_the_confusion_mass() {
        let n = NoisyOracle {
            beta: 4.0,
            sigma: 0.0,
            epsilon: 0.15,
            seed: 1,
        };
        for k in 1..50 {
            let (raw, d) = n.raw_for(7, k, Some(3), 9);
            let d = d.unwrap();
            assert_ne!(d, 3);
            let boosted: Vec<usize> = (0..9).filter(|i| *i != 3 && raw[*i] > 0.0).collect();
            assert_eq!(boosted, vec![d]);
            // The distractor's extra mass is an epsilon share of truth + extra.
            let extra = raw[d].exp() - 1.0;
            assert_abs_diff_eq!(extra / (extra + raw[3].exp()), 0.15, epsilon = 1e-12);
        }
    }

    #[test]
    fn noise_streams_are_keyed_by_iteration() {
        let n = NoisyOracle {
            beta: 4.0,
            sigma: 1.0,
            epsilon: 0.15,
            seed: 1,
        };
        assert_eq!(n.raw_for(7, 3, Some(0), 9), n.raw_for(7, 3, Some(0), 9));
        assert_ne!(n.raw_for(7, 3, Some(0), 9).0, n.raw_for(7, 4, Some(0), 9).0);
        assert_ne!(n.raw_for(7, 3, Some(0), 9).0, n.raw_for(8, 3, Some(0), 9).0);
    }

    #[test]
    fn large_beta_bonus_does_not_overflow() {
        let n = NoisyOracle {
            beta: 2000.0,
            sigma: 0.0,
            epsilon: 0.5,
            seed: 0,
        };
        assert_abs_diff_eq!(n.distractor_bonus(), 2000.0, epsilon = 1e-9);
    }
}

//! Decision scorers: a confidence for every decision of the decision space
//! given a context.

mod external;
mod synthetic;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::context::Context;
use crate::error::{Error, Result};
use crate::scenario::DecisionSpace;

pub use external::{EndpointConfig, Extraction, ExternalScorer};
pub use synthetic::{FnScorer, NoisyOracle, OracleIndicator};

/// Per-decision confidences indexed by decision-space order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    /// Softmax of `raw` when `normalized`, otherwise equal to `raw`.
    pub values: Vec<f64>,
    pub raw: Vec<f64>,
    pub normalized: bool,
}

impl ScoreVector {
    pub fn from_raw(raw: Vec<f64>) -> Self {
        ScoreVector {
            values: softmax(&raw),
            raw,
            normalized: true,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the highest score; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, v) in self.values.iter().enumerate() {
            if best.is_none_or(|b| *v > self.values[b]) {
                best = Some(i);
            }
        }
        best
    }
}

/// Max-shifted softmax. The normalizer is summed in ascending order, so
/// permuting `raw` permutes the output bit for bit.
pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return vec![1.0 / raw.len() as f64; raw.len()];
    }
    let exp: Vec<f64> = raw.iter().map(|r| (r - max).exp()).collect();
    let mut sorted = exp.clone();
    sorted.sort_by(f64::total_cmp);
    let total: f64 = sorted.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Logical scorer invocations: one per scored decision.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounter {
    pub total: u64,
    /// Calls attributed to each planning step `t`.
    pub per_step: BTreeMap<usize, u64>,
}

impl CallCounter {
    pub fn record(&mut self, t: usize, calls: u64) {
        self.total += calls;
        *self.per_step.entry(t).or_default() += calls;
    }
}

pub trait Scorer: Send + Sync {
    /// Unnormalized score of every decision in `space` for the robot named by
    /// the context's cursor.
    fn raw_scores(&self, ctx: &Context, space: &DecisionSpace) -> Result<Vec<f64>>;

    /// False when calls must not overlap (e.g. a rate-limited endpoint).
    fn concurrency_safe(&self) -> bool {
        true
    }

    fn score_all(
        &self,
        ctx: &Context,
        space: &DecisionSpace,
        counter: &mut CallCounter,
    ) -> Result<ScoreVector> {
        let cursor = ctx
            .cursor
            .ok_or_else(|| Error::Argument("scoring a context without a cursor".into()))?;
        let raw = self.raw_scores(ctx, space)?;
        if raw.len() != space.len() || raw.iter().any(|r| r.is_nan()) {
            return Err(Error::Internal(format!(
                "scorer returned {} scores for {} decisions",
                raw.len(),
                space.len()
            )));
        }
        counter.record(cursor.t, space.len() as u64);
        Ok(ScoreVector::from_raw(raw))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScorerKind {
    /// Raw score 1 on the reference decision, 0 elsewhere.
    OracleIndicator,
    /// `beta` sharpness on the reference decision, Gaussian noise of scale
    /// `sigma` everywhere, and one seeded distractor per iteration that
    /// receives a share `epsilon` of the reference decision's mass.
    NoisyOracle { beta: f64, sigma: f64, epsilon: f64 },
    External(EndpointConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerSpec {
    #[serde(flatten)]
    pub kind: ScorerKind,
    #[serde(default)]
    pub seed: u64,
}

impl ScorerSpec {
    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            ScorerKind::OracleIndicator => Ok(()),
            ScorerKind::NoisyOracle {
                beta,
                sigma,
                epsilon,
            } => {
                if !(beta.is_finite() && *beta >= 0.0) {
                    return Err(Error::Config("noisy scorer needs beta >= 0".into()));
                }
                if !(sigma.is_finite() && *sigma >= 0.0) {
                    return Err(Error::Config("noisy scorer needs sigma >= 0".into()));
                }
                if !(0.0..1.0).contains(epsilon) {
                    return Err(Error::Config("noisy scorer needs epsilon in [0, 1)".into()));
                }
                Ok(())
            }
            ScorerKind::External(cfg) => cfg.validate(),
        }
    }

    /// Parses the command-line form: `oracle`, `noisy:beta=4,sigma=1,eps=0.15`
    /// or the path of a JSON spec file.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let kind = if text == "oracle" {
            ScorerKind::OracleIndicator
        } else if let Some(args) = text.strip_prefix("noisy") {
            let (mut beta, mut sigma, mut epsilon) = (4.0, 1.0, 0.15);
            for pair in args.trim_start_matches(':').split(',').filter(|p| !p.is_empty()) {
                let (key, value) = pair
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("bad scorer argument {pair:?}")))?;
                let value: f64 = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad number in {pair:?}")))?;
                match key {
                    "beta" => beta = value,
                    "sigma" => sigma = value,
                    "eps" | "epsilon" => epsilon = value,
                    _ => return Err(Error::Config(format!("unknown scorer argument {key:?}"))),
                }
            }
            ScorerKind::NoisyOracle {
                beta,
                sigma,
                epsilon,
            }
        } else {
            let spec: ScorerSpec = serde_json::from_str(&std::fs::read_to_string(Path::new(text))?)?;
            spec.validate()?;
            return Ok(spec);
        };
        let spec = ScorerSpec { kind, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn noisy(beta: f64, sigma: f64, epsilon: f64, seed: u64) -> Self {
        ScorerSpec {
            kind: ScorerKind::NoisyOracle {
                beta,
                sigma,
                epsilon,
            },
            seed,
        }
    }

    pub fn oracle() -> Self {
        ScorerSpec {
            kind: ScorerKind::OracleIndicator,
            seed: 0,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Scorer>> {
        self.validate()?;
        Ok(match &self.kind {
            ScorerKind::OracleIndicator => Box::new(OracleIndicator),
            ScorerKind::NoisyOracle {
                beta,
                sigma,
                epsilon,
            } => Box::new(NoisyOracle {
                beta: *beta,
                sigma: *sigma,
                epsilon: *epsilon,
                seed: self.seed,
            }),
            ScorerKind::External(cfg) => Box::new(ExternalScorer::new(cfg.clone())?),
        })
    }
}

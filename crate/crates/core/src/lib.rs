//! Multi-robot task planning with a language-model scorer and conformal
//! prediction sets that decide when to ask a human for help.

pub mod conformal;
pub mod context;
pub mod error;
pub mod harness;
pub mod planner;
pub mod scenario;
pub mod scorer;
pub mod seeding;
pub mod world;

pub use error::{Error, Result};

pub type Quantile = conformal::Quantile<f64>;
pub type Quantile32 = conformal::Quantile<f32>;
pub type PredictionSet = conformal::PredictionSet<f64>;
pub type PredictionSet32 = conformal::PredictionSet<f32>;
pub type DatasetConditional = conformal::DatasetConditional<f64>;
pub type DatasetConditional32 = conformal::DatasetConditional<f32>;

//! Online portfolio selection by mixing pattern-matching agents.
//!
//! Agents find historical periods that resemble the recent past, estimate
//! moments from what followed, and solve a mean-variance problem in closed
//! form. An online learner then weights the agents by their realised wealth.

pub mod baselines;
pub mod error;
pub mod fundsep;
pub mod learner;
pub mod marketdata;
pub mod patterns;
pub mod relatives;
pub mod stats;
pub mod synth;

pub use error::{Culprit, Error, Result};
pub use fundsep::{ControlVector, MomentEstimate, PortfolioMode, Projection, SolverConfig};
pub use learner::{MixtureRule, OnlineLearner, PeriodReport, WealthTrack};
pub use patterns::{
    AgentGenerator, AgentGrid, AgentSpec, ClusterMap, ControlMatrix, MatchConfig, PatternGenerator,
};
pub use relatives::PriceRelativeMatrix;

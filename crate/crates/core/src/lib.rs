//! Learning time-varying conditional instruments from panel time series and
//! estimating per-step average causal effects by conditional two-stage least
//! squares.

pub mod diffmath;
pub mod civgraph;
pub mod synthdata;
pub mod estimator;
pub mod seqvae;
pub mod pipeline;

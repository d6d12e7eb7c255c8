//! Parallel slice-within-Gibbs sampling for a hierarchical Poisson-lognormal model of
//! RNA-seq counts.

pub mod design;
pub mod diagnostics;
pub mod engine;
pub mod error;
pub mod io;
pub mod model;
pub mod reduce;
pub mod rng;
pub mod simulate;
pub mod slice;
pub mod stats;

pub use engine::{run_chain, run_chains, ChainOutput, ChainRunner, RunConfig, SamplerMode, Step};
pub use error::{Error, Result, SliceError};
pub use model::{ChainState, CountMatrix, ModelSpec, PriorConfig, TuningState};
pub use stats::{ContrastSpec, MomentAccumulator};

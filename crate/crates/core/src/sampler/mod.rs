//! Blocked Gibbs sampler.

pub mod adapt;
pub mod blocks;
pub mod chain;
pub mod cp;
pub mod init;
pub mod stats;
pub mod sweep;

pub use chain::{load_draws, run_chain, Chain, ChainOptions, ChainOutput, Draw, PopulationFactor, PosteriorDraws, TraceRecord};
pub use cp::{run_cp_baseline, CpGibbs, CpState};
pub use init::{build_bases, prior_state, ModeBases};
pub use stats::{Problem, SubjectStats};
pub use sweep::{Gibbs, SweepInfo};

//! Desk-scale laboratory for centralized daycare assignment with waitlist
//! priority: the deterministic assignment mechanism, bootstrap lottery
//! estimation, forward-looking list choice, a synthetic market generator,
//! simulated-moments preference estimation, and rational-expectations
//! counterfactuals over the waitlist bonus.

pub mod equilibrium;
pub mod error;
pub mod io;
pub mod lottery;
pub mod market;
pub mod mechanism;
pub mod msm;
pub mod optim;
pub mod policy;
pub mod scalar;
pub mod seed;

pub use error::{Error, Result};

/// Concrete aliases for the scalar-generic value types; the estimation layers
/// work in `f64` throughout.
pub type Lottery = lottery::Lottery<f64>;
pub type BlendedLottery = lottery::BlendedLottery<f64>;
pub type PolicyProblem<'a> = policy::PolicyProblem<'a, f64>;
pub type PairSolution = policy::PairSolution<f64>;

//! Entropy-regularised tabular MDPs: soft dynamic programming, Fisher-Rao and
//! mirror-descent policy flows, log-linear natural policy gradient, and
//! numerical certificates for their convergence and stability bounds.

pub mod bench;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod mdp;
pub mod npg;
pub mod ode;
pub mod plot;
pub mod policy;
pub mod soft_dp;
pub mod tolerances;

pub use diagnostics::BoundReport;
pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowTrajectory};
pub use mdp::{Occupancy, TabularMdp};
pub use npg::{FeatureMap, NpgConfig, NpgTrajectory};
pub use policy::{kl_policies, LogitPolicy, PolicyDistribution};
pub use soft_dp::{
    evaluate_distribution, evaluate_policy, flat_derivative, performance_difference, soft_bellman_operator, solve_optimal,
    OptimalSolution, PolicyEvaluation,
};
pub use tolerances::Tolerances;

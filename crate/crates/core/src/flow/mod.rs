//! The normalizing flow: adaptive Runge-Kutta integration of graph-conditioned
//! dynamics, Hutchinson trace estimates, ActNorm layers and the full
//! generate/encode stack.

mod cnf;
mod model;
pub mod solver;

pub use cnf::{actnorm_forward, actnorm_inverse, hutchinson_estimates, integrate_cnf, rademacher, CnfOutput};
pub use model::{
    conformation_tensor, nll_per_dim, standard_normal, standard_normal_logpdf, ConfFlowModel, Direction, FlowConfig,
    Layer, PassOutput, PreparedMolecule, Transformed,
};
pub use solver::{integrate, rk45_step, Recording, SolverConfig, StepResult, Trajectory};

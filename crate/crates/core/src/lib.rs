//! Entropy-regularized optimal transport solved as Kullback-Leibler
//! projections.
//!
//! Every solver is a sequence of closed-form KL projections onto simple
//! convex sets, driven either by cyclic Bregman projections (affine sets) or
//! by Dykstra iterations (general convex sets):
//!
//! * [`entropic_ot`]: Sinkhorn scaling, in linear and log domain.
//! * [`barycenter`]: fixed-support Wasserstein barycenters.
//! * [`multimarginal`]: dense multi-marginal couplings.
//! * [`euler_flow`]: generalized incompressible flows with a factored kernel.
//! * [`constrained`]: partial transport, capacity bounds.
//! * [`martingale`]: martingale couplings.
//! * [`tomography`]: partial Radon inversion with a transport fidelity term.
//! * [`lifting`]: symmetric product-space formulation of the projections.
//! * [`io`]: CSV, PGM and JSON files.

pub mod barycenter;
pub mod constrained;
pub mod engine;
pub mod entropic_ot;
pub mod error;
pub mod euler_flow;
pub mod io;
pub mod kernel;
pub mod kl;
pub mod lifting;
pub mod martingale;
pub mod multimarginal;
pub mod sets;
pub mod shapes;
pub mod tomography;

pub use engine::{
    bregman_solve, bregman_solve_log, dykstra_solve, dykstra_solve_log, ConstraintSet, Diagnostics, Plan,
    Solution, SolveOptions,
};
pub use entropic_ot::{sinkhorn, sinkhorn_log, CostMatrix};
pub use error::{Error, Result};
pub use kernel::{grid_centres, GibbsKernel, KernelOp, SeparableKernel};
pub use kl::{entropy, kl_divergence, Histogram};
pub use sets::{AxisMarginal, Bound, EntryUpperBound, TotalMass};

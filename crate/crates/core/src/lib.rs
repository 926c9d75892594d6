//! Trajectory optimization for control-affine systems whose states live on
//! embedded submanifolds (products of circles, unit spheres and Euclidean
//! factors).
//!
//! The solver works entirely in the ambient space: the manifold constraint is
//! never imposed explicitly. Instead the dynamics, which are tangent to the
//! manifold, are enforced as hard equality constraints in a sequence of convex
//! quadratic subproblems, so converged trajectories inherit the manifold
//! constraint from the dynamics alone. Converged runs expose the discrete
//! adjoints of the subproblems, which certify first-order optimality and warm
//! start an indirect single-shooting polish.
//!
//! Module map:
//! - [`manifold`]: factor-built manifolds, projections, tangent frames,
//!   cotangent projection.
//! - [`dynamics`]: control-affine systems with analytic Jacobians and a small
//!   model zoo.
//! - [`problem`]: cost, control box, waypoint constraints and obstacle
//!   penalties.
//! - [`transcription`]: trapezoidal transcription of the linearized
//!   subproblems into QP data.
//! - [`qp`]: operator-splitting QP solver returning primal and dual solutions.
//! - [`scp`]: the outer successive-convexification loop and optimality
//!   residual reports.
//! - [`shooting`]: warm-started indirect shooting polish.

pub mod dynamics;
pub mod manifold;
pub mod problem;
pub mod qp;
pub mod scp;
pub mod shooting;
pub mod transcription;

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type all numerical routines are generic over; `f32` and `f64`
/// both qualify.
pub trait Real: RealField + FromPrimitive + ToPrimitive + Copy {
    /// Conversion from an `f64` literal (lossy for `f32`).
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal must be representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl<T: RealField + FromPrimitive + ToPrimitive + Copy> Real for T {}

/// Errors shared by all modules.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{what}: expected dimension {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("point is off the manifold: residual norm {residual:.3e} exceeds tolerance {tol:.3e}")]
    OffManifold { residual: f64, tol: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("subproblem construction failed: {0}")]
    Construction(String),
    #[error("adjoint extraction requires an optimal QP solution, got status {status}")]
    ExtractionRefused { status: &'static str },
    #[error("missing data: {0}")]
    Missing(String),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Concrete double-precision aliases for the common entry points.
pub type Manifold = manifold::EmbeddedManifold;
pub type System = dynamics::ControlAffineSystem<f64>;
pub type Problem = problem::OcpProblem<f64>;
pub type Trajectory = transcription::DiscreteTrajectory<f64>;
pub type Params = transcription::ScpParams<f64>;
pub type Run = scp::ScpRun<f64>;

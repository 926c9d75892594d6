//! Control-affine systems in the ambient space with analytic Jacobians.
//!
//! A system is a drift field F0 plus control fields F_1..F_m, all declared to
//! preserve a manifold (tangency is a checkable property, see the tests). The
//! model zoo provides the systems used by the bundled problems: a free-flyer
//! spacecraft, a kinematic chain on a torus and a double integrator.

pub mod models;

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::manifold::EmbeddedManifold;
use crate::{Error, Real, Result};

pub type FieldFn<S> = Arc<dyn Fn(&DVector<S>) -> DVector<S> + Send + Sync>;
pub type JacobianFn<S> = Arc<dyn Fn(&DVector<S>) -> DMatrix<S> + Send + Sync>;

/// Dynamics `xdot = F0(x) + sum_j u_j F_j(x)` on R^N, tangent to a manifold.
#[derive(Clone)]
pub struct ControlAffineSystem<S: Real> {
    state_dim: usize,
    control_dim: usize,
    drift: FieldFn<S>,
    control_fields: Vec<FieldFn<S>>,
    drift_jacobian: JacobianFn<S>,
    control_field_jacobians: Vec<JacobianFn<S>>,
    manifold: EmbeddedManifold,
}

impl<S: Real> fmt::Debug for ControlAffineSystem<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineSystem")
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("manifold", &self.manifold)
            .finish()
    }
}

impl<S: Real> ControlAffineSystem<S> {
    pub fn new(
        drift: FieldFn<S>,
        drift_jacobian: JacobianFn<S>,
        control_fields: Vec<FieldFn<S>>,
        control_field_jacobians: Vec<JacobianFn<S>>,
        manifold: EmbeddedManifold,
    ) -> Self {
        assert_eq!(control_fields.len(), control_field_jacobians.len());
        Self {
            state_dim: manifold.ambient_dim(),
            control_dim: control_fields.len(),
            drift,
            control_fields,
            drift_jacobian,
            control_field_jacobians,
            manifold,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn manifold(&self) -> &EmbeddedManifold {
        &self.manifold
    }

    fn check_dims(&self, x: &DVector<S>, u: &DVector<S>) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: self.state_dim,
                got: x.len(),
            });
        }
        if u.len() != self.control_dim {
            return Err(Error::DimensionMismatch {
                what: "control",
                expected: self.control_dim,
                got: u.len(),
            });
        }
        Ok(())
    }

    pub fn drift(&self, x: &DVector<S>) -> DVector<S> {
        (self.drift)(x)
    }

    pub fn control_field(&self, j: usize, x: &DVector<S>) -> DVector<S> {
        (self.control_fields[j])(x)
    }

    /// `F(x, u) = F0(x) + sum_j u_j F_j(x)`.
    pub fn eval_dynamics(&self, x: &DVector<S>, u: &DVector<S>) -> Result<DVector<S>> {
        self.check_dims(x, u)?;
        let mut f = (self.drift)(x);
        for (j, field) in self.control_fields.iter().enumerate() {
            f.axpy(u[j], &field(x), S::one());
        }
        Ok(f)
    }

    /// State Jacobian A (at fixed u) and control Jacobian B, both analytic:
    /// A = dF0/dx + sum_j u_j dF_j/dx, B has columns F_j(x).
    pub fn eval_jacobians(
        &self,
        x: &DVector<S>,
        u: &DVector<S>,
    ) -> Result<(DMatrix<S>, DMatrix<S>)> {
        self.check_dims(x, u)?;
        let mut a = (self.drift_jacobian)(x);
        for (j, jac) in self.control_field_jacobians.iter().enumerate() {
            a += jac(x) * u[j];
        }
        let mut b = DMatrix::zeros(self.state_dim, self.control_dim);
        for (j, field) in self.control_fields.iter().enumerate() {
            b.set_column(j, &field(x));
        }
        Ok((a, b))
    }

    /// Columns `F_j(x)` only.
    pub fn control_matrix(&self, x: &DVector<S>) -> DMatrix<S> {
        let mut b = DMatrix::zeros(self.state_dim, self.control_dim);
        for (j, field) in self.control_fields.iter().enumerate() {
            b.set_column(j, &field(x));
        }
        b
    }

    /// Fixed-step 4th-order Runge-Kutta with the control held constant on
    /// each step (zero-order hold, sampled at the step start). Returns the
    /// states at every step boundary, `steps + 1` entries.
    pub fn integrate(
        &self,
        x0: &DVector<S>,
        u_fn: impl Fn(S) -> DVector<S>,
        t_span: (S, S),
        steps: usize,
    ) -> Result<Vec<DVector<S>>> {
        if steps == 0 {
            return Err(Error::InvalidParams("integrate requires steps >= 1".into()));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: 0 });
        }
        let h = (t_span.1 - t_span.0) / S::from_usize(steps).unwrap();
        let mut out = Vec::with_capacity(steps + 1);
        out.push(x0.clone());
        let mut x = x0.clone();
        for i in 0..steps {
            let t = t_span.0 + h * S::from_usize(i).unwrap();
            let u = u_fn(t);
            x = self.rk4_step(&x, &u, h)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { step: i + 1 });
            }
            out.push(x.clone());
        }
        Ok(out)
    }

    pub fn rk4_step(&self, x: &DVector<S>, u: &DVector<S>, h: S) -> Result<DVector<S>> {
        let half = S::lit(0.5);
        let sixth = S::lit(1.0 / 6.0);
        let two = S::lit(2.0);
        let k1 = self.eval_dynamics(x, u)?;
        let k2 = self.eval_dynamics(&(x + &k1 * (h * half)), u)?;
        let k3 = self.eval_dynamics(&(x + &k2 * (h * half)), u)?;
        let k4 = self.eval_dynamics(&(x + &k3 * h), u)?;
        Ok(x + (k1 + k2 * two + k3 * two + k4) * (h * sixth))
    }
}

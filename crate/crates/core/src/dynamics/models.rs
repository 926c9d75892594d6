//! Model zoo: the concrete systems used by the bundled problems.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::ControlAffineSystem;
use crate::manifold::{EmbeddedManifold, Factor};
use crate::{Error, Real, Result};

/// Named model plus parameters, as selected in a problem config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    /// Free-flying rigid body: position/velocity, scalar-first quaternion and
    /// body rates. Controls are thrust (3) and torque (3).
    Freeflyer {
        /// Mass in kg.
        mass: f64,
        /// Inertia diagonal (3 entries) or full row-major 3x3, kg m^2.
        inertia: Vec<f64>,
    },
    /// Kinematic chain of unit-rate joints; each joint lives on a circle.
    TorusManipulator { joints: usize },
    /// `dim` decoupled double integrators.
    DoubleIntegrator { dim: usize },
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec::Freeflyer {
            mass: 7.2,
            inertia: vec![0.07, 0.07, 0.07],
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Freeflyer { mass, inertia } => {
                if *mass <= 0.0 {
                    return Err(Error::InvalidProblem("freeflyer mass must be positive".into()));
                }
                let j = inertia_matrix(inertia)?;
                if (j - j.transpose()).norm() > 1e-12 * j.norm() {
                    return Err(Error::InvalidProblem("inertia must be symmetric".into()));
                }
                if j.cholesky().is_none() {
                    return Err(Error::InvalidProblem(
                        "inertia must be positive-definite".into(),
                    ));
                }
            }
            ModelSpec::TorusManipulator { joints } => {
                if *joints == 0 {
                    return Err(Error::InvalidProblem("joint count must be >= 1".into()));
                }
            }
            ModelSpec::DoubleIntegrator { dim } => {
                if *dim == 0 {
                    return Err(Error::InvalidProblem(
                        "double integrator dimension must be >= 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// The factor list this model's states live on.
    pub fn manifold(&self) -> Result<EmbeddedManifold> {
        self.validate()?;
        Ok(match self {
            ModelSpec::Freeflyer { .. } => EmbeddedManifold::new(vec![
                Factor::Euclidean(6),
                Factor::Sphere3,
                Factor::Euclidean(3),
            ]),
            ModelSpec::TorusManipulator { joints } => {
                EmbeddedManifold::new(vec![Factor::Circle; *joints])
            }
            ModelSpec::DoubleIntegrator { dim } => EmbeddedManifold::euclidean(2 * dim),
        })
    }

    pub fn build<S: Real>(&self) -> Result<ControlAffineSystem<S>> {
        self.validate()?;
        match self {
            ModelSpec::Freeflyer { mass, inertia } => {
                freeflyer(*mass, inertia_matrix(inertia)?)
            }
            ModelSpec::TorusManipulator { joints } => torus_manipulator(*joints),
            ModelSpec::DoubleIntegrator { dim } => Ok(double_integrator(*dim)),
        }
    }
}

fn inertia_matrix(entries: &[f64]) -> Result<Matrix3<f64>> {
    match entries.len() {
        3 => Ok(Matrix3::from_diagonal(&Vector3::new(
            entries[0], entries[1], entries[2],
        ))),
        9 => Ok(Matrix3::from_row_slice(entries)),
        n => Err(Error::InvalidProblem(format!(
            "inertia must have 3 (diagonal) or 9 (row-major) entries, got {n}"
        ))),
    }
}

/// `dim` decoupled double integrators: state (p, v), control the acceleration.
pub fn double_integrator<S: Real>(dim: usize) -> ControlAffineSystem<S> {
    let n = 2 * dim;
    let drift = Arc::new(move |x: &DVector<S>| {
        let mut f = DVector::zeros(n);
        for k in 0..dim {
            f[k] = x[dim + k];
        }
        f
    });
    let drift_jac = Arc::new(move |_: &DVector<S>| {
        let mut a = DMatrix::zeros(n, n);
        for k in 0..dim {
            a[(k, dim + k)] = S::one();
        }
        a
    });
    let mut fields: Vec<super::FieldFn<S>> = Vec::with_capacity(dim);
    let mut jacs: Vec<super::JacobianFn<S>> = Vec::with_capacity(dim);
    for j in 0..dim {
        fields.push(Arc::new(move |_: &DVector<S>| {
            let mut f = DVector::zeros(n);
            f[dim + j] = S::one();
            f
        }));
        jacs.push(Arc::new(move |_: &DVector<S>| DMatrix::zeros(n, n)));
    }
    ControlAffineSystem::new(
        drift,
        drift_jac,
        fields,
        jacs,
        EmbeddedManifold::euclidean(n),
    )
}

/// Kinematic chain on the k-torus: joint j has coordinates (x_j, y_j) on the
/// unit circle and rate control u_j, with field (-y_j u_j, x_j u_j).
pub fn torus_manipulator<S: Real>(joints: usize) -> Result<ControlAffineSystem<S>> {
    if joints == 0 {
        return Err(Error::InvalidProblem("joint count must be >= 1".into()));
    }
    let n = 2 * joints;
    let drift = Arc::new(move |_: &DVector<S>| DVector::zeros(n));
    let drift_jac = Arc::new(move |_: &DVector<S>| DMatrix::zeros(n, n));
    let mut fields: Vec<super::FieldFn<S>> = Vec::with_capacity(joints);
    let mut jacs: Vec<super::JacobianFn<S>> = Vec::with_capacity(joints);
    for j in 0..joints {
        fields.push(Arc::new(move |x: &DVector<S>| {
            let mut f = DVector::zeros(n);
            f[2 * j] = -x[2 * j + 1];
            f[2 * j + 1] = x[2 * j];
            f
        }));
        jacs.push(Arc::new(move |_: &DVector<S>| {
            let mut a = DMatrix::zeros(n, n);
            a[(2 * j, 2 * j + 1)] = -S::one();
            a[(2 * j + 1, 2 * j)] = S::one();
            a
        }));
    }
    Ok(ControlAffineSystem::new(
        drift,
        drift_jac,
        fields,
        jacs,
        EmbeddedManifold::new(vec![Factor::Circle; joints]),
    ))
}

/// Free-flying rigid body, state layout (r, v, q, w) with q scalar-first:
///
/// ```text
/// rdot = v
/// vdot = u1 / m
/// qdot = 1/2 Omega(w) q
/// wdot = J^-1 (u2 - w x J w)
/// ```
pub fn freeflyer<S: Real>(mass: f64, inertia: Matrix3<f64>) -> Result<ControlAffineSystem<S>> {
    let inv = inertia
        .try_inverse()
        .ok_or_else(|| Error::InvalidProblem("inertia is singular".into()))?;
    let j_mat = convert_mat3::<S>(&inertia);
    let j_inv = convert_mat3::<S>(&inv);
    let inv_mass = S::lit(1.0 / mass);

    let jm = j_mat;
    let ji = j_inv;
    let drift = Arc::new(move |x: &DVector<S>| {
        let mut f = DVector::zeros(13);
        for k in 0..3 {
            f[k] = x[3 + k]; // rdot = v
        }
        let q = [x[6], x[7], x[8], x[9]];
        let w = Vector3::new(x[10], x[11], x[12]);
        let qdot = omega_matrix_apply(&w, q);
        let half = S::lit(0.5);
        for k in 0..4 {
            f[6 + k] = half * qdot[k];
        }
        let gyro = ji * (-w.cross(&(jm * w)));
        for k in 0..3 {
            f[10 + k] = gyro[k];
        }
        f
    });

    let jm = j_mat;
    let ji = j_inv;
    let drift_jac = Arc::new(move |x: &DVector<S>| {
        let mut a = DMatrix::zeros(13, 13);
        for k in 0..3 {
            a[(k, 3 + k)] = S::one(); // d rdot / d v
        }
        let half = S::lit(0.5);
        let q = [x[6], x[7], x[8], x[9]];
        let w = Vector3::new(x[10], x[11], x[12]);
        // d qdot / d q = 1/2 Omega(w)
        let om = omega_matrix(&w);
        for r in 0..4 {
            for c in 0..4 {
                a[(6 + r, 6 + c)] = half * om[(r, c)];
            }
        }
        // d qdot / d w = 1/2 [ -qv^T ; qw I + [qv]x ]
        let (qw, qv) = (q[0], Vector3::new(q[1], q[2], q[3]));
        for c in 0..3 {
            a[(6, 10 + c)] = -half * qv[c];
        }
        let xi = Matrix3::identity() * qw + cross_matrix(&qv);
        for r in 0..3 {
            for c in 0..3 {
                a[(7 + r, 10 + c)] = half * xi[(r, c)];
            }
        }
        // d wdot / d w = J^-1 ([Jw]x - [w]x J)
        let jw = jm * w;
        let gyro = ji * (cross_matrix(&jw) - cross_matrix(&w) * jm);
        for r in 0..3 {
            for c in 0..3 {
                a[(10 + r, 10 + c)] = gyro[(r, c)];
            }
        }
        a
    });

    let mut fields: Vec<super::FieldFn<S>> = Vec::with_capacity(6);
    let mut jacs: Vec<super::JacobianFn<S>> = Vec::with_capacity(6);
    for j in 0..3 {
        // Thrust components: vdot = u1 / m.
        fields.push(Arc::new(move |_: &DVector<S>| {
            let mut f = DVector::zeros(13);
            f[3 + j] = inv_mass;
            f
        }));
        jacs.push(Arc::new(|_: &DVector<S>| DMatrix::zeros(13, 13)));
    }
    for j in 0..3 {
        // Torque components: wdot = J^-1 u2.
        let col = j_inv.column(j).clone_owned();
        fields.push(Arc::new(move |_: &DVector<S>| {
            let mut f = DVector::zeros(13);
            for k in 0..3 {
                f[10 + k] = col[k];
            }
            f
        }));
        jacs.push(Arc::new(|_: &DVector<S>| DMatrix::zeros(13, 13)));
    }

    Ok(ControlAffineSystem::new(
        drift,
        drift_jac,
        fields,
        jacs,
        EmbeddedManifold::new(vec![
            Factor::Euclidean(6),
            Factor::Sphere3,
            Factor::Euclidean(3),
        ]),
    ))
}

/// The 4x4 skew matrix of body rates for scalar-first quaternions, so that
/// qdot = 1/2 Omega(w) q integrates body-frame rotation.
fn omega_matrix<S: Real>(w: &Vector3<S>) -> nalgebra::Matrix4<S> {
    let z = S::zero();
    nalgebra::Matrix4::new(
        z, -w[0], -w[1], -w[2], //
        w[0], z, w[2], -w[1], //
        w[1], -w[2], z, w[0], //
        w[2], w[1], -w[0], z,
    )
}

fn omega_matrix_apply<S: Real>(w: &Vector3<S>, q: [S; 4]) -> [S; 4] {
    let (qw, qv) = (q[0], Vector3::new(q[1], q[2], q[3]));
    let scalar = -qv.dot(w);
    let vec = w * qw + qv.cross(w);
    [scalar, vec[0], vec[1], vec[2]]
}

fn cross_matrix<S: Real>(v: &Vector3<S>) -> Matrix3<S> {
    let z = S::zero();
    Matrix3::new(z, -v[2], v[1], v[2], z, -v[0], -v[1], v[0], z)
}

fn convert_mat3<S: Real>(m: &Matrix3<f64>) -> Matrix3<S> {
    Matrix3::from_fn(|r, c| S::lit(m[(r, c)]))
}

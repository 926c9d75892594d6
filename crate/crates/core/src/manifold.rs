//! Embedded submanifolds assembled from primitive factors.
//!
//! A manifold is an ordered product of Euclidean blocks, unit circles in the
//! plane and unit 3-spheres in R^4, included canonically in the ambient space
//! R^N. Each unit-norm factor contributes one constraint residual row, so the
//! residual vector has length N - n. Projection, tangent frames and geodesic
//! interpolation are all closed-form per factor.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

/// Residual-norm tolerance below which a point counts as on the manifold.
pub const ON_MANIFOLD_TOL: f64 = 1e-8;

/// A primitive factor of a product manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    /// Unconstrained block of the given dimension.
    Euclidean(usize),
    /// Unit circle in R^2.
    Circle,
    /// Unit 3-sphere in R^4 (quaternion block, scalar-first).
    Sphere3,
}

impl Factor {
    pub fn ambient_dim(&self) -> usize {
        match self {
            Factor::Euclidean(d) => *d,
            Factor::Circle => 2,
            Factor::Sphere3 => 4,
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Factor::Euclidean(d) => *d,
            Factor::Circle => 1,
            Factor::Sphere3 => 3,
        }
    }

    fn is_unit_norm(&self) -> bool {
        !matches!(self, Factor::Euclidean(_))
    }
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(d) = s.strip_prefix("euclidean:") {
            let d: usize = d
                .parse()
                .map_err(|_| Error::InvalidProblem(format!("bad factor spec {s:?}")))?;
            if d == 0 {
                return Err(Error::InvalidProblem(
                    "euclidean factor dimension must be positive".into(),
                ));
            }
            return Ok(Factor::Euclidean(d));
        }
        match s {
            "circle" => Ok(Factor::Circle),
            "sphere3" => Ok(Factor::Sphere3),
            _ => Err(Error::InvalidProblem(format!(
                "unknown manifold factor {s:?} (expected euclidean:<d>, circle or sphere3)"
            ))),
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Euclidean(d) => write!(f, "euclidean:{d}"),
            Factor::Circle => write!(f, "circle"),
            Factor::Sphere3 => write!(f, "sphere3"),
        }
    }
}

/// Product manifold with per-factor offsets into the ambient coordinates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddedManifold {
    factors: Vec<Factor>,
    offsets: Vec<usize>,
    ambient_dim: usize,
    intrinsic_dim: usize,
}

impl EmbeddedManifold {
    pub fn new(factors: Vec<Factor>) -> Self {
        let mut offsets = Vec::with_capacity(factors.len());
        let mut ambient = 0;
        let mut intrinsic = 0;
        for f in &factors {
            offsets.push(ambient);
            ambient += f.ambient_dim();
            intrinsic += f.intrinsic_dim();
        }
        Self {
            factors,
            offsets,
            ambient_dim: ambient,
            intrinsic_dim: intrinsic,
        }
    }

    /// Parse an ordered factor list such as `["euclidean:6", "sphere3"]`.
    pub fn parse(specs: &[impl AsRef<str>]) -> Result<Self> {
        let factors = specs
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(factors))
    }

    pub fn euclidean(dim: usize) -> Self {
        Self::new(vec![Factor::Euclidean(dim)])
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    /// Number of constraint rows, N - n.
    pub fn codim(&self) -> usize {
        self.ambient_dim - self.intrinsic_dim
    }

    pub fn factors(&self) -> impl Iterator<Item = (Factor, usize)> + '_ {
        self.factors.iter().copied().zip(self.offsets.iter().copied())
    }

    fn check_dim<S: Real>(&self, x: &DVector<S>, what: &'static str) -> Result<()> {
        if x.len() != self.ambient_dim {
            return Err(Error::DimensionMismatch {
                what,
                expected: self.ambient_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Per-factor constraint residuals; unit-norm factors contribute
    /// `|block|^2 - 1`, Euclidean factors contribute nothing.
    pub fn constraint_residual<S: Real>(&self, x: &DVector<S>) -> Result<DVector<S>> {
        self.check_dim(x, "constraint_residual input")?;
        let mut res = Vec::with_capacity(self.codim());
        for (f, off) in self.factors() {
            if f.is_unit_norm() {
                let block = x.rows(off, f.ambient_dim());
                res.push(block.norm_squared() - S::one());
            }
        }
        Ok(DVector::from_vec(res))
    }

    pub fn residual_norm<S: Real>(&self, x: &DVector<S>) -> Result<S> {
        Ok(self.constraint_residual(x)?.norm())
    }

    /// Jacobian of `constraint_residual`, one row `2 * block^T` per unit-norm
    /// factor.
    pub fn constraint_jacobian<S: Real>(&self, x: &DVector<S>) -> Result<DMatrix<S>> {
        self.check_dim(x, "constraint_jacobian input")?;
        let two = S::lit(2.0);
        let mut jac = DMatrix::zeros(self.codim(), self.ambient_dim);
        let mut row = 0;
        for (f, off) in self.factors() {
            if f.is_unit_norm() {
                for k in 0..f.ambient_dim() {
                    jac[(row, off + k)] = two * x[off + k];
                }
                row += 1;
            }
        }
        Ok(jac)
    }

    pub fn contains<S: Real>(&self, x: &DVector<S>, tol: f64) -> bool {
        self.residual_norm(x)
            .map(|r| r.to_f64_lossy() <= tol)
            .unwrap_or(false)
    }

    fn require_on_manifold<S: Real>(&self, x: &DVector<S>) -> Result<()> {
        let r = self.residual_norm(x)?.to_f64_lossy();
        if r > ON_MANIFOLD_TOL {
            return Err(Error::OffManifold {
                residual: r,
                tol: ON_MANIFOLD_TOL,
            });
        }
        Ok(())
    }

    /// Closest point on the manifold: unit-norm blocks are normalized,
    /// Euclidean blocks pass through. Fails on zero-norm blocks, which have
    /// no unique projection.
    pub fn project<S: Real>(&self, x: &DVector<S>) -> Result<DVector<S>> {
        self.check_dim(x, "project input")?;
        let mut out = x.clone();
        for (f, off) in self.factors() {
            if f.is_unit_norm() {
                let d = f.ambient_dim();
                let norm = x.rows(off, d).norm();
                if norm <= S::lit(1e-14) {
                    return Err(Error::DegenerateInput(format!(
                        "zero-norm {f} block at offset {off} has no unique projection"
                    )));
                }
                for k in 0..d {
                    out[off + k] = x[off + k] / norm;
                }
            }
        }
        Ok(out)
    }

    /// Orthonormal frame for the tangent space at `x`. Built per factor
    /// (circle: position rotated 90 degrees; sphere: the three quaternion
    /// tangents q*i, q*j, q*k; Euclidean: standard basis) and re-orthonormalized
    /// with modified Gram-Schmidt.
    pub fn tangent_basis<S: Real>(&self, x: &DVector<S>) -> Result<TangentBasis<S>> {
        self.check_dim(x, "tangent_basis input")?;
        self.require_on_manifold(x)?;
        let mut columns = DMatrix::zeros(self.ambient_dim, self.intrinsic_dim);
        let mut col = 0;
        for (f, off) in self.factors() {
            match f {
                Factor::Euclidean(d) => {
                    for k in 0..d {
                        columns[(off + k, col)] = S::one();
                        col += 1;
                    }
                }
                Factor::Circle => {
                    let (a, b) = (x[off], x[off + 1]);
                    columns[(off, col)] = -b;
                    columns[(off + 1, col)] = a;
                    col += 1;
                }
                Factor::Sphere3 => {
                    let q = [x[off], x[off + 1], x[off + 2], x[off + 3]];
                    for t in quaternion_tangents(q) {
                        for k in 0..4 {
                            columns[(off + k, col)] = t[k];
                        }
                        col += 1;
                    }
                }
            }
        }
        gram_schmidt(&mut columns);
        Ok(TangentBasis {
            base_point: x.clone(),
            columns,
        })
    }

    /// Orthogonal projection of an ambient covector onto the cotangent space,
    /// returned as coefficients in the tangent frame together with the
    /// reconstructed ambient representative.
    pub fn project_costate<S: Real>(
        &self,
        x: &DVector<S>,
        gamma: &DVector<S>,
    ) -> Result<CostateProjection<S>> {
        self.check_dim(gamma, "project_costate covector")?;
        let basis = self.tangent_basis(x)?;
        let coefficients = basis.columns.transpose() * gamma;
        let ambient = &basis.columns * &coefficients;
        Ok(CostateProjection {
            coefficients,
            ambient,
        })
    }

    /// Per-factor geodesic between two on-manifold points: linear on
    /// Euclidean blocks, shorter-arc on circles, great-circle interpolation
    /// on spheres. Antipodal unit-norm blocks are rejected.
    pub fn geodesic_interpolate<S: Real>(
        &self,
        x0: &DVector<S>,
        x1: &DVector<S>,
        s: S,
    ) -> Result<DVector<S>> {
        self.check_dim(x0, "geodesic_interpolate start")?;
        self.check_dim(x1, "geodesic_interpolate end")?;
        self.require_on_manifold(x0)?;
        self.require_on_manifold(x1)?;
        let mut out = DVector::zeros(self.ambient_dim);
        for (f, off) in self.factors() {
            match f {
                Factor::Euclidean(d) => {
                    for k in 0..d {
                        out[off + k] = x0[off + k] + s * (x1[off + k] - x0[off + k]);
                    }
                }
                Factor::Circle => {
                    let (a0, b0) = (x0[off], x0[off + 1]);
                    let (a1, b1) = (x1[off], x1[off + 1]);
                    let dot = a0 * a1 + b0 * b1;
                    if dot.to_f64_lossy() <= -1.0 + 1e-9 {
                        return Err(Error::DegenerateInput(format!(
                            "antipodal circle block at offset {off}: interpolation is ambiguous"
                        )));
                    }
                    let cross = a0 * b1 - b0 * a1;
                    let ang = s * cross.atan2(dot);
                    let (sin, cos) = ang.sin_cos();
                    out[off] = a0 * cos - b0 * sin;
                    out[off + 1] = a0 * sin + b0 * cos;
                }
                Factor::Sphere3 => {
                    let q0 = x0.rows(off, 4).clone_owned();
                    let q1 = x1.rows(off, 4).clone_owned();
                    let dot = q0.dot(&q1);
                    if dot.to_f64_lossy() <= -1.0 + 1e-9 {
                        return Err(Error::DegenerateInput(format!(
                            "antipodal sphere block at offset {off}: interpolation is ambiguous"
                        )));
                    }
                    let theta = dot.clamp(-S::one(), S::one()).acos();
                    let q = if theta.to_f64_lossy() < 1e-7 {
                        let mut q = &q0 * (S::one() - s) + &q1 * s;
                        let n = q.norm();
                        q /= n;
                        q
                    } else {
                        let sin_theta = theta.sin();
                        &q0 * (((S::one() - s) * theta).sin() / sin_theta)
                            + &q1 * ((s * theta).sin() / sin_theta)
                    };
                    for k in 0..4 {
                        out[off + k] = q[k];
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Orthonormal ambient vectors spanning the tangent space at a point.
#[derive(Debug, Clone)]
pub struct TangentBasis<S: Real> {
    pub base_point: DVector<S>,
    /// N x n matrix whose columns form the frame.
    pub columns: DMatrix<S>,
}

/// Result of projecting an ambient covector onto the cotangent space.
#[derive(Debug, Clone)]
pub struct CostateProjection<S: Real> {
    /// Coefficients in the tangent frame, length n.
    pub coefficients: DVector<S>,
    /// Reconstructed ambient representative, length N.
    pub ambient: DVector<S>,
}

/// The three orthonormal tangents to the unit sphere at q: the quaternion
/// products q*i, q*j, q*k in scalar-first layout.
fn quaternion_tangents<S: Real>(q: [S; 4]) -> [[S; 4]; 3] {
    let [w, x, y, z] = q;
    [
        [-x, w, z, -y], // q * i
        [-y, -z, w, x], // q * j
        [-z, y, -x, w], // q * k
    ]
}

fn gram_schmidt<S: Real>(columns: &mut DMatrix<S>) {
    let n = columns.ncols();
    for j in 0..n {
        for i in 0..j {
            let proj = columns.column(i).dot(&columns.column(j));
            let prev = columns.column(i).clone_owned();
            let mut col = columns.column_mut(j);
            col.axpy(-proj, &prev, S::one());
        }
        let norm = columns.column(j).norm();
        if norm > S::zero() {
            let mut col = columns.column_mut(j);
            col /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(data)
    }

    fn sphere() -> EmbeddedManifold {
        EmbeddedManifold::new(vec![Factor::Sphere3])
    }

    fn circle() -> EmbeddedManifold {
        EmbeddedManifold::new(vec![Factor::Circle])
    }

    #[test]
    fn dims_add_up() {
        let m = EmbeddedManifold::parse(&["euclidean:6", "sphere3", "euclidean:3"]).unwrap();
        assert_eq!(m.ambient_dim(), 13);
        assert_eq!(m.intrinsic_dim(), 12);
        assert_eq!(m.codim(), 1);
    }

    #[test]
    fn factor_parsing_round_trips() {
        for s in ["euclidean:6", "circle", "sphere3"] {
            let f: Factor = s.parse().unwrap();
            assert_eq!(f.to_string(), s);
        }
        assert!("euclidean:0".parse::<Factor>().is_err());
        assert!("torus".parse::<Factor>().is_err());
    }

    #[test]
    fn residual_examples() {
        let r = sphere().constraint_residual(&v(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_relative_eq!(r[0], 0.0);
        let r = circle().constraint_residual(&v(&[0.6, 0.8])).unwrap();
        assert_relative_eq!(r[0], 0.0, epsilon = 1e-15);
        let r = circle().constraint_residual(&v(&[1.0, 1.0])).unwrap();
        assert_relative_eq!(r[0], 1.0);
    }

    #[test]
    fn residual_dimension_mismatch() {
        assert!(matches!(
            circle().constraint_residual(&v(&[1.0, 0.0, 0.0])),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        let p = circle().project(&v(&[2.0, 0.0])).unwrap();
        assert_relative_eq!(p, v(&[1.0, 0.0]));
        let p = sphere().project(&v(&[0.0, 0.0, 0.0, 2.0])).unwrap();
        assert_relative_eq!(p, v(&[0.0, 0.0, 0.0, 1.0]));
        let m = EmbeddedManifold::euclidean(2);
        let p = m.project(&v(&[3.0, -1.0])).unwrap();
        assert_relative_eq!(p, v(&[3.0, -1.0]));
    }

    #[test]
    fn projection_rejects_zero_block() {
        assert!(matches!(
            circle().project(&v(&[0.0, 0.0])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn circle_tangent_at_angle_zero() {
        let basis = circle().tangent_basis(&v(&[1.0, 0.0])).unwrap();
        assert_eq!(basis.columns.ncols(), 1);
        assert_relative_eq!(basis.columns.column(0).clone_owned(), v(&[0.0, 1.0]));
    }

    #[test]
    fn euclidean_tangent_is_standard_basis() {
        let m = EmbeddedManifold::euclidean(2);
        let basis = m.tangent_basis(&v(&[4.0, -2.0])).unwrap();
        assert_relative_eq!(basis.columns.column(0).clone_owned(), v(&[1.0, 0.0]));
        assert_relative_eq!(basis.columns.column(1).clone_owned(), v(&[0.0, 1.0]));
    }

    /// Oracle: the sphere tangent frame must span the null space of the
    /// constraint Jacobian 2 q^T, computed independently by SVD.
    #[test]
    fn sphere_tangent_matches_svd_null_space() {
        let m = sphere();
        let q = v(&[1.0, 0.0, 0.0, 0.0]);
        let basis = m.tangent_basis(&q).unwrap();
        for (col, expect) in [
            v(&[0.0, 1.0, 0.0, 0.0]),
            v(&[0.0, 0.0, 1.0, 0.0]),
            v(&[0.0, 0.0, 0.0, 1.0]),
        ]
        .iter()
        .enumerate()
        {
            assert_relative_eq!(basis.columns.column(col).clone_owned(), *expect, epsilon = 1e-14);
        }

        // A generic point: compare span projectors rather than the columns.
        // Null space of J from the zero-eigenvalue eigenvectors of J^T J.
        let q = m.project(&v(&[0.3, -0.5, 0.7, 0.2])).unwrap();
        let basis = m.tangent_basis(&q).unwrap();
        let jac = m.constraint_jacobian(&q).unwrap();
        let gram = jac.transpose() * &jac;
        let eig = gram.symmetric_eigen();
        let mut null_cols = DMatrix::zeros(4, 3);
        let mut k = 0;
        for i in 0..4 {
            if eig.eigenvalues[i].abs() < 1e-10 {
                null_cols.set_column(k, &eig.eigenvectors.column(i));
                k += 1;
            }
        }
        assert_eq!(k, 3);
        let p_ours = &basis.columns * basis.columns.transpose();
        let p_null = &null_cols * null_cols.transpose();
        assert_relative_eq!(p_ours, p_null, epsilon = 1e-10);
    }

    #[test]
    fn tangent_basis_rejects_off_manifold_points() {
        assert!(matches!(
            circle().tangent_basis(&v(&[1.5, 0.0])),
            Err(Error::OffManifold { .. })
        ));
    }

    #[test]
    fn costate_projection_cases() {
        let m = circle();
        let x = v(&[1.0, 0.0]);
        // Tangent covector is reproduced exactly.
        let gamma = v(&[0.0, 3.0]);
        let p = m.project_costate(&x, &gamma).unwrap();
        assert!((p.ambient.clone() - &gamma).norm() <= 1e-12);
        // Normal covector is annihilated.
        let gamma = v(&[5.0, 0.0]);
        let p = m.project_costate(&x, &gamma).unwrap();
        assert!(p.ambient.norm() <= 1e-12);
    }

    /// Oracle: projection equals B B^T gamma with B the tangent frame.
    #[test]
    fn costate_projection_matches_dense_projector() {
        let m = EmbeddedManifold::parse(&["circle", "euclidean:2", "sphere3"]).unwrap();
        let x = m
            .project(&v(&[0.3, -0.8, 1.0, 2.0, 0.5, 0.5, -0.5, 0.5]))
            .unwrap();
        let gamma = v(&[0.7, -1.3, 0.2, 0.9, -0.4, 1.1, 0.6, -2.0]);
        let basis = m.tangent_basis(&x).unwrap();
        let oracle = &basis.columns * (basis.columns.transpose() * &gamma);
        let p = m.project_costate(&x, &gamma).unwrap();
        assert_relative_eq!(p.ambient, oracle, epsilon = 1e-12);
        // Idempotence.
        let p2 = m.project_costate(&x, &p.ambient).unwrap();
        assert!((p2.ambient - &p.ambient).norm() <= 1e-12);
    }

    #[test]
    fn geodesic_endpoints_and_midpoints() {
        let m = EmbeddedManifold::parse(&["circle", "euclidean:1"]).unwrap();
        let x0 = v(&[1.0, 0.0, 2.0]);
        let x1 = v(&[0.0, 1.0, -4.0]);
        assert_relative_eq!(m.geodesic_interpolate(&x0, &x1, 0.0).unwrap(), x0);
        assert_relative_eq!(m.geodesic_interpolate(&x0, &x1, 1.0).unwrap(), x1, epsilon = 1e-15);
        let mid = m.geodesic_interpolate(&x0, &x1, 0.5).unwrap();
        let h = 0.5_f64.sqrt();
        assert_relative_eq!(mid, v(&[h, h, -1.0]), epsilon = 1e-15);
    }

    /// Frozen from the great-circle formula sin((1-s)t)/sin(t) q0 + sin(st)/sin(t) q1
    /// with t = pi/2.
    #[test]
    fn sphere_interpolation_quarter_turn() {
        let m = sphere();
        let q0 = v(&[1.0, 0.0, 0.0, 0.0]);
        let q1 = v(&[0.0, 1.0, 0.0, 0.0]);
        let mid = m.geodesic_interpolate(&q0, &q1, 0.5).unwrap();
        let h = 0.5_f64.sqrt();
        assert_relative_eq!(mid, v(&[h, h, 0.0, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn geodesic_rejects_antipodal_blocks() {
        let m = circle();
        assert!(matches!(
            m.geodesic_interpolate(&v(&[1.0, 0.0]), &v(&[-1.0, 0.0]), 0.5),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn circle_interpolation_takes_the_shorter_arc() {
        let m = circle();
        let x0 = v(&[1.0, 0.0]);
        let x1 = v(&[0.0, -1.0]); // -90 degrees is shorter than +270
        let mid = m.geodesic_interpolate(&x0, &x1, 0.5).unwrap();
        let h = 0.5_f64.sqrt();
        assert_relative_eq!(mid, v(&[h, -h]), epsilon = 1e-15);
    }
}

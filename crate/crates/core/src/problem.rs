//! Optimal control problem data: integral cost, control box, pointwise state
//! constraints and obstacle penalties.
//!
//! The running cost is `u^T R u + u . f0_u(x) + g_a(x) + omega * g_b(x)`,
//! where `g_b` is a smooth penalty accumulated over analytic obstacles. The
//! obstacle penalty shares its smoothing sharpness with the trust-region
//! surrogate so the two are controlled by one knob.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::ControlAffineSystem;
use crate::transcription::{smooth_max, smooth_max_grad};
use crate::{Error, Real, Result};

/// Scalar state cost and its gradient.
pub type ScalarFn<S> = Arc<dyn Fn(&DVector<S>) -> S + Send + Sync>;
pub type GradFn<S> = Arc<dyn Fn(&DVector<S>) -> DVector<S> + Send + Sync>;
/// Control-coupled cost term `f0_u` and its m x N Jacobian.
pub type CouplingFn<S> = Arc<dyn Fn(&DVector<S>) -> DVector<S> + Send + Sync>;
pub type CouplingJacFn<S> = Arc<dyn Fn(&DVector<S>) -> DMatrix<S> + Send + Sync>;

/// Obstacle geometry in the workspace.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape<S: Real> {
    Sphere { center: DVector<S>, radius: S },
    Box { min: DVector<S>, max: DVector<S> },
}

impl<S: Real> Shape<S> {
    pub fn workspace_dim(&self) -> usize {
        match self {
            Shape::Sphere { center, .. } => center.len(),
            Shape::Box { min, .. } => min.len(),
        }
    }
}

/// How workspace points are read off the state vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Extraction {
    /// A contiguous block of state indices is the workspace position.
    StateBlock { start: usize, len: usize },
    /// Planar forward kinematics of a unit-link chain whose joints are the
    /// circle blocks (x_j, y_j); yields one point per link endpoint. Works
    /// directly on the embedded coordinates, no angles involved.
    PlanarChain { joints: usize },
}

impl Extraction {
    pub fn workspace_dim(&self) -> usize {
        match self {
            Extraction::StateBlock { len, .. } => *len,
            Extraction::PlanarChain { .. } => 2,
        }
    }

    /// Workspace points with their Jacobians w.r.t. the full state.
    pub fn eval<S: Real>(&self, x: &DVector<S>) -> Vec<(DVector<S>, DMatrix<S>)> {
        let n = x.len();
        match self {
            Extraction::StateBlock { start, len } => {
                let p = x.rows(*start, *len).clone_owned();
                let mut jac = DMatrix::zeros(*len, n);
                for k in 0..*len {
                    jac[(k, start + k)] = S::one();
                }
                vec![(p, jac)]
            }
            Extraction::PlanarChain { joints } => {
                let k = *joints;
                // Cumulative complex products c_j = z_1 * ... * z_j.
                let z: Vec<(S, S)> = (0..k).map(|j| (x[2 * j], x[2 * j + 1])).collect();
                let mut cum = Vec::with_capacity(k);
                let mut acc = (S::one(), S::zero());
                for zj in &z {
                    acc = cmul(acc, *zj);
                    cum.push(acc);
                }
                // d c_j / d z_l = prod_{i <= j, i != l} z_i (complex).
                let mut out = Vec::with_capacity(k);
                let mut p = (S::zero(), S::zero());
                let mut jac = DMatrix::zeros(2, n);
                for j in 0..k {
                    p.0 += cum[j].0;
                    p.1 += cum[j].1;
                    for l in 0..=j {
                        let mut d = (S::one(), S::zero());
                        for (i, zi) in z.iter().enumerate().take(j + 1) {
                            if i != l {
                                d = cmul(d, *zi);
                            }
                        }
                        // p is complex-analytic in z_l: the Jacobian block is
                        // the rotation-scaling matrix of the derivative.
                        jac[(0, 2 * l)] += d.0;
                        jac[(0, 2 * l + 1)] -= d.1;
                        jac[(1, 2 * l)] += d.1;
                        jac[(1, 2 * l + 1)] += d.0;
                    }
                    out.push((DVector::from_vec(vec![p.0, p.1]), jac.clone()));
                }
                out
            }
        }
    }
}

fn cmul<S: Real>((a, b): (S, S), (c, d): (S, S)) -> (S, S) {
    (a * c - b * d, a * d + b * c)
}

/// An analytic obstacle together with the map from states to the workspace
/// points it is checked against.
#[derive(Debug, Clone)]
pub struct Obstacle<S: Real> {
    pub shape: Shape<S>,
    pub extraction: Extraction,
}

/// Exact signed distance to the shape surface, negative inside.
pub fn signed_distance<S: Real>(shape: &Shape<S>, p: &DVector<S>) -> S {
    match shape {
        Shape::Sphere { center, radius } => (p - center).norm() - *radius,
        Shape::Box { min, max } => {
            let mut outside_sq = S::zero();
            let mut inside = S::lit(f64::NEG_INFINITY);
            for k in 0..p.len() {
                let d = (min[k] - p[k]).max(p[k] - max[k]);
                if d > S::zero() {
                    outside_sq += d * d;
                } else {
                    inside = inside.max(d);
                }
            }
            if outside_sq > S::zero() {
                outside_sq.sqrt()
            } else {
                inside
            }
        }
    }
}

/// Gradient of the signed distance w.r.t. the workspace point. At
/// non-differentiable loci (sphere center, box ridge) an arbitrary
/// subgradient is returned.
pub fn signed_distance_gradient<S: Real>(shape: &Shape<S>, p: &DVector<S>) -> DVector<S> {
    match shape {
        Shape::Sphere { center, radius: _ } => {
            let d = p - center;
            let n = d.norm();
            if n <= S::lit(1e-12) {
                DVector::zeros(p.len())
            } else {
                d / n
            }
        }
        Shape::Box { min, max } => {
            let dim = p.len();
            let mut v = DVector::zeros(dim);
            let mut any_outside = false;
            for k in 0..dim {
                let lo = min[k] - p[k];
                let hi = p[k] - max[k];
                if lo > S::zero() {
                    v[k] = -lo;
                    any_outside = true;
                } else if hi > S::zero() {
                    v[k] = hi;
                    any_outside = true;
                }
            }
            if any_outside {
                let n = v.norm();
                return v / n;
            }
            // Inside: distance grows toward the nearest face.
            let mut best = S::lit(f64::NEG_INFINITY);
            let mut axis = 0;
            let mut sign = S::one();
            for k in 0..dim {
                let lo = min[k] - p[k];
                let hi = p[k] - max[k];
                if lo > best {
                    best = lo;
                    axis = k;
                    sign = -S::one();
                }
                if hi > best {
                    best = hi;
                    axis = k;
                    sign = S::one();
                }
            }
            let mut v = DVector::zeros(dim);
            v[axis] = sign;
            v
        }
    }
}

/// Pointwise state constraint `G(x(t)) = 0` at a fixed time.
#[derive(Debug, Clone)]
pub struct Waypoint<S: Real> {
    pub time: S,
    pub map: WaypointMap<S>,
}

#[derive(Debug, Clone)]
pub enum WaypointMap<S: Real> {
    /// Affine map matching selected state entries to target values:
    /// `G(x) = x[indices] - values`.
    StateTarget {
        indices: Vec<usize>,
        values: DVector<S>,
    },
}

impl<S: Real> Waypoint<S> {
    pub fn full_state(time: S, target: DVector<S>) -> Self {
        let indices = (0..target.len()).collect();
        Self {
            time,
            map: WaypointMap::StateTarget {
                indices,
                values: target,
            },
        }
    }

    pub fn partial(time: S, indices: Vec<usize>, values: DVector<S>) -> Self {
        Self {
            time,
            map: WaypointMap::StateTarget { indices, values },
        }
    }

    /// Number of constraint rows r_i.
    pub fn dim(&self) -> usize {
        match &self.map {
            WaypointMap::StateTarget { indices, .. } => indices.len(),
        }
    }

    pub fn eval(&self, x: &DVector<S>) -> DVector<S> {
        match &self.map {
            WaypointMap::StateTarget { indices, values } => {
                DVector::from_fn(indices.len(), |k, _| x[indices[k]] - values[k])
            }
        }
    }

    pub fn jacobian(&self, x: &DVector<S>) -> DMatrix<S> {
        match &self.map {
            WaypointMap::StateTarget { indices, .. } => {
                let mut jac = DMatrix::zeros(indices.len(), x.len());
                for (k, &i) in indices.iter().enumerate() {
                    jac[(k, i)] = S::one();
                }
                jac
            }
        }
    }

    /// True when the constraint pins every state coordinate.
    pub fn is_full_state(&self, n: usize) -> bool {
        self.dim() == n
    }
}

/// The optimal control problem solved by the outer loop.
#[derive(Clone)]
pub struct OcpProblem<S: Real> {
    pub system: ControlAffineSystem<S>,
    /// Control weight R, symmetric positive-definite.
    pub r_weight: DMatrix<S>,
    /// Optional linear-in-u cost coupling and its Jacobian; zero when absent.
    pub f0_u: Option<(CouplingFn<S>, CouplingJacFn<S>)>,
    /// Optional purely state-dependent cost and its gradient; zero when absent.
    pub g_a: Option<(ScalarFn<S>, GradFn<S>)>,
    pub obstacles: Vec<Obstacle<S>>,
    /// Initial state, on the manifold.
    pub x0: DVector<S>,
    /// Pointwise constraints ordered by time; the last one sits at the horizon.
    pub waypoints: Vec<Waypoint<S>>,
    pub control_lo: DVector<S>,
    pub control_hi: DVector<S>,
    /// Final time t_l in seconds.
    pub horizon: S,
    /// Obstacle safety margin in meters.
    pub d_safe: S,
    /// Smoothing sharpness shared between the obstacle penalty and the
    /// trust-region surrogate.
    pub penalty_sharpness: S,
}

impl<S: Real> std::fmt::Debug for OcpProblem<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OcpProblem")
            .field("system", &self.system)
            .field("waypoints", &self.waypoints.len())
            .field("obstacles", &self.obstacles.len())
            .field("horizon", &self.horizon.to_f64_lossy())
            .finish()
    }
}

impl<S: Real> OcpProblem<S> {
    pub fn new(
        system: ControlAffineSystem<S>,
        r_weight: DMatrix<S>,
        x0: DVector<S>,
        waypoints: Vec<Waypoint<S>>,
        control_lo: DVector<S>,
        control_hi: DVector<S>,
        horizon: S,
    ) -> Self {
        Self {
            system,
            r_weight,
            f0_u: None,
            g_a: None,
            obstacles: Vec::new(),
            x0,
            waypoints,
            control_lo,
            control_hi,
            horizon,
            d_safe: S::lit(0.05),
            penalty_sharpness: S::lit(20.0),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.system.control_dim()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.state_dim();
        let m = self.control_dim();
        if self.r_weight.nrows() != m || self.r_weight.ncols() != m {
            return Err(Error::DimensionMismatch {
                what: "control weight R",
                expected: m,
                got: self.r_weight.nrows(),
            });
        }
        let sym_err = (&self.r_weight - self.r_weight.transpose()).norm();
        if sym_err > S::lit(1e-12) * (S::one() + self.r_weight.norm()) {
            return Err(Error::InvalidProblem("R must be symmetric".into()));
        }
        if self.r_weight.clone().cholesky().is_none() {
            return Err(Error::InvalidProblem(
                "R must be positive-definite (Cholesky failed)".into(),
            ));
        }
        if self.x0.len() != n {
            return Err(Error::DimensionMismatch {
                what: "initial state",
                expected: n,
                got: self.x0.len(),
            });
        }
        if self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("initial state must be finite".into()));
        }
        let res = self.system.manifold().residual_norm(&self.x0)?.to_f64_lossy();
        if !(res <= 1e-10) {
            return Err(Error::InvalidProblem(format!(
                "initial state is off the manifold (residual {res:.3e} > 1e-10)"
            )));
        }
        if self.control_lo.len() != m || self.control_hi.len() != m {
            return Err(Error::DimensionMismatch {
                what: "control bounds",
                expected: m,
                got: self.control_lo.len(),
            });
        }
        for k in 0..m {
            if !(self.control_lo[k] <= self.control_hi[k])
                || !self.control_lo[k].is_finite()
                || !self.control_hi[k].is_finite()
            {
                return Err(Error::InvalidProblem(
                    "control box must be finite with lo <= hi".into(),
                ));
            }
        }
        if self.horizon <= S::zero() {
            return Err(Error::InvalidProblem("horizon must be positive".into()));
        }
        if self.waypoints.is_empty() {
            return Err(Error::InvalidProblem(
                "at least one pointwise constraint (the goal) is required".into(),
            ));
        }
        let mut prev = S::zero();
        for (i, wp) in self.waypoints.iter().enumerate() {
            if wp.time <= prev {
                return Err(Error::InvalidProblem(format!(
                    "waypoint {i} time must be strictly increasing and positive"
                )));
            }
            if wp.time > self.horizon + S::lit(1e-9) {
                return Err(Error::InvalidProblem(format!(
                    "waypoint {i} time {:.6} exceeds the horizon {:.6}",
                    wp.time.to_f64_lossy(),
                    self.horizon.to_f64_lossy()
                )));
            }
            prev = wp.time;
            match &wp.map {
                WaypointMap::StateTarget { indices, values } => {
                    if indices.is_empty() || indices.len() != values.len() {
                        return Err(Error::InvalidProblem(format!(
                            "waypoint {i} has inconsistent index/value lengths"
                        )));
                    }
                    let mut seen = vec![false; n];
                    for &ix in indices {
                        if ix >= n {
                            return Err(Error::InvalidProblem(format!(
                                "waypoint {i} index {ix} out of range"
                            )));
                        }
                        if seen[ix] {
                            return Err(Error::InvalidProblem(format!(
                                "waypoint {i} repeats index {ix} (Jacobian would be rank-deficient)"
                            )));
                        }
                        seen[ix] = true;
                    }
                }
            }
        }
        let last = self.waypoints.last().unwrap();
        if (last.time - self.horizon).abs() > S::lit(1e-9) {
            return Err(Error::InvalidProblem(
                "the last waypoint must sit at the horizon".into(),
            ));
        }
        for (i, obs) in self.obstacles.iter().enumerate() {
            let wdim = obs.extraction.workspace_dim();
            if obs.shape.workspace_dim() != wdim {
                return Err(Error::InvalidProblem(format!(
                    "obstacle {i}: shape dimension {} does not match extraction dimension {wdim}",
                    obs.shape.workspace_dim()
                )));
            }
            match &obs.shape {
                Shape::Sphere { radius, .. } => {
                    if *radius <= S::zero() {
                        return Err(Error::InvalidProblem(format!(
                            "obstacle {i}: radius must be positive"
                        )));
                    }
                }
                Shape::Box { min, max } => {
                    for k in 0..min.len() {
                        if !(min[k] < max[k]) {
                            return Err(Error::InvalidProblem(format!(
                                "obstacle {i}: box min must be below max componentwise"
                            )));
                        }
                    }
                }
            }
            match &obs.extraction {
                Extraction::StateBlock { start, len } => {
                    if start + len > n {
                        return Err(Error::InvalidProblem(format!(
                            "obstacle {i}: extraction block exceeds the state dimension"
                        )));
                    }
                }
                Extraction::PlanarChain { joints } => {
                    if 2 * joints > n {
                        return Err(Error::InvalidProblem(format!(
                            "obstacle {i}: chain joints exceed the state dimension"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn f0_u_value(&self, x: &DVector<S>) -> DVector<S> {
        match &self.f0_u {
            Some((f, _)) => f(x),
            None => DVector::zeros(self.control_dim()),
        }
    }

    pub fn f0_u_jacobian(&self, x: &DVector<S>) -> DMatrix<S> {
        match &self.f0_u {
            Some((_, j)) => j(x),
            None => DMatrix::zeros(self.control_dim(), self.state_dim()),
        }
    }

    pub fn g_a_value(&self, x: &DVector<S>) -> S {
        match &self.g_a {
            Some((f, _)) => f(x),
            None => S::zero(),
        }
    }

    pub fn g_a_gradient(&self, x: &DVector<S>) -> DVector<S> {
        match &self.g_a {
            Some((_, g)) => g(x),
            None => DVector::zeros(self.state_dim()),
        }
    }

    /// Smooth obstacle penalty and its gradient:
    /// `sum_obs sum_points softplus(d_safe - sd(p(x)))^2`.
    pub fn penalty_g_b(&self, x: &DVector<S>) -> (S, DVector<S>) {
        let beta = self.penalty_sharpness;
        let mut value = S::zero();
        let mut grad = DVector::zeros(self.state_dim());
        for obs in &self.obstacles {
            for (p, jac) in obs.extraction.eval(x) {
                let sd = signed_distance(&obs.shape, &p);
                let arg = self.d_safe - sd;
                let h = smooth_max(arg, beta);
                if h > S::lit(1e-300) {
                    value += h * h;
                    let dh = smooth_max_grad(arg, beta);
                    let sd_grad = signed_distance_gradient(&obs.shape, &p);
                    // d/dx [h(arg)^2] = -2 h h' J_p^T grad_sd
                    let chain = jac.transpose() * sd_grad;
                    grad.axpy(-S::lit(2.0) * h * dh, &chain, S::one());
                }
            }
        }
        (value, grad)
    }

    /// `g(x) = g_a(x) + omega * g_b(x)` with gradient.
    pub fn state_cost(&self, x: &DVector<S>, omega: S) -> (S, DVector<S>) {
        let (pen, pen_grad) = self.penalty_g_b(x);
        let value = self.g_a_value(x) + omega * pen;
        let mut grad = self.g_a_gradient(x);
        grad.axpy(omega, &pen_grad, S::one());
        (value, grad)
    }

    /// Running cost integrand at a single (x, u).
    pub fn running_cost(&self, x: &DVector<S>, u: &DVector<S>, omega: S) -> S {
        let quad = (&self.r_weight * u).dot(u);
        let coupling = self.f0_u_value(x).dot(u);
        let (g, _) = self.state_cost(x, omega);
        quad + coupling + g
    }

    /// Worst clearance shortfall over obstacles: `max(0, d_safe - min sd)`.
    /// Zero means every checked point keeps the safety margin.
    pub fn max_violation(&self, x: &DVector<S>) -> S {
        let mut worst = S::zero();
        for obs in &self.obstacles {
            for (p, _) in obs.extraction.eval(x) {
                let sd = signed_distance(&obs.shape, &p);
                worst = worst.max(self.d_safe - sd);
            }
        }
        worst
    }

    /// Smallest signed distance over obstacles and extraction points.
    pub fn min_clearance(&self, x: &DVector<S>) -> S {
        let mut best = S::lit(f64::INFINITY);
        for obs in &self.obstacles {
            for (p, _) in obs.extraction.eval(x) {
                best = best.min(signed_distance(&obs.shape, &p));
            }
        }
        best
    }

    pub fn r_is_diagonal(&self) -> bool {
        let m = self.r_weight.nrows();
        for r in 0..m {
            for c in 0..m {
                if r != c && self.r_weight[(r, c)] != S::zero() {
                    return false;
                }
            }
        }
        true
    }

    pub fn clamp_control(&self, u: &DVector<S>) -> DVector<S> {
        DVector::from_fn(u.len(), |k, _| {
            u[k].clamp(self.control_lo[k], self.control_hi[k])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::models::{torus_manipulator, ModelSpec};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(data)
    }

    fn sphere(center: &[f64], radius: f64) -> Shape<f64> {
        Shape::Sphere {
            center: v(center),
            radius,
        }
    }

    fn di_problem(obstacles: Vec<Obstacle<f64>>) -> OcpProblem<f64> {
        let sys = ModelSpec::DoubleIntegrator { dim: 3 }.build().unwrap();
        let mut prob = OcpProblem::new(
            sys,
            DMatrix::identity(3, 3),
            DVector::zeros(6),
            vec![Waypoint::full_state(1.0, v(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]))],
            v(&[-10.0, -10.0, -10.0]),
            v(&[10.0, 10.0, 10.0]),
            1.0,
        );
        prob.obstacles = obstacles;
        prob
    }

    #[test]
    fn signed_distance_examples() {
        let s = sphere(&[0.0, 0.0, 0.0], 1.0);
        assert_relative_eq!(signed_distance(&s, &v(&[2.0, 0.0, 0.0])), 1.0);
        assert_relative_eq!(signed_distance(&s, &v(&[0.0, 0.0, 0.0])), -1.0);
        let b = Shape::Box {
            min: v(&[-1.0, -1.0, -1.0]),
            max: v(&[1.0, 1.0, 1.0]),
        };
        assert_relative_eq!(signed_distance(&b, &v(&[2.0, 2.0, 0.0])), 2f64.sqrt());
        assert_relative_eq!(signed_distance(&b, &v(&[0.5, 0.0, 0.0])), -0.5);
    }

    #[test]
    fn box_gradient_matches_finite_differences() {
        let b = Shape::Box {
            min: v(&[-1.0, -0.5]),
            max: v(&[1.0, 0.5]),
        };
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..200 {
            let p = v(&[rng.random_range(-2.0..2.0), rng.random_range(-1.5..1.5)]);
            // Skip points near ridges where the gradient jumps.
            let sd = signed_distance(&b, &p);
            if sd.abs() < 1e-3 {
                continue;
            }
            let g = signed_distance_gradient(&b, &p);
            let h = 1e-6;
            for k in 0..2 {
                let mut pp = p.clone();
                let mut pm = p.clone();
                pp[k] += h;
                pm[k] -= h;
                let fd = (signed_distance(&b, &pp) - signed_distance(&b, &pm)) / (2.0 * h);
                if (fd - g[k]).abs() > 1e-4 {
                    // Ridge crossing; the subgradient is allowed to disagree.
                    continue;
                }
                assert_relative_eq!(g[k], fd, epsilon = 1e-4);
            }
        }
    }

    #[test]
    fn penalty_is_inactive_far_from_obstacles() {
        let prob = di_problem(vec![Obstacle {
            shape: sphere(&[50.0, 0.0, 0.0], 1.0),
            extraction: Extraction::StateBlock { start: 0, len: 3 },
        }]);
        let (val, grad) = prob.penalty_g_b(&DVector::zeros(6));
        assert!(val <= 1e-12);
        assert!(grad.norm() <= 1e-12);
    }

    /// At the sphere center the argument of the smoothed max is d_safe + r,
    /// deep in the active branch, so the value is (d_safe + r)^2 up to the
    /// smoothing gap log(2)/beta.
    #[test]
    fn penalty_value_at_sphere_center() {
        let r = 0.8;
        let prob = di_problem(vec![Obstacle {
            shape: sphere(&[0.0, 0.0, 0.0], r),
            extraction: Extraction::StateBlock { start: 0, len: 3 },
        }]);
        let (val, _) = prob.penalty_g_b(&DVector::zeros(6));
        let s = prob.d_safe + r;
        let gap = 2.0_f64.ln() / prob.penalty_sharpness;
        assert!((val - s * s).abs() <= gap * (2.0 * s + gap) + 1e-12);
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let prob = di_problem(vec![
            Obstacle {
                shape: sphere(&[0.6, 0.1, -0.2], 0.5),
                extraction: Extraction::StateBlock { start: 0, len: 3 },
            },
            Obstacle {
                shape: Shape::Box {
                    min: v(&[-0.2, -0.8, -0.4]),
                    max: v(&[0.3, -0.2, 0.4]),
                },
                extraction: Extraction::StateBlock { start: 0, len: 3 },
            },
        ]);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..100 {
            let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let (_, grad) = prob.penalty_g_b(&x);
            let h = 1e-6;
            for k in 0..6 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (prob.penalty_g_b(&xp).0 - prob.penalty_g_b(&xm).0) / (2.0 * h);
                assert!(
                    (grad[k] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                    "grad[{k}] = {} vs fd {}",
                    grad[k],
                    fd
                );
            }
        }
    }

    /// The penalty is continuous across the activation boundary: scan a ray
    /// crossing d_safe and bound successive differences by the local slope.
    #[test]
    fn penalty_is_continuous_across_activation() {
        let prob = di_problem(vec![Obstacle {
            shape: sphere(&[0.0, 0.0, 0.0], 0.5),
            extraction: Extraction::StateBlock { start: 0, len: 3 },
        }]);
        let mut prev: Option<f64> = None;
        let n = 4000;
        let mut max_jump = 0.0_f64;
        for i in 0..=n {
            let t = 0.4 + 0.4 * (i as f64) / (n as f64); // crosses r + d_safe = 0.55
            let x = v(&[t, 0.0, 0.0, 0.0, 0.0, 0.0]);
            let (val, _) = prob.penalty_g_b(&x);
            if let Some(p) = prev {
                max_jump = max_jump.max((val - p).abs());
            }
            prev = Some(val);
        }
        // Lipschitz bound: |d/dt| <= 2 * smooth_max * 1 <= 2 * 0.65 within the
        // scanned window, times the step 1e-4.
        assert!(max_jump <= 2.0 * 0.65 * (0.4 / n as f64) * 1.5);
    }

    #[test]
    fn running_cost_examples() {
        let prob = di_problem(vec![]);
        assert_relative_eq!(prob.running_cost(&DVector::zeros(6), &DVector::zeros(3), 1.0), 0.0);
        let sys = ModelSpec::DoubleIntegrator { dim: 2 }.build().unwrap();
        let prob2 = OcpProblem::new(
            sys,
            DMatrix::identity(2, 2),
            DVector::zeros(4),
            vec![Waypoint::full_state(1.0, DVector::zeros(4))],
            v(&[-1.0, -1.0]),
            v(&[1.0, 1.0]),
            1.0,
        );
        assert_relative_eq!(
            prob2.running_cost(&DVector::zeros(4), &v(&[1.0, 2.0]), 1.0),
            5.0
        );
    }

    /// Midpoint convexity of the running cost in u for fixed x.
    #[test]
    fn running_cost_is_convex_in_u() {
        let mut r = DMatrix::identity(3, 3);
        r[(0, 1)] = 0.3;
        r[(1, 0)] = 0.3;
        r[(2, 2)] = 2.0;
        let sys = ModelSpec::DoubleIntegrator { dim: 3 }.build().unwrap();
        let prob = OcpProblem::new(
            sys,
            r,
            DVector::zeros(6),
            vec![Waypoint::full_state(1.0, DVector::zeros(6))],
            DVector::from_element(3, -5.0),
            DVector::from_element(3, 5.0),
            1.0,
        );
        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..100 {
            let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let u1 = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let u2 = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
            let mid = (&u1 + &u2) * 0.5;
            let lhs = prob.running_cost(&x, &mid, 1.0);
            let rhs: f64 = 0.5 * (prob.running_cost(&x, &u1, 1.0) + prob.running_cost(&x, &u2, 1.0));
            assert!(lhs <= rhs + 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn chain_extraction_matches_angles() {
        // Two joints at angles a1, a2: endpoint positions from elementary
        // trigonometry are the oracle.
        let (a1, a2) = (0.4_f64, -1.1_f64);
        let x = v(&[a1.cos(), a1.sin(), a2.cos(), a2.sin()]);
        let points = Extraction::PlanarChain { joints: 2 }.eval(&x);
        assert_eq!(points.len(), 2);
        assert_relative_eq!(points[0].0[0], a1.cos(), epsilon = 1e-14);
        assert_relative_eq!(points[0].0[1], a1.sin(), epsilon = 1e-14);
        assert_relative_eq!(points[1].0[0], a1.cos() + (a1 + a2).cos(), epsilon = 1e-14);
        assert_relative_eq!(points[1].0[1], a1.sin() + (a1 + a2).sin(), epsilon = 1e-14);
    }

    #[test]
    fn chain_jacobian_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(17);
        let ext = Extraction::PlanarChain { joints: 3 };
        for _ in 0..50 {
            let x = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
            let points = ext.eval(&x);
            let h = 1e-6;
            for (pi, (_, jac)) in points.iter().enumerate() {
                for k in 0..6 {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (&ext.eval(&xp)[pi].0 - &ext.eval(&xm)[pi].0) / (2.0 * h);
                    for r in 0..2 {
                        assert_relative_eq!(jac[(r, k)], fd[r], epsilon = 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn manipulator_problem_with_chain_obstacle_validates() {
        let sys = torus_manipulator::<f64>(2).unwrap();
        let x0 = v(&[1.0, 0.0, 1.0, 0.0]);
        let mut prob = OcpProblem::new(
            sys,
            DMatrix::identity(2, 2),
            x0,
            vec![Waypoint::full_state(5.0, v(&[0.0, 1.0, 0.0, 1.0]))],
            v(&[-1.0, -1.0]),
            v(&[1.0, 1.0]),
            5.0,
        );
        prob.obstacles.push(Obstacle {
            shape: Shape::Sphere {
                center: v(&[1.5, 1.5]),
                radius: 0.3,
            },
            extraction: Extraction::PlanarChain { joints: 2 },
        });
        prob.validate().unwrap();
    }

    #[test]
    fn validation_catches_bad_inputs() {
        let mut prob = di_problem(vec![]);
        prob.waypoints[0].time = 2.0; // beyond the horizon
        assert!(prob.validate().is_err());

        let mut prob = di_problem(vec![]);
        prob.r_weight[(0, 0)] = -1.0;
        assert!(prob.validate().is_err());

        let mut prob = di_problem(vec![]);
        prob.x0[0] = f64::NAN;
        assert!(prob.validate().is_err());

        let mut prob = di_problem(vec![]);
        prob.control_hi[1] = f64::INFINITY;
        assert!(prob.validate().is_err());

        assert!(di_problem(vec![]).validate().is_ok());
    }
}

//! Trapezoidal transcription of the linearized subproblems into QP data.
//!
//! Decision variables are stacked as `z = (x_1..x_d, u_1..u_{d-1})`. The
//! linearized dynamics enter exclusively as equality rows (never as cost
//! terms), one trapezoidal defect block per interval with a zero-order hold
//! on the control; the initial state and the linearized waypoint maps add
//! further equality rows. The cost collects the control quadratic, the
//! linearized state cost and a convex quadratic surrogate of the smooth
//! trust-region penalty. Bounds apply to controls only.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::ControlAffineSystem;
use crate::problem::OcpProblem;
use crate::{Error, Real, Result};

/// `log(1 + exp(beta s)) / beta`, a smooth approximation of `max(0, s)` with
/// uniform gap `log(2)/beta`. Overflow-safe on both tails.
pub fn smooth_max<S: Real>(s: S, beta: S) -> S {
    let t = beta * s;
    let cut = S::lit(35.0);
    if t > cut {
        s + (-t).exp() / beta
    } else if t < -cut {
        t.exp() / beta
    } else {
        (S::one() + t.exp()).ln() / beta
    }
}

/// Derivative of [`smooth_max`] in `s`: the logistic `1 / (1 + exp(-beta s))`.
pub fn smooth_max_grad<S: Real>(s: S, beta: S) -> S {
    let t = beta * s;
    let cut = S::lit(35.0);
    if t > cut {
        S::one() - (-t).exp()
    } else if t < -cut {
        t.exp()
    } else {
        S::one() / (S::one() + (-t).exp())
    }
}

/// Affine dynamics model around an expansion point:
/// `F_lin(x, u) = c + A (x - x_k) + B u` with `A` evaluated at the frozen
/// previous control, `B` the control fields at the expansion state and `c`
/// the drift there. Exact at the expansion point by construction.
pub fn linearize_dynamics<S: Real>(
    sys: &ControlAffineSystem<S>,
    x_k: &DVector<S>,
    u_k: &DVector<S>,
) -> Result<(DMatrix<S>, DMatrix<S>, DVector<S>)> {
    let (a, b) = sys.eval_jacobians(x_k, u_k)?;
    Ok((a, b, sys.drift(x_k)))
}

/// State/control sequences on a uniform grid. Controls are stored per node
/// for shape uniformity; the last one is unused by the transcription.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteTrajectory<S: Real> {
    pub times: Vec<S>,
    pub states: Vec<DVector<S>>,
    pub controls: Vec<DVector<S>>,
}

impl<S: Real> DiscreteTrajectory<S> {
    pub fn new(times: Vec<S>, states: Vec<DVector<S>>, controls: Vec<DVector<S>>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Construction("need at least two grid points".into()));
        }
        if states.len() != times.len() || controls.len() != times.len() {
            return Err(Error::Construction(
                "states and controls must have one entry per grid point".into(),
            ));
        }
        let d = times.len();
        let span = times[d - 1] - times[0];
        if span <= S::zero() {
            return Err(Error::Construction("times must be increasing".into()));
        }
        let dt = span / S::from_usize(d - 1).unwrap();
        let tol = S::lit(1e-12) * (S::one() + span.abs());
        for i in 0..d - 1 {
            if ((times[i + 1] - times[i]) - dt).abs() > tol {
                return Err(Error::Construction(format!(
                    "grid spacing is not uniform at index {i}"
                )));
            }
        }
        Ok(Self {
            times,
            states,
            controls,
        })
    }

    /// Number of grid points d.
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dt(&self) -> S {
        (self.times[self.len() - 1] - self.times[0]) / S::from_usize(self.len() - 1).unwrap()
    }

    /// Sup-norm of the state difference against another trajectory.
    pub fn state_distance(&self, other: &Self) -> S {
        let mut worst = S::zero();
        for (a, b) in self.states.iter().zip(&other.states) {
            worst = worst.max((a - b).amax());
        }
        worst
    }

    /// Sup-norm of the control difference on the d-1 used controls.
    pub fn control_distance(&self, other: &Self) -> S {
        let mut worst = S::zero();
        for (a, b) in self.controls.iter().zip(&other.controls).take(self.len() - 1) {
            worst = worst.max((a - b).amax());
        }
        worst
    }
}

/// Trust-region and penalty-weight schedule for the outer loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ScpParams<S: Real> {
    /// Initial (and maximal) trust radius, in squared state units.
    pub delta0: S,
    pub omega0: S,
    pub omega_max: S,
    /// Sharpness of the smooth max used for the trust region and penalties.
    pub beta_sharp: S,
    /// Accept and grow the radius at or above this ratio.
    pub rho_accept: S,
    /// Reject and shrink below this ratio.
    pub rho_reject: S,
    pub shrink_factor: S,
    pub grow_factor: S,
    /// Penalty growth applied when an accepted iterate violates obstacles.
    pub omega_growth: S,
    /// Max allowed clearance shortfall (penetration past d_safe).
    pub violation_tol: S,
    pub eps_conv_state: S,
    pub eps_conv_control: S,
    pub max_iters: usize,
    /// Weight of the linearized manifold-residual penalty; zero disables it
    /// (the default: manifold satisfaction comes from hard dynamics).
    pub omega_manifold: S,
    /// Exact-penalty weight on the nonlinear defect norms in the acceptance
    /// merit. Infeasible iterates (the initialization in particular) must
    /// score worse than feasible ones for the ratio test to make sense.
    pub merit_defect_weight: S,
    pub qp_tol: S,
    pub qp_max_iter: usize,
}

impl<S: Real> Default for ScpParams<S> {
    fn default() -> Self {
        Self {
            delta0: S::lit(10.0),
            omega0: S::one(),
            omega_max: S::lit(1e6),
            beta_sharp: S::lit(20.0),
            rho_accept: S::lit(0.25),
            rho_reject: S::lit(0.05),
            shrink_factor: S::lit(0.5),
            grow_factor: S::lit(2.0),
            omega_growth: S::lit(5.0),
            violation_tol: S::lit(1e-3),
            eps_conv_state: S::lit(1e-4),
            eps_conv_control: S::lit(1e-4),
            max_iters: 50,
            omega_manifold: S::zero(),
            merit_defect_weight: S::lit(1e3),
            qp_tol: S::lit(1e-8),
            qp_max_iter: 20_000,
        }
    }
}

impl<S: Real> ScpParams<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta0 > S::zero()) {
            return Err(Error::InvalidParams("delta0 must be positive".into()));
        }
        if !(S::one() <= self.omega0 && self.omega0 <= self.omega_max) {
            return Err(Error::InvalidParams(
                "need 1 <= omega0 <= omega_max".into(),
            ));
        }
        if !(S::zero() < self.rho_reject && self.rho_reject < self.rho_accept && self.rho_accept < S::one())
        {
            return Err(Error::InvalidParams(
                "need 0 < rho_reject < rho_accept < 1".into(),
            ));
        }
        if !(S::zero() < self.shrink_factor && self.shrink_factor < S::one()) {
            return Err(Error::InvalidParams("shrink factor must be in (0, 1)".into()));
        }
        if !(self.grow_factor > S::one()) {
            return Err(Error::InvalidParams("grow factor must exceed 1".into()));
        }
        if !(self.beta_sharp > S::zero()) {
            return Err(Error::InvalidParams("beta_sharp must be positive".into()));
        }
        if !(self.eps_conv_state > S::zero() && self.eps_conv_control > S::zero()) {
            return Err(Error::InvalidParams("convergence tolerances must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidParams("max_iters must be >= 1".into()));
        }
        if !(self.omega_growth > S::one()) {
            return Err(Error::InvalidParams("omega growth must exceed 1".into()));
        }
        if !(self.merit_defect_weight > S::zero()) {
            return Err(Error::InvalidParams("merit defect weight must be positive".into()));
        }
        if !(self.qp_tol > S::zero()) || self.qp_max_iter == 0 {
            return Err(Error::InvalidParams("QP tolerance and iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Sparse matrix in unordered triplet form; duplicates add.
#[derive(Debug, Clone, PartialEq)]
pub struct CooMatrix<S> {
    pub nrows: usize,
    pub ncols: usize,
    pub triplets: Vec<(usize, usize, S)>,
}

impl<S: Real> CooMatrix<S> {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            triplets: Vec::new(),
        }
    }

    pub fn push(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r < self.nrows && c < self.ncols);
        if v != S::zero() {
            self.triplets.push((r, c, v));
        }
    }

    pub fn mul_vec(&self, x: &DVector<S>) -> DVector<S> {
        let mut y = DVector::zeros(self.nrows);
        for &(r, c, v) in &self.triplets {
            y[r] += v * x[c];
        }
        y
    }

    pub fn tr_mul_vec(&self, x: &DVector<S>) -> DVector<S> {
        let mut y = DVector::zeros(self.ncols);
        for &(r, c, v) in &self.triplets {
            y[c] += v * x[r];
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<S> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for &(r, c, v) in &self.triplets {
            m[(r, c)] += v;
        }
        m
    }

    /// Compressed rows with duplicate entries merged.
    pub fn to_rows(&self) -> Vec<Vec<(usize, S)>> {
        let mut rows: Vec<Vec<(usize, S)>> = vec![Vec::new(); self.nrows];
        for &(r, c, v) in &self.triplets {
            rows[r].push((c, v));
        }
        for row in &mut rows {
            row.sort_unstable_by_key(|e| e.0);
            let mut out: Vec<(usize, S)> = Vec::with_capacity(row.len());
            for &(c, v) in row.iter() {
                match out.last_mut() {
                    Some(last) if last.0 == c => last.1 += v,
                    _ => out.push((c, v)),
                }
            }
            *row = out;
        }
        rows
    }
}

/// Flat variable layout `z = (x_1..x_d, u_1..u_{d-1})`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarLayout {
    pub d: usize,
    pub nx: usize,
    pub nu: usize,
}

impl VarLayout {
    pub fn n_vars(&self) -> usize {
        self.d * self.nx + (self.d - 1) * self.nu
    }

    pub fn x_start(&self, node: usize) -> usize {
        debug_assert!(node < self.d);
        node * self.nx
    }

    pub fn u_start(&self, interval: usize) -> usize {
        debug_assert!(interval + 1 < self.d);
        self.d * self.nx + interval * self.nu
    }
}

/// Equality-row bookkeeping: initial rows, one defect block per interval and
/// the waypoint blocks, in that order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowLayout {
    pub n_rows: usize,
    pub init_rows: std::ops::Range<usize>,
    pub dynamics_rows: Vec<std::ops::Range<usize>>,
    pub waypoint_rows: Vec<WaypointRows>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaypointRows {
    pub waypoint: usize,
    pub node: usize,
    pub rows: std::ops::Range<usize>,
}

/// Grid metadata carried alongside transcription-produced QPs so the duals
/// can be mapped back to adjoint estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptionStructure<S: Real> {
    pub layout: VarLayout,
    pub rows: RowLayout,
    pub dt: S,
}

/// Convex QP: minimize `1/2 z^T H z + q^T z + constant_cost` subject to
/// `Aeq z = beq` and `lo <= z <= hi`.
#[derive(Debug, Clone)]
pub struct QpData<S: Real> {
    pub h: CooMatrix<S>,
    pub q: DVector<S>,
    pub aeq: CooMatrix<S>,
    pub beq: DVector<S>,
    pub lo: DVector<S>,
    pub hi: DVector<S>,
    /// Cost terms independent of z, dropped from the QP objective but kept so
    /// reported costs line up with the nonlinear functional.
    pub constant_cost: S,
    pub structure: Option<TranscriptionStructure<S>>,
}

impl<S: Real> QpData<S> {
    pub fn n_vars(&self) -> usize {
        self.q.len()
    }

    /// Full objective including the dropped constant.
    pub fn objective(&self, z: &DVector<S>) -> S {
        let hz = self.h.mul_vec(z);
        S::lit(0.5) * hz.dot(z) + self.q.dot(z) + self.constant_cost
    }

    /// Write a plain-text dump: labeled matrix-market style blocks for H,
    /// Aeq and the vectors.
    pub fn dump_matrix_market(&self, out: &mut impl std::io::Write) -> std::io::Result<()> {
        writeln!(out, "%% qp dump v1")?;
        for (name, m) in [("H", &self.h), ("Aeq", &self.aeq)] {
            writeln!(out, "% matrix {name}")?;
            writeln!(out, "%%MatrixMarket matrix coordinate real general")?;
            writeln!(out, "{} {} {}", m.nrows, m.ncols, m.triplets.len())?;
            for &(r, c, v) in &m.triplets {
                writeln!(out, "{} {} {:.17e}", r + 1, c + 1, v.to_f64_lossy())?;
            }
        }
        for (name, v) in [("q", &self.q), ("beq", &self.beq), ("lo", &self.lo), ("hi", &self.hi)] {
            writeln!(out, "% vector {name}")?;
            writeln!(out, "{}", v.len())?;
            for val in v.iter() {
                writeln!(out, "{:.17e}", val.to_f64_lossy())?;
            }
        }
        writeln!(out, "% scalar constant_cost")?;
        writeln!(out, "{:.17e}", self.constant_cost.to_f64_lossy())
    }
}

/// Map each waypoint time onto its grid node, requiring exact coincidence.
pub fn waypoint_nodes<S: Real>(prob: &OcpProblem<S>, d: usize) -> Result<Vec<usize>> {
    let dt = prob.horizon / S::from_usize(d - 1).unwrap();
    let tol = S::lit(1e-9) * (S::one() + prob.horizon.abs());
    prob.waypoints
        .iter()
        .enumerate()
        .map(|(i, wp)| {
            let frac = wp.time / dt;
            let node = frac.round().to_f64_lossy() as usize;
            if node >= d || (S::from_usize(node).unwrap() * dt - wp.time).abs() > tol {
                return Err(Error::Construction(format!(
                    "waypoint {i} at t = {:.6} does not coincide with a grid node (dt = {:.6})",
                    wp.time.to_f64_lossy(),
                    dt.to_f64_lossy()
                )));
            }
            Ok(node)
        })
        .collect()
}

/// Build the convex subproblem around the previous iterate.
///
/// The smooth trust-region penalty `h(|x - x_k|^2 - Delta)` is replaced by
/// its convex quadratic expansion at the previous iterate (which is also the
/// trust center): value `h(-Delta)` plus curvature `2 h'(-Delta) I`, the
/// exact Hessian there, capped by the smooth max's global curvature bound.
/// The smooth max has slope at most one, so the expansion alone cannot force
/// arbitrarily small steps; `trust_stiffness` scales the whole term and the
/// outer loop raises it when steps keep getting rejected.
pub fn build_subproblem<S: Real>(
    prob: &OcpProblem<S>,
    prev: &DiscreteTrajectory<S>,
    delta_k: S,
    omega_k: S,
    trust_stiffness: S,
    params: &ScpParams<S>,
) -> Result<QpData<S>> {
    let d = prev.len();
    let nx = prob.state_dim();
    let nu = prob.control_dim();
    if d < 2 {
        return Err(Error::Construction("need at least two grid points".into()));
    }
    let span = prev.times[d - 1] - prev.times[0];
    if (span - prob.horizon).abs() > S::lit(1e-9) * (S::one() + prob.horizon.abs()) {
        return Err(Error::Construction("grid span does not match the horizon".into()));
    }
    let dt = prev.dt();
    let layout = VarLayout { d, nx, nu };
    let nz = layout.n_vars();
    let nodes = waypoint_nodes(prob, d)?;

    let beta = params.beta_sharp;
    let mut h = CooMatrix::zeros(nz, nz);
    let mut q = DVector::zeros(nz);
    let mut constant = S::zero();

    // Trust-region surrogate on every node. The curvature cap
    // beta/2 = (max h'') * (curvature of |x - c|^2) never binds at the
    // center for beta > 4 but keeps the term bounded regardless.
    let tr_weight = trust_stiffness * dt * smooth_max_grad(-delta_k, beta).min(S::lit(0.25) * beta);
    constant += trust_stiffness * S::from_usize(d).unwrap() * dt * smooth_max(-delta_k, beta);
    for node in 0..d {
        let xs = layout.x_start(node);
        let center = &prev.states[node];
        for k in 0..nx {
            h.push(xs + k, xs + k, S::lit(2.0) * tr_weight);
            q[xs + k] -= S::lit(2.0) * tr_weight * center[k];
        }
        constant += tr_weight * center.norm_squared();
    }

    // Control quadratic, cost coupling and linearized state cost on the
    // d-1 intervals, evaluated at the left node (zero-order hold).
    let two_dt = S::lit(2.0) * dt;
    for i in 0..d - 1 {
        let us = layout.u_start(i);
        let xs = layout.x_start(i);
        let xc = &prev.states[i];
        for r in 0..nu {
            for c in 0..nu {
                let v = prob.r_weight[(r, c)];
                if v != S::zero() {
                    h.push(us + r, us + c, two_dt * v); // 1/2 z^T H z convention
                }
            }
        }
        if prob.f0_u.is_some() {
            let a = prob.f0_u_value(xc);
            let jac = prob.f0_u_jacobian(xc);
            let jac_xc = &jac * xc;
            for r in 0..nu {
                q[us + r] += dt * (a[r] - jac_xc[r]);
                for c in 0..nx {
                    let v = jac[(r, c)];
                    if v != S::zero() {
                        h.push(us + r, xs + c, dt * v);
                        h.push(xs + c, us + r, dt * v);
                    }
                }
            }
        }
        let (g_val, g_grad) = prob.state_cost(xc, omega_k);
        for k in 0..nx {
            q[xs + k] += dt * g_grad[k];
        }
        constant += dt * (g_val - g_grad.dot(xc));
    }

    // Optional linearized manifold-residual penalty (the "penalized" variant):
    // per node and unit-norm factor, a convex quadratic expansion of
    // smooth_max(|r|)^2 around the previous residual.
    if params.omega_manifold > S::zero() {
        let manifold = prob.system.manifold();
        for node in 0..d {
            let xs = layout.x_start(node);
            let xc = &prev.states[node];
            let residual = manifold.constraint_residual(xc)?;
            let jac = manifold.constraint_jacobian(xc)?;
            let w = dt * params.omega_manifold;
            for row in 0..residual.len() {
                let r0 = residual[row];
                let sm = smooth_max(r0.abs(), beta);
                let smg = smooth_max_grad(r0.abs(), beta);
                let sign = if r0 >= S::zero() { S::one() } else { -S::one() };
                let psi = sm * sm;
                let dpsi = S::lit(2.0) * sm * smg * sign;
                // Gauss-Newton curvature plus the capped second term.
                let curv = S::lit(2.0) * smg * smg + S::lit(0.5) * beta * sm;
                let j_row: Vec<(usize, S)> = (0..nx)
                    .filter_map(|k| {
                        let v = jac[(row, k)];
                        (v != S::zero()).then_some((k, v))
                    })
                    .collect();
                let j_dot_xc: S = j_row.iter().map(|&(k, v)| v * xc[k]).fold(S::zero(), |a, b| a + b);
                for &(k, v) in &j_row {
                    q[xs + k] += w * (dpsi * v - curv * j_dot_xc * v);
                    for &(k2, v2) in &j_row {
                        h.push(xs + k, xs + k2, w * curv * v * v2);
                    }
                }
                constant += w * (psi - dpsi * j_dot_xc + S::lit(0.5) * curv * j_dot_xc * j_dot_xc);
            }
        }
    }

    // Equality rows: initial state, trapezoidal defects, waypoints.
    let n_wp_rows: usize = prob.waypoints.iter().map(|w| w.dim()).sum();
    let n_rows = nx + (d - 1) * nx + n_wp_rows;
    let mut aeq = CooMatrix::zeros(n_rows, nz);
    let mut beq = DVector::zeros(n_rows);

    for k in 0..nx {
        aeq.push(k, layout.x_start(0) + k, S::one());
        beq[k] = prob.x0[k];
    }
    let mut dynamics_rows = Vec::with_capacity(d - 1);
    let half_dt = S::lit(0.5) * dt;
    for i in 0..d - 1 {
        let row0 = nx + i * nx;
        dynamics_rows.push(row0..row0 + nx);
        let u_prev = &prev.controls[i];
        let (a_l, b_l, c_l) = linearize_dynamics(&prob.system, &prev.states[i], u_prev)?;
        let (a_r, b_r, c_r) = linearize_dynamics(&prob.system, &prev.states[i + 1], u_prev)?;
        let xs_l = layout.x_start(i);
        let xs_r = layout.x_start(i + 1);
        let us = layout.u_start(i);
        for r in 0..nx {
            aeq.push(row0 + r, xs_l + r, -S::one());
            aeq.push(row0 + r, xs_r + r, S::one());
            for c in 0..nx {
                let vl = a_l[(r, c)];
                if vl != S::zero() {
                    aeq.push(row0 + r, xs_l + c, -half_dt * vl);
                }
                let vr = a_r[(r, c)];
                if vr != S::zero() {
                    aeq.push(row0 + r, xs_r + c, -half_dt * vr);
                }
            }
            for c in 0..nu {
                let v = b_l[(r, c)] + b_r[(r, c)];
                if v != S::zero() {
                    aeq.push(row0 + r, us + c, -half_dt * v);
                }
            }
        }
        let rhs = (&c_l + &c_r - &a_l * &prev.states[i] - &a_r * &prev.states[i + 1]) * half_dt;
        for r in 0..nx {
            beq[row0 + r] = rhs[r];
        }
    }
    let mut waypoint_rows = Vec::with_capacity(prob.waypoints.len());
    let mut row = nx + (d - 1) * nx;
    for (w, wp) in prob.waypoints.iter().enumerate() {
        let node = nodes[w];
        let xc = &prev.states[node];
        let jac = wp.jacobian(xc);
        let rhs = &jac * xc - wp.eval(xc);
        let xs = layout.x_start(node);
        for r in 0..wp.dim() {
            for c in 0..nx {
                let v = jac[(r, c)];
                if v != S::zero() {
                    aeq.push(row + r, xs + c, v);
                }
            }
            beq[row + r] = rhs[r];
        }
        waypoint_rows.push(WaypointRows {
            waypoint: w,
            node,
            rows: row..row + wp.dim(),
        });
        row += wp.dim();
    }

    // Bounds: controls boxed, states free.
    let inf = S::lit(f64::INFINITY);
    let mut lo = DVector::from_element(nz, -inf);
    let mut hi = DVector::from_element(nz, inf);
    for i in 0..d - 1 {
        let us = layout.u_start(i);
        for k in 0..nu {
            lo[us + k] = prob.control_lo[k];
            hi[us + k] = prob.control_hi[k];
        }
    }

    Ok(QpData {
        h,
        q,
        aeq,
        beq,
        lo,
        hi,
        constant_cost: constant,
        structure: Some(TranscriptionStructure {
            layout,
            rows: RowLayout {
                n_rows,
                init_rows: 0..nx,
                dynamics_rows,
                waypoint_rows,
            },
            dt,
        }),
    })
}

/// Split a flat QP solution vector back into a trajectory on the given grid.
pub fn unpack_solution<S: Real>(
    layout: &VarLayout,
    times: &[S],
    z: &DVector<S>,
) -> DiscreteTrajectory<S> {
    let d = layout.d;
    let states = (0..d)
        .map(|i| z.rows(layout.x_start(i), layout.nx).clone_owned())
        .collect();
    let mut controls: Vec<DVector<S>> = (0..d - 1)
        .map(|i| z.rows(layout.u_start(i), layout.nu).clone_owned())
        .collect();
    controls.push(DVector::zeros(layout.nu));
    DiscreteTrajectory {
        times: times.to_vec(),
        states,
        controls,
    }
}

/// Per-node and per-interval feasibility diagnostics of a trajectory under
/// the true nonlinear dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryReport<S: Real> {
    /// Trapezoid-equation residual per interval, evaluated with the true
    /// nonlinear vector field.
    pub defect_norms: Vec<S>,
    /// Gap per interval between the next node and the true flow across the
    /// interval (fine fixed-step integration), a stopping-independent measure
    /// of discretization error.
    pub flow_defect_norms: Vec<S>,
    /// Manifold constraint residual norm per node.
    pub manifold_residuals: Vec<S>,
    pub max_defect: S,
    pub max_flow_defect: S,
    /// Accumulated flow defect over the horizon; the manifold drift of a
    /// dynamics-feasible discrete trajectory is bounded by the accumulated
    /// integration error, so this is the natural yardstick for it.
    pub total_flow_defect: S,
    pub max_manifold_residual: S,
    /// Discrete energy `sum |u_i|^2 dt`.
    pub energy_cost: S,
    /// Unweighted obstacle penalty `sum g_b dt`.
    pub penalty_total: S,
    /// Constraint violation norm per waypoint.
    pub waypoint_violations: Vec<S>,
    /// Smallest signed distance over all nodes, infinite without obstacles.
    pub min_clearance: S,
}

/// Substeps per interval for the flow-defect reference integration.
const FLOW_SUBSTEPS: usize = 16;

pub fn trajectory_diagnostics<S: Real>(
    prob: &OcpProblem<S>,
    traj: &DiscreteTrajectory<S>,
) -> Result<TrajectoryReport<S>> {
    let d = traj.len();
    let dt = traj.dt();
    let half_dt = S::lit(0.5) * dt;
    let manifold = prob.system.manifold();

    let mut defect_norms = Vec::with_capacity(d - 1);
    let mut flow_defect_norms = Vec::with_capacity(d - 1);
    for i in 0..d - 1 {
        let u = &traj.controls[i];
        let f_l = prob.system.eval_dynamics(&traj.states[i], u)?;
        let f_r = prob.system.eval_dynamics(&traj.states[i + 1], u)?;
        let defect = &traj.states[i + 1] - &traj.states[i] - (f_l + f_r) * half_dt;
        defect_norms.push(defect.norm());

        let mut x = traj.states[i].clone();
        let h = dt / S::from_usize(FLOW_SUBSTEPS).unwrap();
        for _ in 0..FLOW_SUBSTEPS {
            x = prob.system.rk4_step(&x, u, h)?;
        }
        flow_defect_norms.push((&traj.states[i + 1] - x).norm());
    }

    let manifold_residuals = traj
        .states
        .iter()
        .map(|x| manifold.residual_norm(x))
        .collect::<Result<Vec<_>>>()?;

    let mut energy = S::zero();
    let mut penalty = S::zero();
    for i in 0..d - 1 {
        energy += traj.controls[i].norm_squared() * dt;
        penalty += prob.penalty_g_b(&traj.states[i]).0 * dt;
    }
    let nodes = waypoint_nodes(prob, d)?;
    let waypoint_violations = prob
        .waypoints
        .iter()
        .zip(&nodes)
        .map(|(wp, &node)| wp.eval(&traj.states[node]).norm())
        .collect();
    let min_clearance = traj
        .states
        .iter()
        .map(|x| prob.min_clearance(x))
        .fold(S::lit(f64::INFINITY), |a, b| a.min(b));

    let fold_max = |v: &[S]| v.iter().copied().fold(S::zero(), |a, b| a.max(b));
    Ok(TrajectoryReport {
        max_defect: fold_max(&defect_norms),
        max_flow_defect: fold_max(&flow_defect_norms),
        total_flow_defect: flow_defect_norms.iter().copied().fold(S::zero(), |a, b| a + b),
        max_manifold_residual: fold_max(&manifold_residuals),
        defect_norms,
        flow_defect_norms,
        manifold_residuals,
        energy_cost: energy,
        penalty_total: penalty,
        waypoint_violations,
        min_clearance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::models::ModelSpec;
    use crate::problem::Waypoint;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn v(data: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(data)
    }

    fn di_problem() -> OcpProblem<f64> {
        let sys = ModelSpec::DoubleIntegrator { dim: 1 }.build().unwrap();
        OcpProblem::new(
            sys,
            DMatrix::identity(1, 1),
            DVector::zeros(2),
            vec![Waypoint::full_state(1.0, v(&[1.0, 0.0]))],
            v(&[-50.0]),
            v(&[50.0]),
            1.0,
        )
    }

    fn zero_trajectory(prob: &OcpProblem<f64>, d: usize) -> DiscreteTrajectory<f64> {
        let dt = prob.horizon / (d - 1) as f64;
        DiscreteTrajectory::new(
            (0..d).map(|i| i as f64 * dt).collect(),
            vec![DVector::zeros(prob.state_dim()); d],
            vec![DVector::zeros(prob.control_dim()); d],
        )
        .unwrap()
    }

    #[test]
    fn smooth_max_examples() {
        assert_relative_eq!(smooth_max(0.0, 10.0), 2f64.ln() / 10.0, epsilon = 1e-15);
        assert!(smooth_max(-100.0, 10.0) <= 1e-12);
        assert_relative_eq!(smooth_max(100.0, 10.0), 100.0, epsilon = 1e-12);
        // Uniform gap bound.
        for s in [-3.0f64, -0.2, 0.0, 0.1, 2.5] {
            let gap = (smooth_max(s, 10.0) - s.max(0.0)).abs();
            assert!(gap <= 2f64.ln() / 10.0 + 1e-15);
        }
    }

    #[test]
    fn smooth_max_grad_is_logistic_and_monotone() {
        let mut prev = -1.0;
        for i in 0..100 {
            let s = -5.0 + 0.1 * i as f64;
            let g = smooth_max_grad(s, 7.0);
            assert!(g > prev);
            assert!((0.0..=1.0).contains(&g));
            prev = g;
            let h = 1e-6;
            let fd = (smooth_max(s + h, 7.0) - smooth_max(s - h, 7.0)) / (2.0 * h);
            assert_relative_eq!(g, fd, epsilon = 1e-8);
        }
    }

    #[test]
    fn linearization_is_exact_for_linear_systems() {
        let prob = di_problem();
        let (a, b, c) = linearize_dynamics(&prob.system, &v(&[0.3, -0.7]), &v(&[0.2])).unwrap();
        assert_relative_eq!(a, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]));
        assert_relative_eq!(b, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_relative_eq!(c, v(&[-0.7, 0.0]));
    }

    #[test]
    fn linearization_matches_dynamics_at_expansion_point() {
        let sys = ModelSpec::TorusManipulator { joints: 2 }.build().unwrap();
        let x = sys.manifold().project(&v(&[0.3, 0.9, -0.5, 0.4])).unwrap();
        let u = v(&[0.7, -0.3]);
        let (a, b, c) = linearize_dynamics(&sys, &x, &u).unwrap();
        let lin = &c + &b * &u + &a * (&x - &x);
        let exact = sys.eval_dynamics(&x, &u).unwrap();
        assert_relative_eq!(lin, exact, epsilon = 1e-14);
    }

    #[test]
    fn manipulator_linearization_at_rest() {
        let sys = ModelSpec::TorusManipulator { joints: 1 }.build().unwrap();
        let (a, b, c) = linearize_dynamics(&sys, &v(&[1.0, 0.0]), &v(&[0.0])).unwrap();
        assert_relative_eq!(a, DMatrix::zeros(2, 2));
        assert_relative_eq!(b, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert_relative_eq!(c, v(&[0.0, 0.0]));
    }

    /// Two-interval double integrator assembled by hand: H carries only the
    /// control quadratic (the trust weight vanishes at large radius), Aeq
    /// stacks the initial rows, two trapezoid blocks and the final waypoint.
    #[test]
    fn hand_assembled_two_interval_qp() {
        let prob = di_problem();
        let prev = zero_trajectory(&prob, 3);
        let params = ScpParams::default();
        let qp = build_subproblem(&prob, &prev, params.delta0, 1.0, 1.0, &params).unwrap();

        assert_eq!(qp.n_vars(), 3 * 2 + 2);
        let h = qp.h.to_dense();
        let mut h_hand = DMatrix::zeros(8, 8);
        h_hand[(6, 6)] = 2.0 * 0.5; // 2 dt R
        h_hand[(7, 7)] = 2.0 * 0.5;
        // Trust weight at delta0 = 10, beta = 20 is sigmoid(-200) ~ 0.
        assert_relative_eq!(h, h_hand, epsilon = 1e-30);
        assert_relative_eq!(qp.q, DVector::zeros(8), epsilon = 1e-30);

        let a = qp.aeq.to_dense();
        let dt2 = 0.25; // dt/2
        #[rustfmt::skip]
        let a_hand = DMatrix::from_row_slice(8, 8, &[
            // x1      v1    x2     v2    x3    v3     u1    u2
            1.0,  0.0,  0.0,  0.0,  0.0,  0.0,  0.0,  0.0,
            0.0,  1.0,  0.0,  0.0,  0.0,  0.0,  0.0,  0.0,
            -1.0, -dt2, 1.0, -dt2,  0.0,  0.0,  0.0,  0.0,
            0.0, -1.0,  0.0,  1.0,  0.0,  0.0, -0.5,  0.0,
            0.0,  0.0, -1.0, -dt2,  1.0, -dt2,  0.0,  0.0,
            0.0,  0.0,  0.0, -1.0,  0.0,  1.0,  0.0, -0.5,
            0.0,  0.0,  0.0,  0.0,  1.0,  0.0,  0.0,  0.0,
            0.0,  0.0,  0.0,  0.0,  0.0,  1.0,  0.0,  0.0,
        ]);
        assert_relative_eq!(a, a_hand, epsilon = 1e-15);
        assert_relative_eq!(
            qp.beq,
            v(&[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            epsilon = 1e-15
        );
        // Full row rank (A3) for this feasible problem.
        let svd = a.svd(false, false);
        let min_sv = svd.singular_values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min_sv > 1e-10);
    }

    /// The equality residual of the previous iterate equals its nonlinear
    /// trapezoid defect: the linearization is exact at the expansion point.
    #[test]
    fn consistency_identity_at_previous_iterate() {
        let sys = ModelSpec::TorusManipulator { joints: 2 }.build().unwrap();
        let manifold = sys.manifold().clone();
        let prob = OcpProblem::new(
            sys,
            DMatrix::identity(2, 2),
            v(&[1.0, 0.0, 1.0, 0.0]),
            vec![Waypoint::full_state(2.0, v(&[0.0, 1.0, 0.0, 1.0]))],
            v(&[-2.0, -2.0]),
            v(&[2.0, 2.0]),
            2.0,
        );
        let d = 6;
        let dt = prob.horizon / (d - 1) as f64;
        let mut rng = StdRng::seed_from_u64(21);
        let states: Vec<_> = (0..d)
            .map(|_| {
                manifold
                    .project(&DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0_f64)))
                    .unwrap()
            })
            .collect();
        let controls: Vec<_> = (0..d)
            .map(|_| DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let prev = DiscreteTrajectory::new(
            (0..d).map(|i| i as f64 * dt).collect(),
            states,
            controls,
        )
        .unwrap();
        let params = ScpParams::default();
        let qp = build_subproblem(&prob, &prev, params.delta0, 1.0, 1.0, &params).unwrap();

        let mut z = DVector::zeros(qp.n_vars());
        let layout = qp.structure.as_ref().unwrap().layout;
        for i in 0..d {
            z.rows_mut(layout.x_start(i), 4).copy_from(&prev.states[i]);
        }
        for i in 0..d - 1 {
            z.rows_mut(layout.u_start(i), 2).copy_from(&prev.controls[i]);
        }
        let residual = qp.aeq.mul_vec(&z) - &qp.beq;
        let report = trajectory_diagnostics(&prob, &prev).unwrap();
        for (i, range) in qp.structure.as_ref().unwrap().rows.dynamics_rows.iter().enumerate() {
            let r = residual.rows(range.start, range.len()).norm();
            assert_relative_eq!(r, report.defect_norms[i], epsilon = 1e-12);
        }
        // The model objective at the expansion point reproduces the true
        // penalized cost there (constants are tracked, not lost).
        let mut truth = 0.0;
        for i in 0..d - 1 {
            truth += dt * prob.running_cost(&prev.states[i], &prev.controls[i], 1.0);
        }
        for x in &prev.states {
            truth += dt * smooth_max((x - x).norm_squared() - params.delta0, params.beta_sharp);
        }
        assert_relative_eq!(qp.objective(&z), truth, epsilon = 1e-12);
    }

    /// Hard-dynamics rule: the cost (H, q) must not contain dynamics-derived
    /// terms. Swapping the vector fields changes only the equality rows.
    #[test]
    fn cost_is_independent_of_the_dynamics() {
        let prob_a = di_problem();
        let mut prob_b = di_problem();
        // Same shapes, different field: replace with a manipulator-like twist.
        let sys = crate::dynamics::ControlAffineSystem::new(
            std::sync::Arc::new(|x: &DVector<f64>| v(&[x[1] * 3.0, -x[0]])),
            std::sync::Arc::new(|_: &DVector<f64>| {
                DMatrix::from_row_slice(2, 2, &[0.0, 3.0, -1.0, 0.0])
            }),
            vec![std::sync::Arc::new(|_: &DVector<f64>| v(&[0.0, 2.0]))],
            vec![std::sync::Arc::new(|_: &DVector<f64>| DMatrix::zeros(2, 2))],
            crate::manifold::EmbeddedManifold::euclidean(2),
        );
        prob_b.system = sys;

        let prev = zero_trajectory(&prob_a, 5);
        let params = ScpParams::default();
        let qp_a = build_subproblem(&prob_a, &prev, 1.0, 1.0, 1.0, &params).unwrap();
        let qp_b = build_subproblem(&prob_b, &prev, 1.0, 1.0, 1.0, &params).unwrap();
        assert_relative_eq!(qp_a.h.to_dense(), qp_b.h.to_dense());
        assert_relative_eq!(qp_a.q, qp_b.q);
        assert_relative_eq!(qp_a.constant_cost, qp_b.constant_cost);
        assert!(qp_a.aeq.to_dense() != qp_b.aeq.to_dense());
    }

    #[test]
    fn hessian_is_positive_semidefinite() {
        let mut prob = di_problem();
        prob.obstacles.push(crate::problem::Obstacle {
            shape: crate::problem::Shape::Sphere {
                center: v(&[0.5]),
                radius: 0.1,
            },
            extraction: crate::problem::Extraction::StateBlock { start: 0, len: 1 },
        });
        let prev = zero_trajectory(&prob, 7);
        let mut params = ScpParams::default();
        params.omega_manifold = 3.0; // exercise the penalized path too
        for delta in [10.0, 0.5, 1e-3] {
            let qp = build_subproblem(&prob, &prev, delta, 4.0, 1.0, &params).unwrap();
            let h = qp.h.to_dense();
            assert_relative_eq!(h.clone(), h.transpose(), epsilon = 1e-12);
            let eigs = h.symmetric_eigenvalues();
            assert!(eigs.iter().all(|&e| e >= -1e-9), "eigs {:?}", eigs.min());
        }
    }

    /// Shrinking the radius raises both the exact penalty and the surrogate
    /// weight at any fixed point away from the center.
    #[test]
    fn trust_penalty_grows_as_radius_shrinks() {
        let beta = 20.0;
        let s = 0.3_f64; // |x - x_k|^2
        let mut prev_val = -1.0;
        let mut prev_w = -1.0;
        for delta in [2.0, 1.0, 0.5, 0.25, 0.1, 0.01] {
            let val = smooth_max(s - delta, beta);
            let w = smooth_max_grad(-delta, beta);
            assert!(val > prev_val);
            assert!(w > prev_w);
            prev_val = val;
            prev_w = w;
        }
    }

    #[test]
    fn off_grid_waypoint_is_rejected() {
        let mut prob = di_problem();
        // Interior waypoint off the 3-point grid {0, 0.5, 1}.
        prob.waypoints
            .insert(0, crate::problem::Waypoint::partial(0.3, vec![0], v(&[0.2])));
        let prev = zero_trajectory(&prob, 3);
        let err = build_subproblem(&prob, &prev, 1.0, 1.0, 1.0, &ScpParams::default());
        assert!(err.is_err());
    }

    #[test]
    fn diagnostics_on_projected_states_have_zero_manifold_residual() {
        let sys = ModelSpec::TorusManipulator { joints: 1 }.build().unwrap();
        let prob = OcpProblem::new(
            sys,
            DMatrix::identity(1, 1),
            v(&[1.0, 0.0]),
            vec![Waypoint::full_state(1.0, v(&[0.0, 1.0]))],
            v(&[-3.0]),
            v(&[3.0]),
            1.0,
        );
        let d = 5;
        let dt = 0.25;
        let manifold = prob.system.manifold().clone();
        let states: Vec<_> = (0..d)
            .map(|i| {
                manifold
                    .project(&v(&[(i as f64).cos() + 1.5, (i as f64).sin()]))
                    .unwrap()
            })
            .collect();
        let traj = DiscreteTrajectory::new(
            (0..d).map(|i| i as f64 * dt).collect(),
            states,
            vec![v(&[0.2]); d],
        )
        .unwrap();
        let report = trajectory_diagnostics(&prob, &traj).unwrap();
        assert!(report.max_manifold_residual <= 1e-12);
        assert!(report.max_defect > 0.0);
    }

    #[test]
    fn exact_linear_solution_has_zero_defect() {
        let prob = di_problem();
        // Constant control 1.0 from rest: x(t) = t^2/2, v(t) = t; the
        // trapezoid is exact for this system.
        let d = 6;
        let dt = prob.horizon / (d - 1) as f64;
        let states: Vec<_> = (0..d)
            .map(|i| {
                let t = i as f64 * dt;
                v(&[0.5 * t * t, t])
            })
            .collect();
        let traj = DiscreteTrajectory::new(
            (0..d).map(|i| i as f64 * dt).collect(),
            states,
            vec![v(&[1.0]); d],
        )
        .unwrap();
        let report = trajectory_diagnostics(&prob, &traj).unwrap();
        assert!(report.max_defect <= 1e-14);
        assert_relative_eq!(report.energy_cost, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn grid_must_be_uniform() {
        assert!(DiscreteTrajectory::new(
            vec![0.0, 0.4, 1.0],
            vec![DVector::<f64>::zeros(2); 3],
            vec![DVector::zeros(1); 3],
        )
        .is_err());
    }

    #[test]
    fn params_validation() {
        let mut p = ScpParams::<f64>::default();
        assert!(p.validate().is_ok());
        p.rho_accept = 0.04; // below rho_reject
        assert!(p.validate().is_err());
        let mut p = ScpParams::<f64>::default();
        p.omega0 = 0.5;
        assert!(p.validate().is_err());
        let mut p = ScpParams::<f64>::default();
        p.delta0 = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn qp_dump_is_readable_text() {
        let prob = di_problem();
        let prev = zero_trajectory(&prob, 3);
        let qp = build_subproblem(&prob, &prev, 1.0, 1.0, 1.0, &ScpParams::default()).unwrap();
        let mut buf = Vec::new();
        qp.dump_matrix_market(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("%% qp dump v1"));
        assert!(text.contains("% matrix Aeq"));
        assert!(text.contains("% vector beq"));
    }
}

//! Indirect single shooting on the first-order optimality system.
//!
//! The state/costate pair is integrated forward under the pointwise
//! Hamiltonian-maximizing control (normal case, p0 = -1); interior waypoint
//! constraints induce costate jumps through their multipliers. A damped
//! Newton iteration with finite-difference Jacobian drives the waypoint and
//! terminal transversality residuals to zero. Warm starts come from the
//! discrete adjoints of a converged subproblem sweep, which is what makes
//! the Newton iteration reliable in practice.

use nalgebra::{DMatrix, DVector};

use crate::problem::{OcpProblem, WaypointMap};
use crate::qp;
use crate::transcription::CooMatrix;
use crate::{Error, Real, Result};

/// Unknowns of the square shooting system: the initial costate plus one
/// multiplier per interior waypoint (the jump is `(dG/dx)^T lambda`).
#[derive(Debug, Clone)]
pub struct ShootingUnknowns<S: Real> {
    pub gamma0: DVector<S>,
    pub jumps: Vec<DVector<S>>,
}

impl<S: Real> ShootingUnknowns<S> {
    pub fn n_unknowns(&self) -> usize {
        self.gamma0.len() + self.jumps.iter().map(|j| j.len()).sum::<usize>()
    }

    pub fn pack(&self) -> DVector<S> {
        let mut out = Vec::with_capacity(self.n_unknowns());
        out.extend(self.gamma0.iter().copied());
        for j in &self.jumps {
            out.extend(j.iter().copied());
        }
        DVector::from_vec(out)
    }

    pub fn unpack_like(&self, flat: &DVector<S>) -> Self {
        let mut gamma0 = self.gamma0.clone();
        let n = gamma0.len();
        gamma0.copy_from(&flat.rows(0, n));
        let mut jumps = Vec::with_capacity(self.jumps.len());
        let mut off = n;
        for j in &self.jumps {
            jumps.push(flat.rows(off, j.len()).clone_owned());
            off += j.len();
        }
        Self { gamma0, jumps }
    }
}

#[derive(Debug, Clone)]
pub struct ShootingParams<S: Real> {
    /// RK4 steps per inter-waypoint segment (at least 10).
    pub steps_per_segment: usize,
    pub tol_newton: S,
    pub max_newton: usize,
    /// Relative finite-difference step for the Newton Jacobian.
    pub fd_step: S,
    /// Number of halvings tried on the damping ladder.
    pub max_damping: usize,
}

impl<S: Real> Default for ShootingParams<S> {
    fn default() -> Self {
        Self {
            steps_per_segment: 2000,
            tol_newton: S::lit(1e-8),
            max_newton: 40,
            fd_step: S::lit(1e-6),
            max_damping: 14,
        }
    }
}

/// A continuous-time extremal candidate on a fine grid.
#[derive(Debug, Clone)]
pub struct Extremal<S: Real> {
    pub times: Vec<S>,
    pub states: Vec<DVector<S>>,
    pub costates: Vec<DVector<S>>,
    pub controls: Vec<DVector<S>>,
    /// Cost multiplier of the normal extremal.
    pub p0: S,
    /// Integrated running cost (penalty weight included).
    pub cost: S,
    /// Integrated squared control norm.
    pub energy: S,
    /// Hamiltonian samples along the trajectory; constant up to integration
    /// error for these time-invariant problems.
    pub hamiltonian: Vec<S>,
}

impl<S: Real> Extremal<S> {
    pub fn hamiltonian_drift(&self) -> S {
        let mut lo = S::lit(f64::INFINITY);
        let mut hi = S::lit(f64::NEG_INFINITY);
        for &h in &self.hamiltonian {
            lo = lo.min(h);
            hi = hi.max(h);
        }
        hi - lo
    }
}

/// Maximizer of the Hamiltonian over the control box at fixed state and
/// costate: the stationary point of the concave quadratic, clipped for
/// diagonal R, or a small box QP otherwise.
pub fn pointwise_optimal_control<S: Real>(
    prob: &OcpProblem<S>,
    x: &DVector<S>,
    gamma: &DVector<S>,
) -> DVector<S> {
    let b = prob.system.control_matrix(x);
    let rhs = b.transpose() * gamma - prob.f0_u_value(x);
    let m = prob.control_dim();
    if prob.r_is_diagonal() {
        let mut u = DVector::zeros(m);
        for k in 0..m {
            u[k] = (rhs[k] / (S::lit(2.0) * prob.r_weight[(k, k)]))
                .clamp(prob.control_lo[k], prob.control_hi[k]);
        }
        u
    } else {
        // max gamma^T B u - u^T R u - f0u . u  ==  min u^T R u - rhs . u
        let mut h = CooMatrix::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                let v = S::lit(2.0) * prob.r_weight[(r, c)];
                if v != S::zero() {
                    h.push(r, c, v);
                }
            }
        }
        let data = crate::transcription::QpData {
            h,
            q: -rhs.clone(),
            aeq: CooMatrix::zeros(0, m),
            beq: DVector::zeros(0),
            lo: prob.control_lo.clone(),
            hi: prob.control_hi.clone(),
            constant_cost: S::zero(),
            structure: None,
        };
        match qp::solve_qp(&data, S::lit(1e-10), 2000) {
            Ok(sol) => prob.clamp_control(&sol.z),
            Err(_) => {
                let mut u = DVector::zeros(m);
                for k in 0..m {
                    u[k] = (rhs[k] / (S::lit(2.0) * prob.r_weight[(k, k)]))
                        .clamp(prob.control_lo[k], prob.control_hi[k]);
                }
                u
            }
        }
    }
}

/// Hamiltonian `gamma . F(x, u) - F0(x, u)` of the normal extremal.
pub fn hamiltonian<S: Real>(
    prob: &OcpProblem<S>,
    x: &DVector<S>,
    gamma: &DVector<S>,
    u: &DVector<S>,
    omega: S,
) -> S {
    let f = prob
        .system
        .eval_dynamics(x, u)
        .unwrap_or_else(|_| DVector::zeros(x.len()));
    gamma.dot(&f) - prob.running_cost(x, u, omega)
}

struct SegmentEnd<S: Real> {
    x: DVector<S>,
    gamma: DVector<S>,
    cost: S,
    energy: S,
}

/// Integrate the shooting system and return the stacked residual vector:
/// every waypoint constraint value followed by the terminal transversality
/// defect (the costate component in the kernel of the final constraint
/// Jacobian). Also returns the fine-grid extremal for diagnostics.
pub fn shoot<S: Real>(
    prob: &OcpProblem<S>,
    unknowns: &ShootingUnknowns<S>,
    steps_per_segment: usize,
    omega: S,
) -> Result<(DVector<S>, Extremal<S>)> {
    if steps_per_segment < 10 {
        return Err(Error::InvalidParams(
            "need at least 10 integration steps per segment".into(),
        ));
    }
    let n = prob.state_dim();
    let n_wp = prob.waypoints.len();
    if unknowns.jumps.len() + 1 != n_wp {
        return Err(Error::DimensionMismatch {
            what: "interior multipliers",
            expected: n_wp - 1,
            got: unknowns.jumps.len(),
        });
    }

    let mut x = prob.x0.clone();
    let mut gamma = unknowns.gamma0.clone();
    let mut cost = S::zero();
    let mut energy = S::zero();

    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut costates = Vec::new();
    let mut controls = Vec::new();
    let mut hams = Vec::new();
    let mut residuals: Vec<S> = Vec::new();

    let mut t_prev = S::zero();
    let mut diverged = false;
    for (w, wp) in prob.waypoints.iter().enumerate() {
        let t_next = wp.time;
        let end = integrate_segment(
            prob,
            &mut times,
            &mut states,
            &mut costates,
            &mut controls,
            &mut hams,
            &x,
            &gamma,
            cost,
            energy,
            (t_prev, t_next),
            steps_per_segment,
            omega,
        );
        let end = match end {
            Some(e) => e,
            None => {
                diverged = true;
                break;
            }
        };
        x = end.x;
        gamma = end.gamma;
        cost = end.cost;
        energy = end.energy;
        for v in wp.eval(&x).iter() {
            residuals.push(*v);
        }
        if w + 1 < n_wp {
            // Interior jump gamma+ = gamma- - (dG/dx)^T lambda.
            let jac = wp.jacobian(&x);
            gamma -= jac.transpose() * &unknowns.jumps[w];
        } else {
            let kernel = waypoint_kernel(&wp.map, n);
            let defect = kernel.transpose() * &gamma;
            for v in defect.iter() {
                residuals.push(*v);
            }
        }
        t_prev = t_next;
    }

    let expected = unknowns.n_unknowns();
    let residual = if diverged {
        DVector::from_element(expected, S::lit(f64::INFINITY))
    } else {
        debug_assert_eq!(residuals.len(), expected);
        DVector::from_vec(residuals)
    };
    Ok((
        residual,
        Extremal {
            times,
            states,
            costates,
            controls,
            p0: -S::one(),
            cost,
            energy,
            hamiltonian: hams,
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn integrate_segment<S: Real>(
    prob: &OcpProblem<S>,
    times: &mut Vec<S>,
    states: &mut Vec<DVector<S>>,
    costates: &mut Vec<DVector<S>>,
    controls: &mut Vec<DVector<S>>,
    hams: &mut Vec<S>,
    x0: &DVector<S>,
    gamma0: &DVector<S>,
    cost0: S,
    energy0: S,
    span: (S, S),
    steps: usize,
    omega: S,
) -> Option<SegmentEnd<S>> {
    let n = prob.state_dim();
    let h = (span.1 - span.0) / S::from_usize(steps).unwrap();
    let half = S::lit(0.5);
    let sixth = S::lit(1.0 / 6.0);
    let two = S::lit(2.0);

    // Augmented vector (x, gamma, cost, energy).
    let dim = 2 * n + 2;
    let mut v = DVector::zeros(dim);
    v.rows_mut(0, n).copy_from(x0);
    v.rows_mut(n, n).copy_from(gamma0);
    v[2 * n] = cost0;
    v[2 * n + 1] = energy0;

    let deriv = |v: &DVector<S>| -> Option<DVector<S>> {
        let x = v.rows(0, n).clone_owned();
        let gamma = v.rows(n, n).clone_owned();
        let u = pointwise_optimal_control(prob, &x, &gamma);
        let f = prob.system.eval_dynamics(&x, &u).ok()?;
        let (a, _) = prob.system.eval_jacobians(&x, &u).ok()?;
        // gamma_dot = -A^T gamma + grad_x F0 under p0 = -1.
        let mut grad_f0 = prob.f0_u_jacobian(&x).transpose() * &u;
        let (_, g_grad) = prob.state_cost(&x, omega);
        grad_f0 += g_grad;
        let gamma_dot = -(a.transpose() * &gamma) + grad_f0;
        let mut out = DVector::zeros(dim);
        out.rows_mut(0, n).copy_from(&f);
        out.rows_mut(n, n).copy_from(&gamma_dot);
        out[2 * n] = prob.running_cost(&x, &u, omega);
        out[2 * n + 1] = u.norm_squared();
        Some(out)
    };

    for i in 0..steps {
        let t = span.0 + h * S::from_usize(i).unwrap();
        let x = v.rows(0, n).clone_owned();
        let gamma = v.rows(n, n).clone_owned();
        let u = pointwise_optimal_control(prob, &x, &gamma);
        times.push(t);
        hams.push(hamiltonian(prob, &x, &gamma, &u, omega));
        states.push(x);
        costates.push(gamma);
        controls.push(u);

        let k1 = deriv(&v)?;
        let k2 = deriv(&(&v + &k1 * (h * half)))?;
        let k3 = deriv(&(&v + &k2 * (h * half)))?;
        let k4 = deriv(&(&v + &k3 * h))?;
        v += (k1 + k2 * two + k3 * two + k4) * (h * sixth);
        if v.iter().any(|e| !e.is_finite()) {
            return None;
        }
    }
    let x = v.rows(0, n).clone_owned();
    let gamma = v.rows(n, n).clone_owned();
    let u = pointwise_optimal_control(prob, &x, &gamma);
    times.push(span.1);
    hams.push(hamiltonian(prob, &x, &gamma, &u, omega));
    states.push(x.clone());
    costates.push(gamma.clone());
    controls.push(u);
    Some(SegmentEnd {
        x,
        gamma,
        cost: v[2 * n],
        energy: v[2 * n + 1],
    })
}

/// Orthonormal basis of the kernel of the constraint Jacobian; for index
/// targets this is the complement coordinate axes.
fn waypoint_kernel<S: Real>(map: &WaypointMap<S>, n: usize) -> DMatrix<S> {
    match map {
        WaypointMap::StateTarget { indices, .. } => {
            let mut selected = vec![false; n];
            for &i in indices {
                selected[i] = true;
            }
            let free: Vec<usize> = (0..n).filter(|&i| !selected[i]).collect();
            let mut k = DMatrix::zeros(n, free.len());
            for (c, &i) in free.iter().enumerate() {
                k[(i, c)] = S::one();
            }
            k
        }
    }
}

/// Warm-start data distilled from a converged sweep.
#[derive(Debug, Clone)]
pub struct WarmStart<S: Real> {
    pub gamma0: DVector<S>,
    /// Multipliers for the interior waypoints, already in the shooting jump
    /// convention (the discrete duals enter negated).
    pub interior_multipliers: Vec<DVector<S>>,
    pub omega: S,
    /// Discrete running cost of the iterate the warm start came from; the
    /// polish must not end up worse.
    pub reference_cost: S,
}

impl<S: Real> WarmStart<S> {
    pub fn from_adjoints(
        prob: &OcpProblem<S>,
        estimate: &qp::AdjointEstimate<S>,
        omega: S,
        reference_cost: S,
    ) -> Self {
        let interior_multipliers = estimate
            .waypoint_multipliers
            .iter()
            .take(prob.waypoints.len().saturating_sub(1))
            .map(|mu| -mu)
            .collect();
        Self {
            gamma0: estimate.gamma[0].clone(),
            interior_multipliers,
            omega,
            reference_cost,
        }
    }

    pub fn cold(prob: &OcpProblem<S>, omega: S) -> Self {
        Self {
            gamma0: DVector::zeros(prob.state_dim()),
            interior_multipliers: prob
                .waypoints
                .iter()
                .take(prob.waypoints.len().saturating_sub(1))
                .map(|wp| DVector::zeros(wp.dim()))
                .collect(),
            omega,
            reference_cost: S::lit(f64::INFINITY),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PolishResult<S: Real> {
    /// Newton drove the residual below tolerance.
    pub converged: bool,
    /// Converged and the integrated cost does not exceed the reference.
    pub improved: bool,
    pub residual_norm: S,
    pub newton_iterations: usize,
    pub extremal: Option<Extremal<S>>,
}

/// Damped Newton iteration on the shooting residuals with a
/// finite-difference Jacobian.
pub fn newton_polish<S: Real>(
    prob: &OcpProblem<S>,
    warm: &WarmStart<S>,
    params: &ShootingParams<S>,
) -> Result<PolishResult<S>> {
    let mut unknowns = ShootingUnknowns {
        gamma0: warm.gamma0.clone(),
        jumps: warm.interior_multipliers.clone(),
    };
    let steps = params.steps_per_segment;
    let omega = warm.omega;

    let (mut residual, mut extremal) = shoot(prob, &unknowns, steps, omega)?;
    let mut res_norm = residual.amax();
    let mut iterations = 0;

    while res_norm > params.tol_newton && iterations < params.max_newton {
        if !res_norm.is_finite() {
            break;
        }
        iterations += 1;
        let flat = unknowns.pack();
        let nv = flat.len();
        let mut jac = DMatrix::zeros(nv, nv);
        let mut ok = true;
        for k in 0..nv {
            let step = params.fd_step * (S::one() + flat[k].abs());
            let mut pert = flat.clone();
            pert[k] += step;
            let (r_pert, _) = shoot(prob, &unknowns.unpack_like(&pert), steps, omega)?;
            if r_pert.iter().any(|v| !v.is_finite()) {
                ok = false;
                break;
            }
            jac.set_column(k, &((r_pert - &residual) / step));
        }
        if !ok {
            break;
        }
        let delta = match jac.lu().solve(&(-&residual)) {
            Some(d) => d,
            None => break,
        };
        // Damping ladder: halve until the residual shrinks.
        let mut improved_step = false;
        let mut scale = S::one();
        for _ in 0..=params.max_damping {
            let cand = &flat + &delta * scale;
            let cand_unknowns = unknowns.unpack_like(&cand);
            let (r_new, e_new) = shoot(prob, &cand_unknowns, steps, omega)?;
            let n_new = r_new.amax();
            if n_new.is_finite() && n_new < res_norm {
                unknowns = cand_unknowns;
                residual = r_new;
                extremal = e_new;
                res_norm = n_new;
                improved_step = true;
                break;
            }
            scale *= S::lit(0.5);
        }
        if !improved_step {
            break; // stagnation: no damping level reduced the residual
        }
    }

    let converged = res_norm <= params.tol_newton;
    let improved = converged && extremal.cost <= warm.reference_cost + S::lit(1e-9);
    Ok(PolishResult {
        converged,
        improved,
        residual_norm: res_norm,
        newton_iterations: iterations,
        extremal: Some(extremal),
    })
}

//! Convex QP solver for equality- and box-constrained problems.
//!
//! Operator splitting in the OSQP style: the iteration alternates an SPD
//! linear solve (factored once, banded after a reverse Cuthill-McKee
//! ordering) with projections onto the constraint set, using over-relaxation
//! and periodic KKT checks. Once the splitting has localized the active set,
//! an exact polish step solves the reduced equality-constrained problem and,
//! if its KKT residuals pass, returns a solution accurate to the requested
//! tolerance. Duals come out with the stationarity convention
//! `H z + q + Aeq^T eq_duals + bound_duals = 0`.

mod banded;

use nalgebra::DVector;

use crate::transcription::QpData;
use crate::{Error, Real, Result};
use banded::{reverse_cuthill_mckee, BandMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            QpStatus::Optimal => "optimal",
            QpStatus::MaxIter => "max_iter",
            QpStatus::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct KktResiduals<S: Real> {
    pub primal_eq: S,
    pub primal_bound: S,
    pub dual: S,
    pub complementarity: S,
}

impl<S: Real> KktResiduals<S> {
    pub fn max(&self) -> S {
        self.primal_eq
            .max(self.primal_bound)
            .max(self.dual)
            .max(self.complementarity)
    }
}

/// Primal/dual solution of a [`QpData`] instance.
#[derive(Debug, Clone)]
pub struct QpSolution<S: Real> {
    pub z: DVector<S>,
    /// One dual per equality row, ordered as the rows of `Aeq`.
    pub eq_duals: DVector<S>,
    /// One dual per variable; zero for inactive or unbounded entries.
    pub bound_duals: DVector<S>,
    pub status: QpStatus,
    pub kkt: KktResiduals<S>,
    pub iterations: usize,
}

struct Splitting<S: Real> {
    rho: S,
    rho_eq: S,
    sigma: S,
    alpha: S,
}

/// Solve the QP to the given KKT tolerance.
pub fn solve_qp<S: Real>(data: &QpData<S>, tol: S, max_iter: usize) -> Result<QpSolution<S>> {
    let n = data.n_vars();
    if data.q.len() != n || data.lo.len() != n || data.hi.len() != n || data.aeq.ncols != n {
        return Err(Error::DimensionMismatch {
            what: "qp data",
            expected: n,
            got: data.aeq.ncols,
        });
    }
    if data.beq.len() != data.aeq.nrows {
        return Err(Error::DimensionMismatch {
            what: "qp rhs",
            expected: data.aeq.nrows,
            got: data.beq.len(),
        });
    }

    let bounded: Vec<usize> = (0..n)
        .filter(|&i| data.lo[i].is_finite() || data.hi[i].is_finite())
        .collect();
    let eq_rows = data.aeq.to_rows();
    let m_eq = eq_rows.len();

    let mut split = Splitting {
        rho: S::lit(0.1),
        rho_eq: S::lit(0.1) * S::lit(1e3),
        sigma: S::lit(1e-6),
        alpha: S::lit(1.6),
    };

    let (order, bw) = ordering(data, &eq_rows);
    let mut pos = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }

    let mut factor = factorize(data, &eq_rows, &bounded, &pos, bw, &split)?;

    let mut z = DVector::<S>::zeros(n);
    let mut s_eq = data.beq.clone();
    let mut s_b = DVector::<S>::zeros(bounded.len());
    for (k, &i) in bounded.iter().enumerate() {
        s_b[k] = S::zero().clamp(data.lo[i], data.hi[i]);
    }
    let mut y_eq = DVector::<S>::zeros(m_eq);
    let mut y_b = DVector::<S>::zeros(bounded.len());

    let check_every = 25;
    let mut best: Option<QpSolution<S>> = None;
    let mut iter = 0;
    while iter < max_iter {
        iter += 1;
        // z-update: (H + sigma I + A^T rho A) zhat = sigma z - q + A^T (rho s - y)
        let mut rhs = &z * split.sigma - &data.q;
        for (r, row) in eq_rows.iter().enumerate() {
            let w = split.rho_eq * s_eq[r] - y_eq[r];
            for &(c, v) in row {
                rhs[c] += v * w;
            }
        }
        for (k, &i) in bounded.iter().enumerate() {
            rhs[i] += split.rho * s_b[k] - y_b[k];
        }
        let zhat = solve_permuted(&factor, &pos, &rhs);

        // Over-relaxed updates.
        let a_zhat_eq = data.aeq.mul_vec(&zhat);
        let one_m_alpha = S::one() - split.alpha;
        let mut dy_norm = S::zero();
        for r in 0..m_eq {
            let v = split.alpha * a_zhat_eq[r] + one_m_alpha * s_eq[r];
            // Projection of equality rows is the right-hand side itself.
            let s_new = data.beq[r];
            let y_new = y_eq[r] + split.rho_eq * (v - s_new);
            dy_norm = dy_norm.max((y_new - y_eq[r]).abs());
            y_eq[r] = y_new;
            s_eq[r] = s_new;
        }
        for (k, &i) in bounded.iter().enumerate() {
            let v = split.alpha * zhat[i] + one_m_alpha * s_b[k];
            let s_new = (v + y_b[k] / split.rho).clamp(data.lo[i], data.hi[i]);
            let y_new = y_b[k] + split.rho * (v - s_new);
            dy_norm = dy_norm.max((y_new - y_b[k]).abs());
            y_b[k] = y_new;
            s_b[k] = s_new;
        }
        z = &zhat * split.alpha + &z * one_m_alpha;

        if iter % check_every == 0 || iter == max_iter {
            let kkt = residuals(data, &bounded, &z, &y_eq, &y_b);
            let scale = S::one() + z.amax().max(data.q.amax());
            if kkt.max() <= tol {
                let sol = assemble(data, &bounded, z.clone(), y_eq.clone(), y_b.clone(), kkt, iter, QpStatus::Optimal);
                return Ok(sol);
            }
            // Try the exact polish once the splitting is roughly converged.
            if kkt.primal_eq.max(kkt.primal_bound) <= S::lit(1e-4) * scale
                && kkt.dual <= S::lit(1e-3) * scale
            {
                if let Some(pol) = polish(data, &eq_rows, &bounded, &z, &y_eq, &y_b, tol) {
                    return Ok(QpSolution { iterations: iter, ..pol });
                }
            }
            // Primal infeasibility certificate from the dual step direction.
            if dy_norm > S::zero() {
                let mut aty_dy: DVector<S> = DVector::zeros(n);
                let mut support = S::zero();
                for (r, row) in eq_rows.iter().enumerate() {
                    // Use y as the candidate certificate direction.
                    for &(c, v) in row {
                        aty_dy[c] += v * y_eq[r];
                    }
                    support += data.beq[r] * y_eq[r];
                }
                for (k, &i) in bounded.iter().enumerate() {
                    aty_dy[i] += y_b[k];
                    if y_b[k] > S::zero() {
                        support += data.hi[i] * y_b[k];
                    } else {
                        support += data.lo[i] * y_b[k];
                    }
                }
                let ynorm = y_eq.amax().max(y_b.amax());
                if ynorm > S::lit(1e4) * scale
                    && aty_dy.amax() <= S::lit(1e-8) * ynorm
                    && support < -S::lit(1e-6) * ynorm
                {
                    let sol = assemble(data, &bounded, z, y_eq, y_b, kkt, iter, QpStatus::Infeasible);
                    return Ok(sol);
                }
            }
            // Adaptive step size: rebalance primal and dual residuals.
            let ratio = ((kkt.primal_eq.max(kkt.primal_bound) + S::lit(1e-30))
                / (kkt.dual + S::lit(1e-30)))
            .sqrt();
            let ratio = ratio.clamp(S::lit(0.2), S::lit(5.0));
            if ratio >= S::lit(2.0) || ratio <= S::lit(0.5) {
                split.rho = (split.rho * ratio).clamp(S::lit(1e-6), S::lit(1e6));
                split.rho_eq = split.rho * S::lit(1e3);
                factor = factorize(data, &eq_rows, &bounded, &pos, bw, &split)?;
            }
            best = Some(assemble(
                data,
                &bounded,
                z.clone(),
                y_eq.clone(),
                y_b.clone(),
                kkt,
                iter,
                QpStatus::MaxIter,
            ));
        }
    }
    // One last polish attempt from the best iterate.
    if let Some(pol) = polish(data, &eq_rows, &bounded, &z, &y_eq, &y_b, tol) {
        return Ok(QpSolution { iterations: iter, ..pol });
    }
    Ok(best.unwrap_or_else(|| {
        let kkt = residuals(data, &bounded, &z, &y_eq, &y_b);
        assemble(data, &bounded, z, y_eq, y_b, kkt, iter, QpStatus::MaxIter)
    }))
}

fn ordering<S: Real>(data: &QpData<S>, eq_rows: &[Vec<(usize, S)>]) -> (Vec<usize>, usize) {
    let n = data.n_vars();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(r, c, _) in &data.h.triplets {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for row in eq_rows {
        for i in 0..row.len() {
            for j in i + 1..row.len() {
                adj[row[i].0].push(row[j].0);
                adj[row[j].0].push(row[i].0);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let order = reverse_cuthill_mckee(&adj);
    let mut pos = vec![0usize; n];
    for (new, &old) in order.iter().enumerate() {
        pos[old] = new;
    }
    let mut bw = 0usize;
    for (v, list) in adj.iter().enumerate() {
        for &w in list {
            bw = bw.max(pos[v].abs_diff(pos[w]));
        }
    }
    (order, bw)
}

/// Assemble and factor `H + sigma I + A^T rho A` in permuted banded form.
fn factorize<S: Real>(
    data: &QpData<S>,
    eq_rows: &[Vec<(usize, S)>],
    bounded: &[usize],
    pos: &[usize],
    bw: usize,
    split: &Splitting<S>,
) -> Result<BandMatrix<S>> {
    let n = data.n_vars();
    let mut band = BandMatrix::zeros(n, bw);
    let half = S::lit(0.5);
    for &(r, c, v) in &data.h.triplets {
        if r == c {
            band.add(pos[r], pos[r], v);
        } else {
            let (a, b) = (pos[r].max(pos[c]), pos[r].min(pos[c]));
            band.add(a, b, half * v);
        }
    }
    for i in 0..n {
        band.add(i, i, split.sigma);
    }
    for row in eq_rows {
        for i in 0..row.len() {
            let (ci, vi) = row[i];
            band.add(pos[ci], pos[ci], split.rho_eq * vi * vi);
            for j in i + 1..row.len() {
                let (cj, vj) = row[j];
                let (a, b) = (pos[ci].max(pos[cj]), pos[ci].min(pos[cj]));
                band.add(a, b, split.rho_eq * vi * vj);
            }
        }
    }
    for &i in bounded {
        band.add(pos[i], pos[i], split.rho);
    }
    band.cholesky_in_place()
        .ok_or_else(|| Error::InvalidProblem("QP Hessian is not positive semidefinite".into()))?;
    Ok(band)
}

fn solve_permuted<S: Real>(
    factor: &BandMatrix<S>,
    pos: &[usize],
    rhs: &DVector<S>,
) -> DVector<S> {
    let n = rhs.len();
    let mut permuted = vec![S::zero(); n];
    for old in 0..n {
        permuted[pos[old]] = rhs[old];
    }
    factor.solve_in_place(&mut permuted);
    DVector::from_fn(n, |old, _| permuted[pos[old]])
}

fn residuals<S: Real>(
    data: &QpData<S>,
    bounded: &[usize],
    z: &DVector<S>,
    y_eq: &DVector<S>,
    y_b: &DVector<S>,
) -> KktResiduals<S> {
    let primal_eq = if data.beq.is_empty() {
        S::zero()
    } else {
        (data.aeq.mul_vec(z) - &data.beq).amax()
    };
    let mut primal_bound = S::zero();
    let mut comp = S::zero();
    for (k, &i) in bounded.iter().enumerate() {
        let below = data.lo[i] - z[i];
        let above = z[i] - data.hi[i];
        primal_bound = primal_bound.max(below.max(above).max(S::zero()));
        let y = y_b[k];
        if y > S::zero() {
            comp = comp.max((y * (data.hi[i] - z[i])).abs());
        } else if y < S::zero() {
            comp = comp.max((y * (z[i] - data.lo[i])).abs());
        }
    }
    let mut dual = data.h.mul_vec(z) + &data.q + data.aeq.tr_mul_vec(y_eq);
    for (k, &i) in bounded.iter().enumerate() {
        dual[i] += y_b[k];
    }
    KktResiduals {
        primal_eq,
        primal_bound,
        dual: dual.amax(),
        complementarity: comp,
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble<S: Real>(
    data: &QpData<S>,
    bounded: &[usize],
    z: DVector<S>,
    y_eq: DVector<S>,
    y_b: DVector<S>,
    kkt: KktResiduals<S>,
    iterations: usize,
    status: QpStatus,
) -> QpSolution<S> {
    let mut bound_duals = DVector::zeros(data.n_vars());
    for (k, &i) in bounded.iter().enumerate() {
        bound_duals[i] = y_b[k];
    }
    QpSolution {
        z,
        eq_duals: y_eq,
        bound_duals,
        status,
        kkt,
        iterations,
    }
}

/// Exact solve on the active set guessed from the splitting duals: fix
/// bound-active variables, solve the reduced equality-constrained QP by
/// augmented-Lagrangian iterations on the banded factorization, then verify
/// the full KKT conditions.
#[allow(clippy::too_many_arguments)]
fn polish<S: Real>(
    data: &QpData<S>,
    eq_rows: &[Vec<(usize, S)>],
    bounded: &[usize],
    z: &DVector<S>,
    y_eq: &DVector<S>,
    y_b: &DVector<S>,
    tol: S,
) -> Option<QpSolution<S>> {
    let n = data.n_vars();
    // Guess the active set from dual signs, falling back to primal proximity.
    let mut fixed_value: Vec<Option<S>> = vec![None; n];
    let scale = S::one() + z.amax();
    for (k, &i) in bounded.iter().enumerate() {
        let near_lo = (z[i] - data.lo[i]).abs() <= S::lit(1e-7) * scale;
        let near_hi = (data.hi[i] - z[i]).abs() <= S::lit(1e-7) * scale;
        if y_b[k] < -S::lit(1e-12) || (near_lo && y_b[k].abs() <= S::lit(1e-12)) {
            if data.lo[i].is_finite() {
                fixed_value[i] = Some(data.lo[i]);
            }
        } else if y_b[k] > S::lit(1e-12) || near_hi {
            if data.hi[i].is_finite() {
                fixed_value[i] = Some(data.hi[i]);
            }
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| fixed_value[i].is_none()).collect();
    let mut free_pos = vec![usize::MAX; n];
    for (k, &i) in free.iter().enumerate() {
        free_pos[i] = k;
    }
    let nf = free.len();

    // Reduced cost: qf = q_F + H_FA z_A; reduced rows: b - A_A z_A.
    let mut zfix = DVector::zeros(n);
    for i in 0..n {
        if let Some(v) = fixed_value[i] {
            zfix[i] = v;
        }
    }
    let h_zfix = data.h.mul_vec(&zfix);
    let mut qf = DVector::zeros(nf);
    for (k, &i) in free.iter().enumerate() {
        qf[k] = data.q[i] + h_zfix[i];
    }
    let m_eq = eq_rows.len();
    let mut bf = DVector::zeros(m_eq);
    let mut rows_f: Vec<Vec<(usize, S)>> = Vec::with_capacity(m_eq);
    for (r, row) in eq_rows.iter().enumerate() {
        let mut rf = Vec::with_capacity(row.len());
        let mut shift = S::zero();
        for &(c, v) in row {
            match free_pos[c] {
                usize::MAX => shift += v * zfix[c],
                k => rf.push((k, v)),
            }
        }
        bf[r] = data.beq[r] - shift;
        rows_f.push(rf);
    }

    // Banded factorization of H_FF + delta I + rho_p A_F^T A_F on a fresh
    // RCM ordering of the reduced pattern.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); nf];
    for &(r, c, _) in &data.h.triplets {
        if r != c && free_pos[r] != usize::MAX && free_pos[c] != usize::MAX {
            adj[free_pos[r]].push(free_pos[c]);
            adj[free_pos[c]].push(free_pos[r]);
        }
    }
    for row in &rows_f {
        for i in 0..row.len() {
            for j in i + 1..row.len() {
                adj[row[i].0].push(row[j].0);
                adj[row[j].0].push(row[i].0);
            }
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let order_f = reverse_cuthill_mckee(&adj);
    let mut pos_f = vec![0usize; nf];
    for (new, &old) in order_f.iter().enumerate() {
        pos_f[old] = new;
    }
    let mut bw_f = 0usize;
    for (v, list) in adj.iter().enumerate() {
        for &w in list {
            bw_f = bw_f.max(pos_f[v].abs_diff(pos_f[w]));
        }
    }

    let rho_p = S::lit(1e6);
    let delta = S::lit(1e-9);
    let half = S::lit(0.5);
    let mut band = BandMatrix::zeros(nf, bw_f);
    for &(r, c, v) in &data.h.triplets {
        let (fr, fc) = (free_pos[r], free_pos[c]);
        if fr == usize::MAX || fc == usize::MAX {
            continue;
        }
        if fr == fc {
            band.add(pos_f[fr], pos_f[fr], v);
        } else {
            let (a, b) = (pos_f[fr].max(pos_f[fc]), pos_f[fr].min(pos_f[fc]));
            band.add(a, b, half * v);
        }
    }
    for i in 0..nf {
        band.add(i, i, delta);
    }
    for row in &rows_f {
        for i in 0..row.len() {
            let (ci, vi) = row[i];
            band.add(pos_f[ci], pos_f[ci], rho_p * vi * vi);
            for j in i + 1..row.len() {
                let (cj, vj) = row[j];
                let (a, b) = (pos_f[ci].max(pos_f[cj]), pos_f[ci].min(pos_f[cj]));
                band.add(a, b, rho_p * vi * vj);
            }
        }
    }
    band.cholesky_in_place()?;

    let mut nu = y_eq.clone();
    let mut zf = DVector::<S>::zeros(nf);
    for _ in 0..20 {
        let mut rhs = -qf.clone();
        for (r, row) in rows_f.iter().enumerate() {
            let w = rho_p * bf[r] - nu[r];
            for &(k, v) in row {
                rhs[k] += v * w;
            }
        }
        let mut permuted = vec![S::zero(); nf];
        for k in 0..nf {
            permuted[pos_f[k]] = rhs[k];
        }
        band.solve_in_place(&mut permuted);
        for k in 0..nf {
            zf[k] = permuted[pos_f[k]];
        }
        let mut worst = S::zero();
        for (r, row) in rows_f.iter().enumerate() {
            let mut ax = S::zero();
            for &(k, v) in row {
                ax += v * zf[k];
            }
            let r_res = ax - bf[r];
            nu[r] += rho_p * r_res;
            worst = worst.max(r_res.abs());
        }
        if worst <= S::lit(1e-14) * (S::one() + bf.amax()) {
            break;
        }
    }

    // Reassemble the full candidate and its duals.
    let mut z_new = zfix;
    for (k, &i) in free.iter().enumerate() {
        z_new[i] = zf[k];
    }
    let stationarity = data.h.mul_vec(&z_new) + &data.q + data.aeq.tr_mul_vec(&nu);
    let mut y_b_new = DVector::zeros(bounded.len());
    for (k, &i) in bounded.iter().enumerate() {
        if fixed_value[i].is_some() {
            y_b_new[k] = -stationarity[i];
        }
    }
    // Sign and primal checks: wrong-sign duals or out-of-box free variables
    // mean the active-set guess was wrong.
    for (k, &i) in bounded.iter().enumerate() {
        if let Some(v) = fixed_value[i] {
            let at_lo = v == data.lo[i];
            if at_lo && y_b_new[k] > tol {
                return None;
            }
            if !at_lo && y_b_new[k] < -tol {
                return None;
            }
        } else {
            if z_new[i] < data.lo[i] - tol || z_new[i] > data.hi[i] + tol {
                return None;
            }
        }
    }
    let kkt = residuals(data, bounded, &z_new, &nu, &y_b_new);
    if kkt.max() <= tol {
        Some(assemble(data, bounded, z_new, nu, y_b_new, kkt, 0, QpStatus::Optimal))
    } else {
        None
    }
}

/// Discrete adjoint sequence and waypoint multipliers recovered from the
/// equality duals of a transcription-produced QP.
#[derive(Debug, Clone)]
pub struct AdjointEstimate<S: Real> {
    /// One ambient covector per grid node; the defect dual of interval i is
    /// assigned to its left node, and the final node repeats the last
    /// interval.
    pub gamma: Vec<DVector<S>>,
    /// Raw equality duals of the waypoint rows, in waypoint order.
    pub waypoint_multipliers: Vec<DVector<S>>,
}

/// Map QP equality duals to node adjoints under the normalization p0 = -1
/// (the costs were assembled with positive sign, so the duals already carry
/// the continuous convention; the `dt` weighting of the cost rows makes the
/// scaling unity).
pub fn extract_adjoints<S: Real>(
    data: &QpData<S>,
    sol: &QpSolution<S>,
    _dt: S,
) -> Result<AdjointEstimate<S>> {
    if sol.status != QpStatus::Optimal {
        return Err(Error::ExtractionRefused {
            status: sol.status.as_str(),
        });
    }
    let structure = data
        .structure
        .as_ref()
        .ok_or_else(|| Error::Missing("QP carries no transcription structure".into()))?;
    let nx = structure.layout.nx;
    let d = structure.layout.d;
    let mut gamma = Vec::with_capacity(d);
    for range in &structure.rows.dynamics_rows {
        debug_assert_eq!(range.len(), nx);
        gamma.push(sol.eq_duals.rows(range.start, nx).clone_owned());
    }
    if let Some(last) = gamma.last().cloned() {
        gamma.push(last);
    } else {
        return Err(Error::Missing("QP has no dynamics rows".into()));
    }
    let waypoint_multipliers = structure
        .rows
        .waypoint_rows
        .iter()
        .map(|wr| sol.eq_duals.rows(wr.rows.start, wr.rows.len()).clone_owned())
        .collect();
    Ok(AdjointEstimate {
        gamma,
        waypoint_multipliers,
    })
}

//! Banded symmetric positive-definite factorization and a bandwidth-reducing
//! ordering.
//!
//! The splitting iteration solves one SPD system per iteration with a fixed
//! matrix, so we factor once into a banded Cholesky under a reverse
//! Cuthill-McKee permutation of the variable graph. Transcribed problems
//! order themselves node-by-node, giving a bandwidth of a couple of state
//! blocks independently of the horizon length.

use crate::Real;

/// Lower-band storage: entry (r, c) with `c <= r <= c + bw` lives at
/// `data[c * (bw + 1) + (r - c)]`.
pub struct BandMatrix<S> {
    pub n: usize,
    pub bw: usize,
    data: Vec<S>,
}

impl<S: Real> BandMatrix<S> {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self {
            n,
            bw,
            data: vec![S::zero(); n * (bw + 1)],
        }
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: S) {
        debug_assert!(r >= c && r - c <= self.bw);
        self.data[c * (self.bw + 1) + (r - c)] += v;
    }

    #[inline]
    fn at(&self, r: usize, c: usize) -> S {
        self.data[c * (self.bw + 1) + (r - c)]
    }

    #[inline]
    fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[c * (self.bw + 1) + (r - c)] = v;
    }

    /// In-place Cholesky of the stored lower band. Fails on a non-positive
    /// pivot.
    pub fn cholesky_in_place(&mut self) -> Option<()> {
        let n = self.n;
        let bw = self.bw;
        for j in 0..n {
            let mut diag = self.at(j, j);
            let k0 = j.saturating_sub(bw);
            for k in k0..j {
                let l = self.at(j, k);
                diag -= l * l;
            }
            if diag <= S::zero() || !diag.is_finite() {
                return None;
            }
            let diag = diag.sqrt();
            self.set(j, j, diag);
            let rmax = (j + bw).min(n - 1);
            for r in j + 1..=rmax {
                let mut v = self.at(r, j);
                let k0 = r.saturating_sub(bw).max(k0);
                for k in k0..j {
                    // Both (r, k) and (j, k) lie in the band only when
                    // r - k <= bw; k0 already guarantees it.
                    v -= self.at(r, k) * self.at(j, k);
                }
                self.set(r, j, v / diag);
            }
        }
        Some(())
    }

    /// Solve `L L^T x = b` in place after [`Self::cholesky_in_place`].
    pub fn solve_in_place(&self, b: &mut [S]) {
        let n = self.n;
        let bw = self.bw;
        for j in 0..n {
            let xj = b[j] / self.at(j, j);
            b[j] = xj;
            let rmax = (j + bw).min(n - 1);
            for r in j + 1..=rmax {
                b[r] -= self.at(r, j) * xj;
            }
        }
        for j in (0..n).rev() {
            let mut v = b[j];
            let rmax = (j + bw).min(n - 1);
            for r in j + 1..=rmax {
                v -= self.at(r, j) * b[r];
            }
            b[j] = v / self.at(j, j);
        }
    }
}

/// Reverse Cuthill-McKee ordering of an undirected graph given as adjacency
/// lists. Returns `order` with `order[new] = old`; disconnected components
/// are processed from their minimum-degree vertices. Deterministic.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    let degree = |i: usize| adj[i].len();

    let mut candidates: Vec<usize> = (0..n).collect();
    candidates.sort_unstable_by_key(|&i| (degree(i), i));

    for &start in &candidates {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        queue.push_back(start);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_unstable_by_key(|&w| (degree(w), w));
            for w in next {
                if !visited[w] {
                    visited[w] = true;
                    queue.push_back(w);
                }
            }
        }
    }
    order.reverse();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    #[test]
    fn banded_cholesky_matches_dense() {
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..20 {
            let n = rng.random_range(3..30);
            let bw = rng.random_range(1..n.min(6));
            // Random banded SPD matrix: diagonally dominant.
            let mut dense = DMatrix::<f64>::zeros(n, n);
            for c in 0..n {
                for r in c..(c + bw + 1).min(n) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    if r == c {
                        dense[(r, c)] = 4.0 + v.abs() + bw as f64;
                    } else {
                        dense[(r, c)] = v;
                        dense[(c, r)] = v;
                    }
                }
            }
            let mut band = BandMatrix::zeros(n, bw);
            for c in 0..n {
                for r in c..(c + bw + 1).min(n) {
                    band.add(r, c, dense[(r, c)]);
                }
            }
            band.cholesky_in_place().unwrap();
            let b = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
            let mut x = b.as_slice().to_vec();
            band.solve_in_place(&mut x);
            let x = DVector::from_vec(x);
            let oracle = dense.clone().cholesky().unwrap().solve(&b);
            assert_relative_eq!(x, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn non_spd_matrix_is_rejected() {
        let mut band = BandMatrix::zeros(2, 1);
        band.add(0, 0, 1.0);
        band.add(1, 1, -1.0);
        assert!(band.cholesky_in_place().is_none());
    }

    #[test]
    fn rcm_reduces_chain_bandwidth() {
        // A chain graph listed in scrambled order should come back with
        // neighbors adjacent.
        let n = 20;
        let mut adj = vec![Vec::new(); n];
        // Chain over a fixed scramble of 0..n.
        let scramble: Vec<usize> = (0..n).map(|i| (i * 7) % n).collect();
        for w in scramble.windows(2) {
            adj[w[0]].push(w[1]);
            adj[w[1]].push(w[0]);
        }
        let order = reverse_cuthill_mckee(&adj);
        let mut pos = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            pos[old] = new;
        }
        let mut bw = 0usize;
        for (v, nbrs) in adj.iter().enumerate() {
            for &w in nbrs {
                bw = bw.max(pos[v].abs_diff(pos[w]));
            }
        }
        assert_eq!(bw, 1);
    }
}

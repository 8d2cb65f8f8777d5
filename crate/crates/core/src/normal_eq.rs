//! Weighted ridge normal equations `([X, Z]^T W [X, Z] + T) θ = r` assembled
//! directly into sparse upper-triangular storage.
//!
//! The pattern depends only on the design, so positions are computed once and
//! every refresh is a scatter-add followed by a numeric refactorization. The
//! random-effect block is ordered before the dense fixed-effect block to keep
//! fill-in of the factor confined to the last `p` rows.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::design::DesignSet;
use crate::error::Result;
use crate::sparse::{CscMatrix, SparseCholesky};

#[derive(Debug, Clone)]
pub struct NormalSystem {
    with_fixed: bool,
    p: usize,
    dim: usize,
    /// original system index -> factor index
    perm: Vec<usize>,
    matrix: CscMatrix,
    /// Per row, positions of the upper-triangular pairs in value order.
    row_ptr: Vec<usize>,
    row_pos: Vec<usize>,
    /// Per effect, positions of every group's `d x d` upper block (row-major pairs).
    prior_pos: Vec<Vec<usize>>,
    chol: SparseCholesky,
    factored: bool,
}

impl NormalSystem {
    /// System over `[beta, alpha]` when `with_fixed`, otherwise over `alpha` only.
    pub fn new(d: &DesignSet, with_fixed: bool) -> Self {
        let p = if with_fixed { d.p() } else { 0 };
        let q = d.q();
        let dim = p + q;
        let perm: Vec<usize> = (0..dim).map(|i| if i < p { q + i } else { i - p }).collect();

        let mut cols: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); dim];
        let mut entries = Vec::new();
        let mut row_pairs: Vec<Vec<(usize, usize)>> = Vec::with_capacity(d.n_obs());
        for i in 0..d.n_obs() {
            entries.clear();
            entries.extend(0..p);
            entries.extend(d.z_row(i).map(|(a, _)| p + a));
            let mut pairs = Vec::with_capacity(entries.len() * (entries.len() + 1) / 2);
            for u in 0..entries.len() {
                for v in u..entries.len() {
                    let (a, b) = (perm[entries[u]], perm[entries[v]]);
                    let (r, c) = if a <= b { (a, b) } else { (b, a) };
                    cols[c].insert(r);
                    pairs.push((r, c));
                }
            }
            row_pairs.push(pairs);
        }
        let mut prior_pairs = Vec::new();
        for e in &d.meta.effects {
            let mut pairs = Vec::new();
            for g in 0..e.n_groups() {
                for k in 0..e.dim() {
                    for l in k..e.dim() {
                        let (a, b) = (perm[p + e.index(g, k)], perm[p + e.index(g, l)]);
                        let (r, c) = if a <= b { (a, b) } else { (b, a) };
                        cols[c].insert(r);
                        pairs.push((r, c));
                    }
                }
            }
            prior_pairs.push(pairs);
        }
        for (c, set) in cols.iter_mut().enumerate() {
            set.insert(c);
        }
        let triplets = cols.iter().enumerate().flat_map(|(c, rows)| rows.iter().map(move |&r| (r, c, 0.0))).collect();
        let matrix = CscMatrix::from_triplets(dim, dim, triplets);

        let mut row_ptr = vec![0];
        let mut row_pos = Vec::new();
        for pairs in &row_pairs {
            row_pos.extend(pairs.iter().map(|&(r, c)| matrix.position(r, c).expect("pattern")));
            row_ptr.push(row_pos.len());
        }
        let prior_pos = prior_pairs
            .iter()
            .map(|pairs| pairs.iter().map(|&(r, c)| matrix.position(r, c).expect("pattern")).collect())
            .collect();
        let chol = SparseCholesky::analyze(&matrix);
        NormalSystem { with_fixed, p, dim, perm, matrix, row_ptr, row_pos, prior_pos, chol, factored: false }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Fills the matrix with `Σ_i w_i a_i a_i^T + blockdiag(I ⊗ precisions[j])`
    /// (plus `ridge` on every diagonal entry) and refactors it.
    pub fn refresh(&mut self, d: &DesignSet, weights: &[f64], precisions: &[DMatrix<f64>], ridge: f64) -> Result<()> {
        let vals = self.matrix.values_mut();
        vals.iter_mut().for_each(|v| *v = 0.0);
        let mut entries: Vec<f64> = Vec::with_capacity(self.p + 8);
        for i in 0..d.n_obs() {
            let w = weights[i];
            if w == 0.0 {
                continue;
            }
            entries.clear();
            if self.with_fixed {
                entries.extend((0..self.p).map(|c| d.x[(i, c)]));
            }
            entries.extend(d.z_row(i).map(|(_, v)| v));
            let pos = &self.row_pos[self.row_ptr[i]..self.row_ptr[i + 1]];
            let mut t = 0;
            for u in 0..entries.len() {
                let wu = w * entries[u];
                for v in u..entries.len() {
                    vals[pos[t]] += wu * entries[v];
                    t += 1;
                }
            }
        }
        for (e, (pos, prec)) in d.meta.effects.iter().zip(self.prior_pos.iter().zip(precisions)) {
            let dim = e.dim();
            let mut t = 0;
            for _ in 0..e.n_groups() {
                for k in 0..dim {
                    for l in k..dim {
                        vals[pos[t]] += prec[(k, l)];
                        t += 1;
                    }
                }
            }
        }
        if ridge != 0.0 {
            for c in 0..self.dim {
                let at = self.matrix.position(c, c).expect("diagonal");
                self.matrix.values_mut()[at] += ridge;
            }
        }
        self.factored = false;
        self.chol.refactor(&self.matrix)?;
        self.factored = true;
        Ok(())
    }

    fn to_factor(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (i, &x) in v.iter().enumerate() {
            out[self.perm[i]] = x;
        }
        out
    }

    fn from_factor(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim).map(|i| v[self.perm[i]]).collect()
    }

    /// Solves the system for a right-hand side in original ordering.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        assert!(self.factored, "system not factored");
        let mut x = self.to_factor(rhs);
        self.chol.solve(&mut x);
        self.from_factor(&x)
    }

    /// Dense inverse in original ordering.
    pub fn inverse(&self) -> DMatrix<f64> {
        assert!(self.factored, "system not factored");
        let inv = self.chol.inverse();
        DMatrix::from_fn(self.dim, self.dim, |a, b| inv[(self.perm[a], self.perm[b])])
    }

    /// `ln |A|` of the assembled matrix.
    pub fn log_det(&self) -> f64 {
        self.chol.log_det()
    }

    /// A draw from `N(mean, A^{-1})`.
    pub fn sample<R: Rng + ?Sized>(&self, mean: &[f64], rng: &mut R) -> Vec<f64> {
        assert!(self.factored, "system not factored");
        let mut z: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
        self.chol.solve_lt(&mut z);
        let shift = self.from_factor(&z);
        mean.iter().zip(shift).map(|(m, s)| m + s).collect()
    }

    /// Number of stored entries in the Cholesky factor.
    pub fn factor_nnz(&self) -> usize {
        self.chol.nnz()
    }

    /// Assembled matrix (original ordering), for inspection and tests.
    pub fn dense_matrix(&self) -> DMatrix<f64> {
        let upper = self.matrix.to_dense();
        DMatrix::from_fn(self.dim, self.dim, |a, b| {
            let (r, c) = (self.perm[a], self.perm[b]);
            if r <= c {
                upper[(r, c)]
            } else {
                upper[(c, r)]
            }
        })
    }
}

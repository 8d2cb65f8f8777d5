//! Column-compressed sparse matrices and an up-looking sparse Cholesky
//! factorization for the symmetric positive definite normal equations.
//!
//! The factorization follows the classic elimination-tree formulation: the
//! symbolic pass (elimination tree plus column counts) depends only on the
//! sparsity pattern, so it is computed once per design and reused by every
//! numeric refactorization inside the CAVI loop and the Gibbs sampler.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    nrows: usize,
    ncols: usize,
    col_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CscMatrix {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.1, t.0));
        let mut col_ptr = vec![0usize; ncols + 1];
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet ({r}, {c}) out of bounds");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            row_idx.push(r);
            values.push(v);
            col_ptr[c + 1] += 1;
            last = Some((r, c));
        }
        for c in 0..ncols {
            col_ptr[c + 1] += col_ptr[c];
        }
        CscMatrix { nrows, ncols, col_ptr, row_idx, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn col_ptr(&self) -> &[usize] {
        &self.col_ptr
    }

    pub fn row_idx(&self) -> &[usize] {
        &self.row_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `(row, value)` pairs stored in column `c`.
    pub fn column(&self, c: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()].iter().copied().zip(self.values[range].iter().copied())
    }

    /// `y = A x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = vec![0.0; self.nrows];
        for (c, &xc) in x.iter().enumerate() {
            if xc == 0.0 {
                continue;
            }
            for (r, v) in self.column(c) {
                y[r] += v * xc;
            }
        }
        y
    }

    /// `y = A^T x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.nrows);
        (0..self.ncols).map(|c| self.column(c).map(|(r, v)| v * x[r]).sum()).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.nrows, self.ncols);
        for c in 0..self.ncols {
            for (r, v) in self.column(c) {
                out[(r, c)] += v;
            }
        }
        out
    }

    /// Position of entry `(r, c)` in the value array, if structurally present.
    pub fn position(&self, r: usize, c: usize) -> Option<usize> {
        let range = self.col_ptr[c]..self.col_ptr[c + 1];
        self.row_idx[range.clone()].binary_search(&r).ok().map(|k| range.start + k)
    }
}

const NONE: usize = usize::MAX;

/// Cholesky factor `L` (lower triangular, `A = L L^T`) of a sparse SPD matrix
/// given by its upper triangle in column-compressed form.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    parent: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
}

impl SparseCholesky {
    /// Symbolic analysis of the upper-triangular pattern of `a`.
    pub fn analyze(a: &CscMatrix) -> Self {
        assert_eq!(a.nrows, a.ncols, "Cholesky requires a square matrix");
        let n = a.ncols;
        let parent = etree(a);
        let mut counts = vec![0usize; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];
        for k in 0..n {
            let top = ereach(a, k, &parent, &mut stack, &mut mark);
            for &i in &stack[top..] {
                counts[i] += 1;
            }
            counts[k] += 1;
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + counts[k];
        }
        let nnz = lp[n];
        SparseCholesky { n, parent, lp, li: vec![0; nnz], lx: vec![0.0; nnz] }
    }

    pub fn factor(a: &CscMatrix) -> Result<Self> {
        let mut chol = Self::analyze(a);
        chol.refactor(a)?;
        Ok(chol)
    }

    /// Numeric factorization reusing the symbolic analysis. `a` must have the
    /// pattern used in [`SparseCholesky::analyze`].
    pub fn refactor(&mut self, a: &CscMatrix) -> Result<()> {
        let n = self.n;
        assert_eq!(a.ncols, n);
        let mut next: Vec<usize> = self.lp[..n].to_vec();
        let mut x = vec![0.0; n];
        let mut stack = vec![0usize; n];
        let mut mark = vec![false; n];
        for k in 0..n {
            let top = ereach(a, k, &self.parent, &mut stack, &mut mark);
            for (r, v) in a.column(k) {
                if r <= k {
                    x[r] += v;
                }
            }
            let mut d = x[k];
            x[k] = 0.0;
            for &i in &stack[top..] {
                let lki = x[i] / self.lx[self.lp[i]];
                x[i] = 0.0;
                for p in self.lp[i] + 1..next[i] {
                    x[self.li[p]] -= self.lx[p] * lki;
                }
                d -= lki * lki;
                let p = next[i];
                next[i] += 1;
                self.li[p] = k;
                self.lx[p] = lki;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::npd(format!("sparse Cholesky pivot {k} is {d:e}")));
            }
            let p = next[k];
            next[k] += 1;
            self.li[p] = k;
            self.lx[p] = d.sqrt();
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.lx.len()
    }

    /// `ln |A| = 2 Σ ln L_kk`
    pub fn log_det(&self) -> f64 {
        (0..self.n).map(|k| self.lx[self.lp[k]].ln()).sum::<f64>() * 2.0
    }

    /// Solves `L y = b` in place.
    pub fn solve_l(&self, b: &mut [f64]) {
        for j in 0..self.n {
            let p0 = self.lp[j];
            b[j] /= self.lx[p0];
            let bj = b[j];
            for p in p0 + 1..self.lp[j + 1] {
                b[self.li[p]] -= self.lx[p] * bj;
            }
        }
    }

    /// Solves `L^T x = b` in place.
    pub fn solve_lt(&self, b: &mut [f64]) {
        for j in (0..self.n).rev() {
            let p0 = self.lp[j];
            let mut acc = b[j];
            for p in p0 + 1..self.lp[j + 1] {
                acc -= self.lx[p] * b[self.li[p]];
            }
            b[j] = acc / self.lx[p0];
        }
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        self.solve_l(b);
        self.solve_lt(b);
    }

    /// Dense `A^{-1}` by solving against the identity, one column at a time.
    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut inv = DMatrix::zeros(n, n);
        let mut col = vec![0.0; n];
        for k in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[k] = 1.0;
            self.solve(&mut col);
            for (i, v) in col.iter().enumerate() {
                inv[(i, k)] = *v;
            }
        }
        // symmetrize away round-off
        for j in 0..n {
            for i in 0..j {
                let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
                inv[(i, j)] = v;
                inv[(j, i)] = v;
            }
        }
        inv
    }

    pub fn to_dense_l(&self) -> DMatrix<f64> {
        let mut l = DMatrix::zeros(self.n, self.n);
        for j in 0..self.n {
            for p in self.lp[j]..self.lp[j + 1] {
                l[(self.li[p], j)] = self.lx[p];
            }
        }
        l
    }
}

/// Elimination tree of a symmetric matrix stored by its upper triangle.
fn etree(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols;
    let mut parent = vec![NONE; n];
    let mut ancestor = vec![NONE; n];
    for k in 0..n {
        for &r in &a.row_idx[a.col_ptr[k]..a.col_ptr[k + 1]] {
            let mut i = r;
            while i != NONE && i < k {
                let inext = ancestor[i];
                ancestor[i] = k;
                if inext == NONE {
                    parent[i] = k;
                }
                i = inext;
            }
        }
    }
    parent
}

/// Nonzero pattern of row `k` of `L`, written to `stack[top..]` in
/// topological order. Returns `top`.
fn ereach(a: &CscMatrix, k: usize, parent: &[usize], stack: &mut [usize], mark: &mut [bool]) -> usize {
    let n = a.ncols;
    let mut top = n;
    mark[k] = true;
    for &r in &a.row_idx[a.col_ptr[k]..a.col_ptr[k + 1]] {
        if r > k {
            continue;
        }
        let mut i = r;
        let mut len = 0;
        while !mark[i] {
            stack[len] = i;
            len += 1;
            mark[i] = true;
            i = parent[i];
        }
        while len > 0 {
            len -= 1;
            top -= 1;
            stack[top] = stack[len];
        }
    }
    for &i in &stack[top..] {
        mark[i] = false;
    }
    mark[k] = false;
    top
}

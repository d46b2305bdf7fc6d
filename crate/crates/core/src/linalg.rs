//! Sparse matrix assembly and the bordered-system factorization.
//!
//! Matrices are assembled as coordinate triplets (duplicates allowed and
//! summed) and compressed to CSC for factorization. The LU factorization uses
//! a fill-reducing column ordering that is computed once per [`SparseLu`] and
//! reused for every later factorization of the same topology; only numeric
//! values are refactored per sample. Rows and columns are equilibrated before
//! factoring, so barrier terms near active bounds do not masquerade as
//! singularity.

use nalgebra::{DMatrix, DVector};
use rsparse::data::{Sprs, Symb};

use crate::error::{Error, Result};

/// Pivot threshold for the partial-pivoting LU. Diagonal pivots are kept
/// whenever they are at least this fraction of the column maximum.
const PIVOT_TOLERANCE: f64 = 0.1;

/// Pivot-magnitude ratio above which a factorization is treated as singular.
const SINGULAR_PIVOT_RATIO: f64 = 1e16;

/// Equilibration sweeps applied before factoring.
const EQUILIBRATION_SWEEPS: usize = 3;

/// Iterative refinement steps applied by [`LuFactors::solve`].
const REFINEMENT_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Triplets {
    nrows: usize,
    ncols: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Triplets {
    pub fn new(nrows: usize, ncols: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn with_capacity(nrows: usize, ncols: usize, cap: usize) -> Self {
        Self {
            nrows,
            ncols,
            rows: Vec::with_capacity(cap),
            cols: Vec::with_capacity(cap),
            vals: Vec::with_capacity(cap),
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    #[inline]
    pub fn push(&mut self, row: usize, col: usize, val: f64) {
        debug_assert!(
            row < self.nrows && col < self.ncols,
            "({row},{col}) out of bounds"
        );
        self.rows.push(row);
        self.cols.push(col);
        self.vals.push(val);
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .zip(&self.cols)
            .zip(&self.vals)
            .map(|((&r, &c), &v)| (r, c, v))
    }

    /// Adds `scale * other` with its origin shifted to `(row0, col0)`.
    pub fn add_block(&mut self, other: &Triplets, row0: usize, col0: usize, scale: f64) {
        for (r, c, v) in other.iter() {
            self.push(row0 + r, col0 + c, scale * v);
        }
    }

    /// Adds `scale * other^T` with its origin shifted to `(row0, col0)`.
    pub fn add_block_transposed(&mut self, other: &Triplets, row0: usize, col0: usize, scale: f64) {
        for (r, c, v) in other.iter() {
            self.push(row0 + c, col0 + r, scale * v);
        }
    }

    /// y = A x
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for (r, c, v) in self.iter() {
            y[r] += v * x[c];
        }
        y
    }

    /// y = A^T x
    pub fn tr_mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.ncols];
        for (r, c, v) in self.iter() {
            y[c] += v * x[r];
        }
        y
    }

    /// Triplets of `A^T diag(d) A`, accumulated row by row. Rows of the
    /// constraint Jacobians carry at most a handful of entries, so the
    /// per-row outer products stay small.
    pub fn gram_weighted(&self, d: &[f64]) -> Triplets {
        let by_row = self.rows_compressed();
        let mut out = Triplets::new(self.ncols, self.ncols);
        for (r, entries) in by_row.iter().enumerate() {
            let w = d[r];
            if w == 0.0 {
                continue;
            }
            for &(ci, vi) in entries {
                for &(cj, vj) in entries {
                    out.push(ci, cj, w * vi * vj);
                }
            }
        }
        out
    }

    /// Entries grouped by row with duplicates summed.
    pub fn rows_compressed(&self) -> Vec<Vec<(usize, f64)>> {
        let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); self.nrows];
        for (r, c, v) in self.iter() {
            by_row[r].push((c, v));
        }
        for row in &mut by_row {
            row.sort_by_key(|e| e.0);
            row.dedup_by(|b, a| {
                if a.0 == b.0 {
                    a.1 += b.1;
                    true
                } else {
                    false
                }
            });
        }
        by_row
    }

    /// Exactly symmetric copy `(A + A^T) / 2` with duplicates summed.
    pub fn symmetrized(&self) -> Triplets {
        debug_assert_eq!(self.nrows, self.ncols);
        let mut entries: Vec<((usize, usize), f64)> = self
            .iter()
            .map(|(r, c, v)| ((r.max(c), r.min(c)), if r == c { v } else { 0.5 * v }))
            .collect();
        entries.sort_unstable_by_key(|e| e.0);
        let mut out = Triplets::with_capacity(self.nrows, self.ncols, 2 * entries.len());
        let mut k = 0;
        while k < entries.len() {
            let key = entries[k].0;
            let mut sum = 0.0;
            while k < entries.len() && entries[k].0 == key {
                sum += entries[k].1;
                k += 1;
            }
            out.push(key.0, key.1, sum);
            if key.0 != key.1 {
                out.push(key.1, key.0, sum);
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter() {
            m[(r, c)] += v;
        }
        m
    }

    /// Compressed sparse column form with duplicates summed.
    fn to_csc(&self) -> Sprs<f64> {
        let mut order: Vec<usize> = (0..self.vals.len()).collect();
        order.sort_unstable_by_key(|&k| (self.cols[k], self.rows[k]));
        let mut p = vec![0isize; self.ncols + 1];
        let mut i = Vec::with_capacity(order.len());
        let mut x = Vec::with_capacity(order.len());
        let mut last: Option<(usize, usize)> = None;
        for &k in &order {
            let key = (self.cols[k], self.rows[k]);
            if last == Some(key) {
                *x.last_mut().expect("entry pushed") += self.vals[k];
            } else {
                i.push(key.1);
                x.push(self.vals[k]);
                p[key.0 + 1] += 1;
                last = Some(key);
            }
        }
        for c in 0..self.ncols {
            p[c + 1] += p[c];
        }
        Sprs {
            nzmax: x.len(),
            m: self.nrows,
            n: self.ncols,
            p,
            i,
            x,
        }
    }
}

/// LU factorization engine for one matrix topology.
#[derive(Debug, Default)]
pub struct SparseLu {
    symbolic: Option<(usize, Symb)>,
    factorizations: u64,
}

impl SparseLu {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of numeric factorizations performed so far.
    pub fn factorizations(&self) -> u64 {
        self.factorizations
    }

    /// Factors a square matrix. The column ordering is computed on the first
    /// call (or when the dimension changes) and reused afterwards.
    pub fn factor(&mut self, a: &Triplets, context: &str) -> Result<LuFactors> {
        if a.nrows != a.ncols {
            return Err(Error::DimensionMismatch {
                what: "square matrix",
                expected: a.nrows,
                found: a.ncols,
            });
        }
        let n = a.nrows;
        let original = a.to_csc();
        let mut csc = original.clone();
        let (row_scale, col_scale) = equilibrate(&mut csc);
        let needs_analysis = !matches!(&self.symbolic, Some((dim, _)) if *dim == n);
        if needs_analysis {
            // the ordering routine cannot handle tiny matrices; use natural order
            let order = if n < 3 { -1 } else { 1 };
            self.symbolic = Some((n, rsparse::sqr(&csc, order, false)));
        }
        let (_, symb) = self.symbolic.as_mut().expect("symbolic analysis present");
        let mut symb_run = symb.clone();
        self.factorizations += 1;
        let num =
            rsparse::lu(&csc, &mut symb_run, PIVOT_TOLERANCE).map_err(|_| Error::Singular {
                context: context.to_string(),
                condition: f64::INFINITY,
            })?;
        // keep the observed fill as the allocation guess for the next run
        symb.lnz = symb_run.lnz.max(symb.lnz);
        symb.unz = symb_run.unz.max(symb.unz);

        let factors = LuFactors {
            n,
            pinv: num.pinv.clone().unwrap_or_default(),
            q: symb.q.clone(),
            l: num.l,
            u: num.u,
            row_scale,
            col_scale,
            original,
        };
        let ratio = factors.pivot_ratio();
        if !ratio.is_finite() || ratio > SINGULAR_PIVOT_RATIO {
            return Err(Error::Singular {
                context: context.to_string(),
                condition: ratio,
            });
        }
        Ok(factors)
    }
}

#[derive(Debug, Clone)]
pub struct LuFactors {
    n: usize,
    pinv: Vec<isize>,
    q: Option<Vec<isize>>,
    l: Sprs<f64>,
    u: Sprs<f64>,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
    /// Unscaled matrix, for residuals during refinement.
    original: Sprs<f64>,
}

impl LuFactors {
    pub fn dim(&self) -> usize {
        self.n
    }

    /// Ratio of the largest to the smallest pivot magnitude of the
    /// equilibrated matrix; a cheap lower bound on its condition number.
    pub fn pivot_ratio(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for k in 0..self.n {
            // U(k,k) is stored last in column k
            let end = self.u.p[k + 1] as usize;
            let d = self.u.x[end - 1].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if self.n == 0 {
            1.0
        } else if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }

    /// Solves `A x = b`, refining against the unscaled matrix.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert_eq!(b.len(), self.n, "right-hand side length");
        let mut x = self.solve_once(b);
        for _ in 0..REFINEMENT_STEPS {
            let mut r = b.to_vec();
            let a = &self.original;
            for j in 0..self.n {
                for k in a.p[j] as usize..a.p[j + 1] as usize {
                    r[a.i[k]] -= a.x[k] * x[j];
                }
            }
            let dx = self.solve_once(&r);
            x.iter_mut().zip(dx).for_each(|(x, d)| *x += d);
        }
        x
    }

    fn solve_once(&self, b: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (k, &bk) in b.iter().enumerate() {
            x[self.pinv[k] as usize] = bk * self.row_scale[k];
        }
        rsparse::lsolve(&self.l, &mut x);
        rsparse::usolve(&self.u, &mut x);
        let mut out = match &self.q {
            Some(q) => {
                let mut out = vec![0.0; self.n];
                for (k, &qk) in q.iter().enumerate().take(self.n) {
                    out[qk as usize] = x[k];
                }
                out
            }
            None => x,
        };
        for (v, c) in out.iter_mut().zip(&self.col_scale) {
            *v *= c;
        }
        out
    }
}

/// Ruiz scaling in place: returns `(r, c)` with `diag(r) A diag(c)` having
/// row and column maxima close to one. Empty rows and columns keep scale one.
fn equilibrate(a: &mut Sprs<f64>) -> (Vec<f64>, Vec<f64>) {
    let (m, n) = (a.m, a.n);
    let mut r = vec![1.0; m];
    let mut c = vec![1.0; n];
    for _ in 0..EQUILIBRATION_SWEEPS {
        let mut row_max = vec![0.0f64; m];
        let mut col_max = vec![0.0f64; n];
        for j in 0..n {
            for k in a.p[j] as usize..a.p[j + 1] as usize {
                let v = a.x[k].abs();
                row_max[a.i[k]] = row_max[a.i[k]].max(v);
                col_max[j] = col_max[j].max(v);
            }
        }
        let dr: Vec<f64> = row_max
            .iter()
            .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        let dc: Vec<f64> = col_max
            .iter()
            .map(|&v| if v > 0.0 { 1.0 / v.sqrt() } else { 1.0 })
            .collect();
        for j in 0..n {
            for k in a.p[j] as usize..a.p[j + 1] as usize {
                a.x[k] *= dr[a.i[k]] * dc[j];
            }
        }
        r.iter_mut().zip(&dr).for_each(|(a, b)| *a *= b);
        c.iter_mut().zip(&dc).for_each(|(a, b)| *a *= b);
    }
    (r, c)
}

/// Dense LU solve used by the verification oracles.
pub fn dense_solve(a: &DMatrix<f64>, b: &[f64]) -> Option<Vec<f64>> {
    let lu = a.clone().lu();
    lu.solve(&DVector::from_column_slice(b))
        .map(|x| x.iter().copied().collect())
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kkt_example() -> Triplets {
        // [[2, 0, 1], [0, 3, 1], [1, 1, 0]]: indefinite with a zero diagonal
        let mut a = Triplets::new(3, 3);
        a.push(0, 0, 2.0);
        a.push(1, 1, 3.0);
        a.push(0, 2, 1.0);
        a.push(2, 0, 1.0);
        a.push(1, 2, 0.5);
        a.push(1, 2, 0.5);
        a.push(2, 1, 1.0);
        a
    }

    #[test]
    fn duplicates_are_summed() {
        let a = kkt_example();
        assert_eq!(a.to_dense()[(1, 2)], 1.0);
        let csc = a.to_csc();
        assert_eq!(csc.x.len(), 6);
    }

    #[test]
    fn lu_solves_saddle_point_matrix() {
        let a = kkt_example();
        let mut lu = SparseLu::new();
        let f = lu.factor(&a, "test").unwrap();
        let b = [1.0, 2.0, 3.0];
        let x = f.solve(&b);
        let r = a.mul_vec(&x);
        for (ri, bi) in r.iter().zip(b) {
            assert!((ri - bi).abs() < 1e-12);
        }
        // second factorization reuses the ordering
        let f2 = lu.factor(&a, "test").unwrap();
        assert_eq!(f2.solve(&b), x);
        assert_eq!(lu.factorizations(), 2);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let mut a = Triplets::new(2, 2);
        a.push(0, 0, 1.0);
        a.push(0, 1, 1.0);
        a.push(1, 0, 1.0);
        a.push(1, 1, 1.0);
        let err = SparseLu::new().factor(&a, "ones").unwrap_err();
        assert!(matches!(err, Error::Singular { .. }));
    }

    #[test]
    fn gram_weighted_matches_dense() {
        let mut j = Triplets::new(2, 3);
        j.push(0, 0, 1.0);
        j.push(0, 2, -2.0);
        j.push(1, 1, 3.0);
        j.push(1, 2, 0.5);
        let d = [2.0, -1.0];
        let dense = j.to_dense();
        let expect =
            dense.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(&d)) * &dense;
        let got = j.gram_weighted(&d).to_dense();
        assert!((expect - got).abs().max() < 1e-15);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Saddle-point matrices `[[D, B^T], [B, 0]]` with a positive
        /// diagonal block spanning several orders of magnitude and a
        /// full-rank border.
        fn saddle() -> impl Strategy<Value = (Triplets, Vec<f64>)> {
            (2usize..8, 1usize..3).prop_flat_map(|(n, m)| {
                let m = m.min(n);
                (
                    prop::collection::vec(-6.0f64..6.0, n),
                    prop::collection::vec(-1.0f64..1.0, n * m),
                    prop::collection::vec(-1.0f64..1.0, n + m),
                )
                    .prop_map(move |(logd, border, rhs)| {
                        let mut a = Triplets::new(n + m, n + m);
                        for (i, e) in logd.iter().enumerate() {
                            a.push(i, i, 10f64.powf(*e));
                        }
                        for r in 0..m {
                            for c in 0..n {
                                // identity part keeps the border full rank
                                let v = border[r * n + c] + if r == c { 2.0 } else { 0.0 };
                                a.push(n + r, c, v);
                                a.push(c, n + r, v);
                            }
                        }
                        (a, rhs)
                    })
            })
        }

        proptest! {
            #[test]
            fn solve_has_small_residual((a, b) in saddle()) {
                let f = SparseLu::new().factor(&a, "prop").unwrap();
                let x = f.solve(&b);
                let r: Vec<f64> = a.mul_vec(&x).iter().zip(&b).map(|(ax, bi)| ax - bi).collect();
                let scale = a.iter().map(|(_, _, v)| v.abs()).fold(0.0, f64::max) * norm_inf(&x) + norm_inf(&b);
                prop_assert!(norm_inf(&r) <= 1e-12 * scale, "residual {} scale {}", norm_inf(&r), scale);
            }
        }
    }
}

//! Dense and banded Cholesky factorizations plus constraint-row pruning.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Ridge added (relative to the largest diagonal) when a factorization fails.
pub const JITTER: f64 = 1e-10;

/// Consecutive jittered factorizations tolerated before giving up.
pub const MAX_CONSECUTIVE_JITTER: u32 = 5;

/// Largest `|i - j|` with a nonzero entry.
pub fn bandwidth(m: &DMatrix<f64>) -> usize {
    let n = m.nrows();
    let mut bw = 0;
    for i in 0..n {
        for j in 0..m.ncols() {
            if m[(i, j)] != 0.0 {
                bw = bw.max(i.abs_diff(j));
            }
        }
    }
    bw
}

/// Lower Cholesky factor of a symmetric banded matrix stored by rows:
/// `rows[i * (bw + 1) + (bw - (i - j))] = L[i][j]` for `i - bw <= j <= i`.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    rows: Vec<f64>,
}

impl BandedCholesky {
    pub fn new(m: &DMatrix<f64>, bw: usize) -> Option<Self> {
        let n = m.nrows();
        let w = bw + 1;
        let mut rows = vec![0.0; n * w];
        for i in 0..n {
            let j0 = i.saturating_sub(bw);
            for j in j0..=i {
                let mut s = m[(i, j)];
                let k0 = j0.max(j.saturating_sub(bw));
                for k in k0..j {
                    s -= rows[i * w + bw + k - i] * rows[j * w + bw + k - j];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return None;
                    }
                    rows[i * w + bw] = s.sqrt();
                } else {
                    rows[i * w + bw + j - i] = s / rows[j * w + bw];
                }
            }
        }
        Some(Self { n, bw, rows })
    }

    fn l(&self, i: usize, j: usize) -> f64 {
        self.rows[i * (self.bw + 1) + self.bw + j - i]
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        for i in 0..self.n {
            let mut s = y[i];
            for k in i.saturating_sub(self.bw)..i {
                s -= self.l(i, k) * y[k];
            }
            y[i] = s / self.l(i, i);
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &DVector<f64>) -> DVector<f64> {
        let mut x = y.clone();
        for i in (0..self.n).rev() {
            let mut s = x[i];
            for k in i + 1..(i + self.bw + 1).min(self.n) {
                s -= self.l(k, i) * x[k];
            }
            x[i] = s / self.l(i, i);
        }
        x
    }
}

/// Cholesky factor of an SPD precision matrix, dense or banded.
#[derive(Debug, Clone)]
pub enum SpdFactor {
    Dense(nalgebra::Cholesky<f64, nalgebra::Dyn>),
    Banded(BandedCholesky),
}

impl SpdFactor {
    /// Factorizes `m`, using the banded path when its bandwidth is at most
    /// `max_band` and narrow relative to the size.
    pub fn new(m: &DMatrix<f64>, max_band: usize) -> Option<Self> {
        let bw = bandwidth(m);
        if bw <= max_band && 2 * bw + 1 < m.nrows() {
            BandedCholesky::new(m, bw).map(SpdFactor::Banded)
        } else {
            nalgebra::Cholesky::new(m.clone()).map(SpdFactor::Dense)
        }
    }

    pub fn dense(m: &DMatrix<f64>) -> Option<Self> {
        nalgebra::Cholesky::new(m.clone()).map(SpdFactor::Dense)
    }

    pub fn banded(m: &DMatrix<f64>) -> Option<Self> {
        BandedCholesky::new(m, bandwidth(m)).map(SpdFactor::Banded)
    }

    pub fn dim(&self) -> usize {
        match self {
            SpdFactor::Dense(c) => c.l_dirty().nrows(),
            SpdFactor::Banded(b) => b.n,
        }
    }

    /// `M⁻¹ b`.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Dense(c) => c.solve(b),
            SpdFactor::Banded(f) => f.solve_upper(&f.solve_lower(b)),
        }
    }

    /// `L⁻ᵀ z`: maps a standard normal vector to a draw with covariance `M⁻¹`.
    pub fn solve_upper(&self, z: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Dense(c) => {
                let l = c.l_dirty();
                let mut x = z.clone();
                let n = x.len();
                for i in (0..n).rev() {
                    let mut s = x[i];
                    for k in i + 1..n {
                        s -= l[(k, i)] * x[k];
                    }
                    x[i] = s / l[(i, i)];
                }
                x
            }
            SpdFactor::Banded(f) => f.solve_upper(z),
        }
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            out.set_column(j, &self.solve(&e));
        }
        out
    }
}

/// Tracks consecutive jittered factorizations across a run.
#[derive(Debug, Default, Clone)]
pub struct JitterLog {
    pub consecutive: u32,
    pub total: u64,
}

impl JitterLog {
    /// Factorizes `m`; on failure retries with a growing ridge. Errors once
    /// more than [`MAX_CONSECUTIVE_JITTER`] consecutive calls needed a ridge.
    pub fn factor(&mut self, m: &DMatrix<f64>, max_band: usize, block: &str) -> Result<SpdFactor> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(block, "non-finite entry in precision matrix"));
        }
        if let Some(f) = SpdFactor::new(m, max_band) {
            self.consecutive = 0;
            return Ok(f);
        }
        self.consecutive += 1;
        self.total += 1;
        if self.consecutive > MAX_CONSECUTIVE_JITTER {
            return Err(Error::numerical(block, "precision matrix needed jitter too many times in a row"));
        }
        let scale = (0..m.nrows()).map(|i| m[(i, i)].abs()).fold(0.0, f64::max).max(1.0);
        let mut ridge = JITTER * scale;
        for _ in 0..8 {
            let mut j = m.clone();
            for i in 0..j.nrows() {
                j[(i, i)] += ridge;
            }
            if let Some(f) = SpdFactor::new(&j, max_band) {
                return Ok(f);
            }
            ridge *= 100.0;
        }
        Err(Error::NotPositiveDefinite(format!("block {block}")))
    }
}

/// Selects a maximal set of numerically independent rows of `a` by greedy
/// pivoted Gram–Schmidt (pivoted QR of `aᵀ`). A row is kept while its residual
/// norm exceeds `tol × ` the first pivot's norm.
pub fn independent_rows(a: &DMatrix<f64>, tol: f64) -> Vec<usize> {
    let k = a.nrows();
    if k == 0 {
        return Vec::new();
    }
    let mut resid: Vec<DVector<f64>> = (0..k).map(|i| a.row(i).transpose()).collect();
    let mut chosen = Vec::new();
    let mut remaining: Vec<usize> = (0..k).collect();
    let mut lead = None;
    while !remaining.is_empty() {
        let (pos, &best) = remaining
            .iter()
            .enumerate()
            .max_by(|x, y| resid[*x.1].norm().total_cmp(&resid[*y.1].norm()))
            .unwrap();
        let norm = resid[best].norm();
        let lead_norm = *lead.get_or_insert(norm);
        if !(norm > tol * lead_norm) || norm == 0.0 {
            break;
        }
        remaining.swap_remove(pos);
        chosen.push(best);
        let q = &resid[best] / norm;
        for &r in &remaining {
            let proj = q.dot(&resid[r]);
            resid[r] -= &q * proj;
        }
    }
    chosen.sort_unstable();
    chosen
}

pub fn select_rows(a: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), a.ncols(), |i, j| a[(rows[i], j)])
}

/// Symmetrizes in place (averages with the transpose).
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                2.5
            } else if i.abs_diff(j) == 1 {
                -1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn banded_matches_dense() {
        let m = tridiag(12);
        let b = DVector::from_fn(12, |i, _| (i as f64).cos());
        let fb = SpdFactor::banded(&m).unwrap();
        let fd = SpdFactor::dense(&m).unwrap();
        assert!(matches!(fb, SpdFactor::Banded(_)));
        assert!((fb.solve(&b) - fd.solve(&b)).norm() < 1e-13);
        assert!((fb.solve_upper(&b) - fd.solve_upper(&b)).norm() < 1e-13);
        assert!((&m * fb.solve(&b) - &b).norm() < 1e-12);
    }

    #[test]
    fn banded_rejects_indefinite() {
        let mut m = tridiag(5);
        m[(2, 2)] = -1.0;
        assert!(BandedCholesky::new(&m, 1).is_none());
    }

    #[test]
    fn jitter_recovers_semidefinite() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let m = &v * v.transpose();
        let mut log = JitterLog::default();
        assert!(log.factor(&m, 0, "test").is_ok());
        assert_eq!(log.total, 1);
    }

    #[test]
    fn prunes_duplicate_rows() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 2.0, 0.0, 2.0, 0.0, 1.0, 0.0]);
        assert_eq!(independent_rows(&a, 1e-12).len(), 2);
        assert!(independent_rows(&DMatrix::zeros(2, 3), 1e-12).is_empty());
    }
}

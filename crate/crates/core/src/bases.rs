//! B-spline temporal bases, graph-Laplacian kernels and the normalized basis
//! sets that carry the mode-matrix priors.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;

/// Coupling of the chain-graph Laplacian precision `D − ηU`.
pub const LAPLACIAN_COUPLING: f64 = 0.99;

/// Gaussian bases are truncated at this many spacings from their center.
pub const TRUNCATION_SPACINGS: f64 = 3.0;

/// B-spline basis of degree `q` on `[0, 1]` with `k_t = d_t − q` equal
/// sub-intervals. Knots are equidistant with spacing `1 / k_t` and extend `q`
/// spacings past each end of the interval, so that at `t = 0` the quadratic
/// basis has exactly two active functions, each equal to one half.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    degree: usize,
    n_bases: usize,
    knots: Vec<f64>,
}

impl SplineBasis {
    pub fn new(degree: usize, n_bases: usize) -> Result<Self> {
        if n_bases < degree + 1 {
            return Err(Error::Config(format!(
                "a degree-{degree} spline basis needs at least {} functions, got {n_bases}",
                degree + 1
            )));
        }
        // knots are stored in units of the knot spacing, so they are integers
        // and boundary evaluations are exact
        let knots = (0..n_bases + degree + 1).map(|j| j as f64 - degree as f64).collect();
        Ok(Self { degree, n_bases, knots })
    }

    /// Default temporal basis: quadratic with `d_t` functions.
    pub fn quadratic(n_bases: usize) -> Result<Self> {
        Self::new(2, n_bases)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn len(&self) -> usize {
        self.n_bases
    }

    pub fn is_empty(&self) -> bool {
        self.n_bases == 0
    }

    /// Knot positions on the time axis.
    pub fn knots(&self) -> Vec<f64> {
        let k = self.intervals();
        self.knots.iter().map(|u| u / k).collect()
    }

    fn intervals(&self) -> f64 {
        (self.n_bases - self.degree) as f64
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain { value: t, domain: "[0, 1]" })
        }
    }

    /// Index `j` with `knots[j] <= t < knots[j + 1]`.
    fn span(&self, t: f64) -> usize {
        let k = &self.knots;
        let mut lo = self.degree;
        let mut hi = self.n_bases + 1;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if k[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    /// Values of the degree-`p` functions that are nonzero on the span
    /// containing `t`, i.e. functions `span − p ..= span` (Cox–de Boor).
    fn local(&self, t: f64, p: usize, span: usize) -> Vec<f64> {
        let k = &self.knots;
        let mut n = vec![0.0; p + 1];
        n[0] = 1.0;
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        for j in 1..=p {
            left[j] = t - k[span + 1 - j];
            right[j] = k[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            n[j] = saved;
        }
        n
    }

    /// All `d_t` basis values at `t`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        Self::check(t)?;
        let t = t * self.intervals();
        let span = self.span(t);
        let q = self.degree;
        let vals = self.local(t, q, span);
        let mut out = DVector::zeros(self.n_bases);
        for (r, v) in vals.into_iter().enumerate() {
            let idx = span - q + r;
            if idx < self.n_bases {
                out[idx] = v;
            }
        }
        Ok(out)
    }

    /// First derivatives of all basis functions at `t`, from the identity
    /// `b'_{q,h} = q·[b_{q−1,h}/(t_{h+q} − t_h) − b_{q−1,h+1}/(t_{h+q+1} − t_{h+1})]`.
    pub fn derivative(&self, t: f64) -> Result<DVector<f64>> {
        Self::check(t)?;
        let q = self.degree;
        let mut out = DVector::zeros(self.n_bases);
        if q == 0 {
            return Ok(out);
        }
        let t = t * self.intervals();
        let span = self.span(t);
        // lower-degree functions span-(q-1) ..= span
        let lower = self.local(t, q - 1, span);
        let low = |idx: isize| -> f64 {
            let base = span as isize - (q as isize - 1);
            let r = idx - base;
            if r >= 0 && (r as usize) < lower.len() {
                lower[r as usize]
            } else {
                0.0
            }
        };
        let k = &self.knots;
        for h in 0..self.n_bases {
            let a = k[h + q] - k[h];
            let b = k[h + q + 1] - k[h + 1];
            let mut v = 0.0;
            if a > 0.0 {
                v += low(h as isize) / a;
            }
            if b > 0.0 {
                v -= low(h as isize + 1) / b;
            }
            out[h] = q as f64 * v * self.intervals();
        }
        Ok(out)
    }

    /// `n × d_t` design matrix with rows `b(t_j)ᵀ`.
    pub fn design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut m = DMatrix::zeros(times.len(), self.n_bases);
        for (j, &t) in times.iter().enumerate() {
            m.set_row(j, &self.eval(t)?.transpose());
        }
        Ok(m)
    }

    /// Matrix `M` (`d_t × (d_t − 1)`) whose column space is exactly the set of
    /// coefficient vectors `a` with `b(0)ᵀa = 0`. For the quadratic basis this
    /// is [`constraint_expander`].
    pub fn separation_expander(&self) -> DMatrix<f64> {
        let b0 = self.eval(0.0).expect("0 is in the domain");
        let d = self.n_bases;
        let mut m = DMatrix::zeros(d, d - 1);
        for i in 1..d {
            m[(i, i - 1)] = 1.0;
        }
        for j in 1..d {
            m[(0, j - 1)] = -b0[j] / b0[0];
        }
        m
    }
}

/// `d_t × (d_t − 1)` matrix with `M[1,1] = −1` and `M[i+1,i] = 1`, so that
/// rows one and two of `M·A₁` always sum to zero.
pub fn constraint_expander(d_t: usize) -> DMatrix<f64> {
    assert!(d_t >= 2, "constraint expander needs at least two bases");
    let mut m = DMatrix::zeros(d_t, d_t - 1);
    m[(0, 0)] = -1.0;
    for i in 1..d_t {
        m[(i, i - 1)] = 1.0;
    }
    m
}

/// Chain-graph Laplacian kernel `Q = (D − ηU)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphLaplacianKernel {
    pub m: usize,
    pub coupling: f64,
    /// `D − ηU` (tridiagonal).
    pub precision: DMatrix<f64>,
    /// `Q`.
    pub covariance: DMatrix<f64>,
}

pub fn build_laplacian(m: usize) -> Result<GraphLaplacianKernel> {
    if m == 0 {
        return Err(Error::Config("laplacian kernel needs at least one node".into()));
    }
    let eta = LAPLACIAN_COUPLING;
    let mut p = DMatrix::zeros(m, m);
    if m == 1 {
        // isolated node has zero degree; use unit precision
        p[(0, 0)] = 1.0;
    } else {
        for i in 0..m {
            let deg = if i == 0 || i == m - 1 { 1.0 } else { 2.0 };
            p[(i, i)] = deg;
            if i + 1 < m {
                p[(i, i + 1)] = -eta;
                p[(i + 1, i)] = -eta;
            }
        }
    }
    let f = SpdFactor::dense(&p).ok_or_else(|| Error::NotPositiveDefinite("graph laplacian".into()))?;
    let covariance = f.inverse();
    Ok(GraphLaplacianKernel { m, coupling: eta, precision: p, covariance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisKind {
    /// Truncated Gaussian bumps on a coarse center grid (smooth fields).
    Gaussian,
    /// One normalized indicator per grid point with a Laplacian prior (non-smooth).
    Indicator,
    /// Identity basis and identity kernel (discrete domains).
    Identity,
    /// Free temporal coordinates pushed through the separation expander.
    Temporal,
}

/// Basis set for one mode: column values are `a(h) = g(h)ᵀγ`, i.e. `a = Gᵀγ`,
/// with coefficients `γ ~ N(0, Q)` and `Q⁻¹ = precision`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSet {
    pub kind: BasisKind,
    /// `m × d`.
    pub g: DMatrix<f64>,
    /// `Q⁻¹`, banded.
    pub precision: DMatrix<f64>,
    /// `Q`.
    pub covariance: DMatrix<f64>,
    pub centers: Vec<f64>,
    pub spacing: f64,
}

impl BasisSet {
    pub fn n_coefficients(&self) -> usize {
        self.g.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.g.ncols()
    }

    /// `g(h)`, zero-based grid index.
    pub fn column(&self, h: usize) -> DVector<f64> {
        self.g.column(h).into_owned()
    }

    /// Prior covariance of the field, `GᵀQG` (`d × d`).
    pub fn field_covariance(&self) -> DMatrix<f64> {
        self.g.transpose() * &self.covariance * &self.g
    }

    pub fn bandwidth(&self) -> usize {
        crate::linalg::bandwidth(&self.precision)
    }
}

fn normalize_columns(raw: DMatrix<f64>, kernel: &GraphLaplacianKernel) -> DMatrix<f64> {
    let mut g = raw;
    for h in 0..g.ncols() {
        let col = g.column(h).into_owned();
        let w = (col.transpose() * &kernel.covariance * &col)[(0, 0)].sqrt();
        if w > 0.0 {
            g.column_mut(h).scale_mut(1.0 / w);
        }
    }
    g
}

/// `m` truncated Gaussian bases on grid `1..=d` (centers `0.5 + (j − 0.5)·v`,
/// spacing `v = d/m`), normalized so `g(h)ᵀQg(h) = 1` under the Laplacian kernel.
pub fn build_gaussian_bases(d: usize, m: usize) -> Result<BasisSet> {
    if m == 0 || m > d {
        return Err(Error::Config(format!("need 1 <= basis count <= grid size, got m={m}, d={d}")));
    }
    let kernel = build_laplacian(m)?;
    let v = d as f64 / m as f64;
    let centers: Vec<f64> = (0..m).map(|j| 0.5 + (j as f64 + 0.5) * v).collect();
    let raw = DMatrix::from_fn(m, d, |j, h| {
        let x = (h + 1) as f64 - centers[j];
        if x.abs() <= TRUNCATION_SPACINGS * v {
            (-x * x / (2.0 * v * v)).exp()
        } else {
            0.0
        }
    });
    let g = normalize_columns(raw, &kernel);
    Ok(BasisSet {
        kind: BasisKind::Gaussian,
        g,
        precision: kernel.precision,
        covariance: kernel.covariance,
        centers,
        spacing: v,
    })
}

/// Default Gaussian basis count `⌊d/2⌋` (at least one).
pub fn default_basis_count(d: usize) -> usize {
    (d / 2).max(1)
}

/// Indicator basis with the Laplacian kernel on all `d` grid points.
pub fn build_indicator_bases(d: usize) -> Result<BasisSet> {
    let kernel = build_laplacian(d)?;
    let g = normalize_columns(DMatrix::identity(d, d), &kernel);
    Ok(BasisSet {
        kind: BasisKind::Indicator,
        g,
        precision: kernel.precision,
        covariance: kernel.covariance,
        centers: (1..=d).map(|h| h as f64).collect(),
        spacing: 1.0,
    })
}

pub fn build_identity_bases(d: usize) -> BasisSet {
    BasisSet {
        kind: BasisKind::Identity,
        g: DMatrix::identity(d, d),
        precision: DMatrix::identity(d, d),
        covariance: DMatrix::identity(d, d),
        centers: (1..=d).map(|h| h as f64).collect(),
        spacing: 1.0,
    }
}

/// Temporal basis set in the free `(d_t − 1)` coordinates: `a = Mx`, with the
/// prior on `a` the unit-variance chain-Laplacian field restricted to the
/// separation subspace, i.e. precision `Mᵀ S⁻¹(D − ηU)S⁻¹ M`.
pub fn build_temporal_bases(spline: &SplineBasis) -> Result<BasisSet> {
    let d = spline.len();
    let m = spline.separation_expander();
    let kernel = build_laplacian(d)?;
    let s: Vec<f64> = (0..d).map(|h| kernel.covariance[(h, h)].sqrt()).collect();
    let pa = DMatrix::from_fn(d, d, |i, j| kernel.precision[(i, j)] * s[i] * s[j]);
    let mut precision = m.transpose() * pa * &m;
    crate::linalg::symmetrize(&mut precision);
    let covariance = SpdFactor::dense(&precision)
        .ok_or_else(|| Error::NotPositiveDefinite("temporal prior".into()))?
        .inverse();
    Ok(BasisSet {
        kind: BasisKind::Temporal,
        g: m.transpose(),
        precision,
        covariance,
        centers: (1..d).map(|h| h as f64).collect(),
        spacing: 1.0,
    })
}

/// `g(h₁)ᵀ Q g(h₂)` for zero-based grid indices.
pub fn prior_correlation(b: &BasisSet, h1: usize, h2: usize) -> f64 {
    (b.column(h1).transpose() * &b.covariance * b.column(h2))[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_boundary_values() {
        let b = SplineBasis::quadratic(8).unwrap();
        let v = b.eval(0.0).unwrap();
        assert_eq!(v[0], 0.5);
        assert_eq!(v[1], 0.5);
        assert!(v.iter().skip(2).all(|&x| x == 0.0));
        let v = b.eval(1.0).unwrap();
        assert_eq!(v[6], 0.5);
        assert_eq!(v[7], 0.5);
        assert!(v.iter().take(6).all(|&x| x == 0.0));
    }

    #[test]
    fn partition_of_unity_and_support() {
        for q in 1..=3 {
            let b = SplineBasis::new(q, q + 6).unwrap();
            for i in 0..=200 {
                let t = i as f64 / 200.0;
                let v = b.eval(t).unwrap();
                assert!((v.sum() - 1.0).abs() < 1e-12);
                assert!(v.iter().filter(|&&x| x != 0.0).count() <= q + 1);
                assert!(v.iter().all(|&x| x >= 0.0));
            }
        }
        assert!(SplineBasis::quadratic(8).unwrap().eval(1.5).is_err());
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for q in 1..=3 {
            let b = SplineBasis::new(q, 7).unwrap();
            for &t in &[0.05, 0.31, 0.53, 0.77, 0.93] {
                let d = b.derivative(t).unwrap();
                let h = 1e-6;
                let fd = (b.eval(t + h).unwrap() - b.eval(t - h).unwrap()) / (2.0 * h);
                assert!((&d - &fd).amax() < 1e-5, "q={q} t={t}");
            }
            // derivatives of a partition of unity sum to zero
            assert!(b.derivative(0.4).unwrap().sum().abs() < 1e-12);
        }
    }

    #[test]
    fn expander_shapes() {
        let m = constraint_expander(3);
        assert_eq!(m, DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 1.0, 0.0, 0.0, 1.0]));
        assert_eq!(constraint_expander(2), DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]));
        let b = SplineBasis::quadratic(6).unwrap();
        assert_eq!(b.separation_expander(), constraint_expander(6));
        for q in 1..=3 {
            let b = SplineBasis::new(q, 6).unwrap();
            let m = b.separation_expander();
            let r = b.eval(0.0).unwrap().transpose() * m;
            assert!(r.amax() < 1e-15);
        }
    }

    #[test]
    fn gaussian_bases_are_normalized() {
        for d in [10, 20, 35] {
            let b = build_gaussian_bases(d, default_basis_count(d)).unwrap();
            for h in 0..d {
                assert!((prior_correlation(&b, h, h) - 1.0).abs() < 1e-10);
            }
        }
        assert!(build_gaussian_bases(4, 5).is_err());
        let b = build_indicator_bases(7).unwrap();
        assert!((b.field_covariance().diagonal().add_scalar(-1.0)).amax() < 1e-12);
    }

    #[test]
    fn laplacian_is_tridiagonal_spd() {
        let k = build_laplacian(9).unwrap();
        assert_eq!(crate::linalg::bandwidth(&k.precision), 1);
        assert!(SpdFactor::dense(&k.precision).is_some());
    }
}

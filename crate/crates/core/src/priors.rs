//! Constrained Gaussian sampling, CSC-PING column draws, cumulative shrinkage
//! chains and conjugate variance updates.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bases::BasisSet;
use crate::error::{Error, Result};
use crate::linalg::{independent_rows, select_rows, SpdFactor};
use crate::rng::{gamma, normal};

/// Rows of a constraint matrix with pivot below this fraction of the leading
/// pivot are dropped before conditioning.
pub const PRUNE_TOLERANCE: f64 = 1e-12;

/// Largest precision bandwidth routed to the banded factorization.
pub const MAX_BAND: usize = 16;

#[derive(Debug, Clone)]
pub enum GaussianForm {
    Covariance(DMatrix<f64>),
    Precision(DMatrix<f64>),
}

/// `N(P⁻¹h, P⁻¹)` restricted to `{x : Ax = c}`.
#[derive(Debug, Clone)]
pub struct CanonicalGaussian {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub constraint: Option<(DMatrix<f64>, DVector<f64>)>,
}

/// Factorized form ready for moment evaluation and sampling.
pub struct PreparedGaussian {
    factor: SpdFactor,
    mean: DVector<f64>,
    // conditioning pieces: V = P⁻¹Aᵀ, W = AV, A, c
    cond: Option<(DMatrix<f64>, nalgebra::Cholesky<f64, nalgebra::Dyn>, DMatrix<f64>, DVector<f64>)>,
}

fn prune(a: &DMatrix<f64>, c: &DVector<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let rows = independent_rows(a, PRUNE_TOLERANCE);
    let c = DVector::from_iterator(rows.len(), rows.iter().map(|&r| c[r]));
    (select_rows(a, &rows), c)
}

impl PreparedGaussian {
    pub fn new(factor: SpdFactor, linear: &DVector<f64>, constraint: Option<(&DMatrix<f64>, &DVector<f64>)>) -> Result<Self> {
        let n = factor.dim();
        let mean = factor.solve(linear);
        let cond = match constraint {
            Some((a, c)) if a.nrows() > 0 => {
                if a.ncols() != n || c.len() != a.nrows() {
                    return Err(Error::Dims(format!(
                        "constraint is {}x{} with {} targets for a {n}-vector",
                        a.nrows(),
                        a.ncols(),
                        c.len()
                    )));
                }
                let (a, c) = prune(a, c);
                if a.nrows() == 0 {
                    None
                } else {
                    if a.nrows() >= n {
                        return Err(Error::Constraint(format!(
                            "{} independent constraints leave no free direction in dimension {n}",
                            a.nrows()
                        )));
                    }
                    let mut v = DMatrix::zeros(n, a.nrows());
                    for r in 0..a.nrows() {
                        v.set_column(r, &factor.solve(&a.row(r).transpose()));
                    }
                    let mut w = &a * &v;
                    crate::linalg::symmetrize(&mut w);
                    let wc = nalgebra::Cholesky::new(w)
                        .ok_or_else(|| Error::Constraint("constraint matrix is rank deficient".into()))?;
                    Some((v, wc, a, c))
                }
            }
            _ => None,
        };
        Ok(Self { factor, mean, cond })
    }

    fn project(&self, x: &mut DVector<f64>) {
        if let Some((v, wc, a, c)) = &self.cond {
            for _ in 0..2 {
                let r = a * &*x - c;
                *x -= v * wc.solve(&r);
            }
        }
    }

    pub fn mean(&self) -> DVector<f64> {
        let mut m = self.mean.clone();
        self.project(&mut m);
        m
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let mut s = self.factor.inverse();
        if let Some((v, wc, _, _)) = &self.cond {
            s -= v * wc.solve(&v.transpose());
        }
        crate::linalg::symmetrize(&mut s);
        s
    }

    /// Rue-style draw: unconstrained sample `μ + L⁻ᵀz`, then conditioning by kriging.
    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let z = DVector::from_fn(self.mean.len(), |_, _| normal(rng));
        let mut x = &self.mean + self.factor.solve_upper(&z);
        self.project(&mut x);
        x
    }
}

impl CanonicalGaussian {
    pub fn prepare(&self) -> Result<PreparedGaussian> {
        let f = SpdFactor::new(&self.precision, MAX_BAND)
            .ok_or_else(|| Error::NotPositiveDefinite("conditional precision".into()))?;
        PreparedGaussian::new(f, &self.linear, self.constraint.as_ref().map(|(a, c)| (a, c)))
    }
}

/// Conditional moments `(μ_c, Σ_c)` of `N(mean, Σ)` given `Ax = c`.
pub fn constrained_moments(
    mean: &DVector<f64>,
    form: &GaussianForm,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = prepare_form(mean, form, a, c, false)?;
    Ok((p.mean(), p.covariance()))
}

fn prepare_form(
    mean: &DVector<f64>,
    form: &GaussianForm,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    banded: bool,
) -> Result<PreparedGaussian> {
    let precision = match form {
        GaussianForm::Precision(p) => p.clone(),
        GaussianForm::Covariance(s) => SpdFactor::dense(s)
            .ok_or_else(|| Error::NotPositiveDefinite("covariance".into()))?
            .inverse(),
    };
    let factor = if banded { SpdFactor::new(&precision, MAX_BAND) } else { SpdFactor::dense(&precision) }
        .ok_or_else(|| Error::NotPositiveDefinite("precision".into()))?;
    let linear = &precision * mean;
    PreparedGaussian::new(factor, &linear, Some((a, c)))
}

/// One draw of `x ~ N(mean, Σ) | Ax = c`. Uses the banded path when the
/// precision is narrow.
pub fn sample_constrained_mvn(
    mean: &DVector<f64>,
    form: &GaussianForm,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    Ok(prepare_form(mean, form, a, c, true)?.sample(rng))
}

/// Same law as [`sample_constrained_mvn`], forced through the dense factorization.
pub fn sample_constrained_mvn_dense(
    mean: &DVector<f64>,
    form: &GaussianForm,
    a: &DMatrix<f64>,
    c: &DVector<f64>,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    Ok(prepare_form(mean, form, a, c, false)?.sample(rng))
}

/// How the cumulative shrinkage products act on a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShrinkageMode {
    /// `σ_z = ∏ς_k` multiplies the column (standard deviation of the first
    /// PING component).
    #[default]
    AsWritten,
    /// `∏ς_k` is the precision of the first PING component.
    InverseScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShrinkageChain {
    pub increments: Vec<f64>,
}

impl ShrinkageChain {
    pub fn len(&self) -> usize {
        self.increments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.increments.is_empty()
    }

    /// Cumulative products `∏_{k≤z} ς_k`.
    pub fn products(&self) -> Vec<f64> {
        let mut p = 1.0;
        self.increments
            .iter()
            .map(|s| {
                p *= s;
                p
            })
            .collect()
    }

    /// Prior standard deviation multiplier of the first component of column `z`.
    pub fn scale(&self, z: usize, mode: ShrinkageMode) -> f64 {
        let p: f64 = self.increments[..=z].iter().product();
        match mode {
            ShrinkageMode::AsWritten => p,
            ShrinkageMode::InverseScale => 1.0 / p.sqrt(),
        }
    }
}

pub fn shrinkage_prior_draw(r: usize, kappa1: f64, kappa2: f64, rng: &mut impl Rng) -> ShrinkageChain {
    let increments = (0..r).map(|k| gamma(rng, if k == 0 { kappa1 } else { kappa2 }, 1.0)).collect();
    ShrinkageChain { increments }
}

/// Per-column statistics for the shrinkage update: the first component's
/// dimension and its quadratic form `γᵀQ⁻¹γ` (restricted prior precision).
#[derive(Debug, Clone, Copy)]
pub struct ColumnStat {
    pub dim: usize,
    pub quad: f64,
}

/// Gibbs update of every increment `ς_m` in turn.
pub fn shrinkage_gibbs_update(
    chain: &ShrinkageChain,
    stats: &[ColumnStat],
    kappa1: f64,
    kappa2: f64,
    mode: ShrinkageMode,
    rng: &mut impl Rng,
) -> ShrinkageChain {
    let r = chain.len();
    assert_eq!(stats.len(), r);
    let mut inc = chain.increments.clone();
    for m in 0..r {
        let kappa = if m == 0 { kappa1 } else { kappa2 };
        let others = |l: usize, inc: &[f64]| -> f64 { (0..=l).filter(|&k| k != m).map(|k| inc[k]).product() };
        let dims: f64 = stats[m..].iter().map(|s| s.dim as f64).sum();
        match mode {
            ShrinkageMode::InverseScale => {
                let rate = 1.0 + 0.5 * (m..r).map(|l| others(l, &inc) * stats[l].quad).sum::<f64>();
                inc[m] = gamma(rng, kappa + 0.5 * dims, rate);
            }
            ShrinkageMode::AsWritten => {
                // log density in u = log ς: (κ − Σdim)u − e^u − B e^{−2u}, concave
                let b = 0.5 * (m..r).map(|l| stats[l].quad / others(l, &inc).powi(2)).sum::<f64>();
                let lin = kappa - dims;
                let logf = |u: f64| lin * u - u.exp() - b * (-2.0 * u).exp();
                let u = slice_sample(inc[m].ln(), logf, 1.0, rng);
                inc[m] = u.exp();
            }
        }
    }
    ShrinkageChain { increments: inc }
}

/// Univariate slice sampler with stepping out and shrinkage.
pub fn slice_sample(x0: f64, logf: impl Fn(f64) -> f64, width: f64, rng: &mut impl Rng) -> f64 {
    let f0 = logf(x0);
    let level = f0 + rng.random::<f64>().max(f64::MIN_POSITIVE).ln();
    let mut lo = x0 - width * rng.random::<f64>();
    let mut hi = lo + width;
    let mut steps = 0;
    while logf(lo) > level && steps < 200 {
        lo -= width;
        steps += 1;
    }
    steps = 0;
    while logf(hi) > level && steps < 200 {
        hi += width;
        steps += 1;
    }
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if logf(x) > level {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-14 {
            return x0;
        }
    }
}

/// Conjugate draw of a precision with prior `Ga(a, b)` given `n` Gaussian
/// residuals with sum of squares `ss`: `Ga(a + n/2, b + ss/2)`.
pub fn variance_gibbs(a: f64, b: f64, n: f64, ss: f64, rng: &mut impl Rng) -> f64 {
    gamma(rng, a + 0.5 * n, b + 0.5 * ss.max(0.0))
}

/// Draws one CSC-PING column of length `d`: components `k ≥ 2` are free
/// `N(0, Q)` fields, the first carries the scale `σ_z` and is conditioned so
/// that the product column is orthogonal to every previous column.
/// Returns the column and its coefficient stack.
pub fn ping_column_draw(
    basis: &BasisSet,
    depth: usize,
    z: usize,
    previous: &DMatrix<f64>,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    let m = basis.n_coefficients();
    let d = basis.grid_len();
    if z >= m.min(d) || previous.ncols() >= m.min(d) {
        return Err(Error::Rank { z: z.max(previous.ncols()) + 1, max: m.min(d) });
    }
    assert!(depth >= 1);
    let cov_factor = SpdFactor::dense(&basis.precision).ok_or_else(|| Error::NotPositiveDefinite("basis prior".into()))?;
    let mut comps: Vec<DVector<f64>> = Vec::with_capacity(depth);
    comps.push(DVector::zeros(m));
    for _ in 1..depth {
        let zv = DVector::from_fn(m, |_, _| normal(rng));
        comps.push(cov_factor.solve_upper(&zv));
    }
    let mut weight = DVector::from_element(d, 1.0);
    for c in comps.iter().skip(1) {
        weight.component_mul_assign(&(basis.g.transpose() * c));
    }
    let precision = &basis.precision / (scale * scale);
    let factor = SpdFactor::new(&precision, MAX_BAND).ok_or_else(|| Error::NotPositiveDefinite("basis prior".into()))?;
    let first = if previous.ncols() == 0 {
        PreparedGaussian::new(factor, &DVector::zeros(m), None)?.sample(rng)
    } else {
        // Γ = A_prevᵀ diag(weight) Gᵀ
        let mut wg = basis.g.transpose();
        for h in 0..d {
            wg.row_mut(h).scale_mut(weight[h]);
        }
        let gamma_mat = previous.transpose() * wg;
        let c = DVector::zeros(gamma_mat.nrows());
        PreparedGaussian::new(factor, &DVector::zeros(m), Some((&gamma_mat, &c)))?.sample(rng)
    };
    comps[0] = first;
    let col = (basis.g.transpose() * &comps[0]).component_mul(&weight);
    Ok((col, comps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::{build_gaussian_bases, build_identity_bases};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn coordinate_constraint_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        let c = DVector::from_vec(vec![0.0]);
        let form = GaussianForm::Covariance(DMatrix::identity(2, 2));
        for _ in 0..100 {
            let x = sample_constrained_mvn(&DVector::zeros(2), &form, &a, &c, &mut rng).unwrap();
            assert!(x[0].abs() <= 1e-15);
        }
    }

    #[test]
    fn moments_match_projection_formula() {
        let s = DMatrix::from_row_slice(3, 3, &[2.0, 0.5, 0.1, 0.5, 1.0, 0.2, 0.1, 0.2, 1.5]);
        let mu = DVector::from_vec(vec![1.0, -1.0, 0.5]);
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let c = DVector::from_vec(vec![2.0]);
        let (m, cov) = constrained_moments(&mu, &GaussianForm::Covariance(s.clone()), &a, &c).unwrap();
        let b = (&a * &s * a.transpose()).try_inverse().unwrap();
        let m0 = &mu + &s * a.transpose() * &b * (&c - &a * &mu);
        let c0 = &s - &s * a.transpose() * &b * &a * &s;
        assert!((m - m0).amax() < 1e-12);
        assert!((cov - c0).amax() < 1e-12);
    }

    #[test]
    fn redundant_rows_are_pruned() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 2.0, 2.0, 0.0]);
        let c = DVector::from_vec(vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = sample_constrained_mvn(&DVector::zeros(3), &GaussianForm::Precision(DMatrix::identity(3, 3)), &a, &c, &mut rng)
            .unwrap();
        assert!((x[0] + x[1]).abs() < 1e-14);
        let full = DMatrix::identity(3, 3);
        assert!(matches!(
            sample_constrained_mvn(&DVector::zeros(3), &GaussianForm::Precision(full.clone()), &full, &DVector::zeros(3), &mut rng),
            Err(Error::Constraint(_))
        ));
    }

    #[test]
    fn variance_gibbs_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20000;
        let mean: f64 = (0..n).map(|_| variance_gibbs(0.1, 0.1, 100.0, 50.0, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 50.1 / 25.1).abs() < 0.02);
    }

    #[test]
    fn shrinkage_prior_first_increment() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 50000;
        let m: f64 = (0..n).map(|_| shrinkage_prior_draw(1, 2.1, 3.1, &mut rng).products()[0]).sum::<f64>() / n as f64;
        assert!((m - 2.1).abs() < 0.03);
    }

    #[test]
    fn ping_identity_first_column_is_plain_gaussian() {
        let b = build_identity_bases(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (col, comps) = ping_column_draw(&b, 1, 0, &DMatrix::zeros(4, 0), 2.0, &mut rng).unwrap();
        assert_eq!(comps.len(), 1);
        assert_eq!(col, comps[0]);
    }

    #[test]
    fn ping_columns_stay_orthogonal() {
        let b = build_gaussian_bases(12, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = DMatrix::zeros(12, 0);
        for z in 0..4 {
            let (col, _) = ping_column_draw(&b, 3, z, &a, 1.0, &mut rng).unwrap();
            a = a.insert_column(z, 0.0);
            a.set_column(z, &col);
        }
        assert!(crate::tensor::orthogonality_defect(&a) < 1e-10);
        assert!(matches!(ping_column_draw(&b, 1, 7, &a, 1.0, &mut rng), Err(Error::Rank { .. })));
    }
}

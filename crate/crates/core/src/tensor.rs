//! Dense tensors, mode products, unfoldings and the CP / Tucker / compact
//! HOSVD factorization types.
//!
//! Storage is row-major over `dims` (last index varies fastest), so the
//! unfolding along the last mode is a plain reshape. Mode indices are
//! zero-based throughout the API.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pivot threshold used to decide whether a mode matrix has full column rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Off-diagonal tolerance (relative to the largest diagonal) for semi-orthogonality.
pub const SEMI_ORTHOGONAL_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl DenseTensor {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Dims("tensor order must be at least 1".into()));
        }
        if let Some(j) = dims.iter().position(|&d| d == 0) {
            return Err(Error::Shape { mode: j, msg: "dimension must be positive".into() });
        }
        let n: usize = dims.iter().product();
        if n != values.len() {
            return Err(Error::Dims(format!(
                "dims {:?} need {} values, got {}",
                dims,
                n,
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(!dims.is_empty() && dims.iter().all(|&d| d > 0), "invalid dims {dims:?}");
        Self { dims: dims.to_vec(), values: vec![0.0; dims.iter().product()] }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(dims);
        t.values.fill(value);
        t
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; dims.len()];
        for v in t.values.iter_mut() {
            *v = f(&idx);
            increment(&mut idx, dims);
        }
        t
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.dims)
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        for (i, (&x, &d)) in idx.iter().zip(&self.dims).enumerate() {
            debug_assert!(x < d, "index {x} out of range in mode {i}");
            off = off * d + x;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.values[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.values[o] = v;
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_assign(&mut self, other: &DenseTensor) {
        assert_eq!(self.dims, other.dims);
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += b);
    }

    pub fn axpy(&mut self, alpha: f64, other: &DenseTensor) {
        assert_eq!(self.dims, other.dims);
        self.values.iter_mut().zip(&other.values).for_each(|(a, b)| *a += alpha * b);
    }

    pub fn dot(&self, other: &DenseTensor) -> f64 {
        assert_eq!(self.dims, other.dims);
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Sub-tensor with `mode` fixed at `index` (order drops by one; an
    /// order-1 tensor yields a length-1 tensor).
    pub fn slice(&self, mode: usize, index: usize) -> DenseTensor {
        let (left, n, right) = split_dims(&self.dims, mode);
        assert!(index < n);
        let mut out = Vec::with_capacity(left * right);
        for l in 0..left {
            let base = (l * n + index) * right;
            out.extend_from_slice(&self.values[base..base + right]);
        }
        let mut dims: Vec<usize> = self.dims.clone();
        dims.remove(mode);
        if dims.is_empty() {
            dims.push(1);
        }
        DenseTensor { dims, values: out }
    }

    /// Drop index `index` along `mode`.
    pub fn remove_index(&self, mode: usize, index: usize) -> DenseTensor {
        let (left, n, right) = split_dims(&self.dims, mode);
        assert!(n > 1 && index < n);
        let mut out = Vec::with_capacity(left * (n - 1) * right);
        for l in 0..left {
            for k in (0..n).filter(|&k| k != index) {
                let base = (l * n + k) * right;
                out.extend_from_slice(&self.values[base..base + right]);
            }
        }
        let mut dims = self.dims.clone();
        dims[mode] -= 1;
        DenseTensor { dims, values: out }
    }

    /// Append a slab along `mode`; `fill` receives the multi-index of each new cell.
    pub fn append_index(&self, mode: usize, mut fill: impl FnMut(&[usize]) -> f64) -> DenseTensor {
        let mut dims = self.dims.clone();
        dims[mode] += 1;
        let n_old = self.dims[mode];
        DenseTensor::from_fn(&dims, |idx| {
            if idx[mode] < n_old {
                self.get(idx)
            } else {
                fill(idx)
            }
        })
    }
}

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for j in (0..dims.len().saturating_sub(1)).rev() {
        s[j] = s[j + 1] * dims[j + 1];
    }
    s
}

fn split_dims(dims: &[usize], mode: usize) -> (usize, usize, usize) {
    let left: usize = dims[..mode].iter().product();
    let right: usize = dims[mode + 1..].iter().product();
    (left, dims[mode], right)
}

/// Advance a row-major multi-index; returns false after wrapping around.
pub fn increment(idx: &mut [usize], dims: &[usize]) -> bool {
    for j in (0..idx.len()).rev() {
        idx[j] += 1;
        if idx[j] < dims[j] {
            return true;
        }
        idx[j] = 0;
    }
    false
}

/// `t ×_mode m`: contracts index `mode` of `t` (length r) against the columns of
/// the `d × r` matrix `m`, giving a tensor whose `mode` dimension is `d`.
pub fn mode_product(t: &DenseTensor, m: &DMatrix<f64>, mode: usize) -> Result<DenseTensor> {
    if mode >= t.order() {
        return Err(Error::Shape {
            mode,
            msg: format!("tensor has order {}", t.order()),
        });
    }
    if m.ncols() != t.dims[mode] {
        return Err(Error::Shape {
            mode,
            msg: format!("matrix has {} columns but tensor dimension is {}", m.ncols(), t.dims[mode]),
        });
    }
    let (left, r, right) = split_dims(&t.dims, mode);
    let d = m.nrows();
    let mut out = vec![0.0; left * d * right];
    for l in 0..left {
        let src = &t.values[l * r * right..(l + 1) * r * right];
        let dst = &mut out[l * d * right..(l + 1) * d * right];
        for a in 0..d {
            let row = &mut dst[a * right..(a + 1) * right];
            for b in 0..r {
                let w = m[(a, b)];
                if w == 0.0 {
                    continue;
                }
                let s = &src[b * right..(b + 1) * right];
                for (o, v) in row.iter_mut().zip(s) {
                    *o += w * v;
                }
            }
        }
    }
    let mut dims = t.dims.clone();
    dims[mode] = d;
    Ok(DenseTensor { dims, values: out })
}

/// `t ×_mode mᵀ` without materializing the transpose.
pub fn mode_product_transpose(t: &DenseTensor, m: &DMatrix<f64>, mode: usize) -> Result<DenseTensor> {
    if mode >= t.order() || m.nrows() != t.dims[mode] {
        return Err(Error::Shape {
            mode,
            msg: format!("matrix has {} rows but tensor dimension is {}", m.nrows(), t.dims.get(mode).copied().unwrap_or(0)),
        });
    }
    let (left, d, right) = split_dims(&t.dims, mode);
    let r = m.ncols();
    let mut out = vec![0.0; left * r * right];
    for l in 0..left {
        let src = &t.values[l * d * right..(l + 1) * d * right];
        let dst = &mut out[l * r * right..(l + 1) * r * right];
        for a in 0..d {
            let s = &src[a * right..(a + 1) * right];
            for b in 0..r {
                let w = m[(a, b)];
                if w == 0.0 {
                    continue;
                }
                let row = &mut dst[b * right..(b + 1) * right];
                for (o, v) in row.iter_mut().zip(s) {
                    *o += w * v;
                }
            }
        }
    }
    let mut dims = t.dims.clone();
    dims[mode] = r;
    Ok(DenseTensor { dims, values: out })
}

/// Contracts `mode` against the vector `v`, removing that mode (an order-1
/// input yields a length-1 tensor).
pub fn contract(t: &DenseTensor, mode: usize, v: &[f64]) -> DenseTensor {
    let (left, n, right) = split_dims(&t.dims, mode);
    assert_eq!(v.len(), n, "contraction length mismatch in mode {mode}");
    let mut out = vec![0.0; left * right];
    for l in 0..left {
        let dst = &mut out[l * right..(l + 1) * right];
        for (a, &w) in v.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let base = (l * n + a) * right;
            for (o, x) in dst.iter_mut().zip(&t.values[base..base + right]) {
                *o += w * x;
            }
        }
    }
    let mut dims = t.dims.clone();
    dims.remove(mode);
    if dims.is_empty() {
        dims.push(1);
    }
    DenseTensor { dims, values: out }
}

/// Multiplies every mode `j` with `Some(m)` by `m` (as in [`mode_product`]).
pub fn multi_mode_product(t: &DenseTensor, ms: &[Option<&DMatrix<f64>>]) -> DenseTensor {
    let mut out = t.clone();
    for (j, m) in ms.iter().enumerate() {
        if let Some(m) = m {
            out = mode_product(&out, m, j).expect("mode shapes checked by caller");
        }
    }
    out
}

/// Multiplies every mode `j` with `Some(m)` by `mᵀ`.
pub fn multi_mode_product_transpose(t: &DenseTensor, ms: &[Option<&DMatrix<f64>>]) -> DenseTensor {
    let mut out = t.clone();
    for (j, m) in ms.iter().enumerate() {
        if let Some(m) = m {
            out = mode_product_transpose(&out, m, j).expect("mode shapes checked by caller");
        }
    }
    out
}

/// Mode-`mode` unfolding: `d_mode × ∏_{k≠mode} d_k`, remaining indices in
/// their original order with the last varying fastest.
pub fn unfold(t: &DenseTensor, mode: usize) -> Result<DMatrix<f64>> {
    if mode >= t.order() {
        return Err(Error::Shape { mode, msg: format!("tensor has order {}", t.order()) });
    }
    let (left, n, right) = split_dims(&t.dims, mode);
    let mut m = DMatrix::zeros(n, left * right);
    for l in 0..left {
        for a in 0..n {
            let base = (l * n + a) * right;
            for r in 0..right {
                m[(a, l * right + r)] = t.values[base + r];
            }
        }
    }
    Ok(m)
}

/// Inverse of [`unfold`].
pub fn fold(m: &DMatrix<f64>, mode: usize, dims: &[usize]) -> Result<DenseTensor> {
    if mode >= dims.len() {
        return Err(Error::Shape { mode, msg: format!("order {} target", dims.len()) });
    }
    let (left, n, right) = split_dims(dims, mode);
    if m.nrows() != n || m.ncols() != left * right {
        return Err(Error::Shape {
            mode,
            msg: format!("unfolding is {}x{}, expected {}x{}", m.nrows(), m.ncols(), n, left * right),
        });
    }
    let mut values = vec![0.0; left * n * right];
    for l in 0..left {
        for a in 0..n {
            let base = (l * n + a) * right;
            for r in 0..right {
                values[base + r] = m[(a, l * right + r)];
            }
        }
    }
    DenseTensor::new(dims.to_vec(), values)
}

pub fn frobenius(t: &DenseTensor) -> f64 {
    t.values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sup_norm(t: &DenseTensor) -> f64 {
    t.values.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Relative Frobenius distance `‖a − b‖ / max(‖b‖, tiny)`.
pub fn relative_frobenius(a: &DenseTensor, b: &DenseTensor) -> f64 {
    assert_eq!(a.dims, b.dims);
    let num: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    num / frobenius(b).max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainKind {
    Spatial,
    Temporal,
    Group,
    Spline,
}

/// Per-mode factor matrix (`d × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct ModeMatrix {
    pub entries: DMatrix<f64>,
    pub kind: DomainKind,
    pub semi_orthogonal: bool,
}

impl ModeMatrix {
    pub fn new(entries: DMatrix<f64>, kind: DomainKind) -> Self {
        Self { entries, kind, semi_orthogonal: false }
    }

    /// Builds a mode matrix and asserts semi-orthogonality.
    pub fn semi_orthogonal(entries: DMatrix<f64>, kind: DomainKind) -> Result<Self> {
        let dev = orthogonality_defect(&entries);
        if dev > SEMI_ORTHOGONAL_TOLERANCE {
            return Err(Error::Constraint(format!(
                "mode matrix is not semi-orthogonal (relative off-diagonal {dev:e})"
            )));
        }
        Ok(Self { entries, kind, semi_orthogonal: true })
    }

    pub fn rows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn rank(&self) -> usize {
        self.entries.ncols()
    }
}

/// Largest off-diagonal magnitude of `AᵀA` relative to its largest diagonal.
pub fn orthogonality_defect(a: &DMatrix<f64>) -> f64 {
    let g = a.transpose() * a;
    let dmax = (0..g.nrows()).map(|i| g[(i, i)].abs()).fold(0.0, f64::max);
    if dmax == 0.0 {
        return 0.0;
    }
    let mut off = 0.0f64;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            if i != j {
                off = off.max(g[(i, j)].abs());
            }
        }
    }
    off / dmax
}

/// Numerical column rank by column-pivoted QR: pivot `k` accepted when
/// `|R_kk| > RANK_TOLERANCE · |R_11|`.
pub fn numerical_rank(a: &DMatrix<f64>) -> usize {
    if a.ncols() == 0 || a.nrows() == 0 {
        return 0;
    }
    let r = a.clone().col_piv_qr().r();
    let lead = r[(0, 0)].abs();
    if lead == 0.0 {
        return 0;
    }
    (0..r.nrows().min(r.ncols())).filter(|&k| r[(k, k)].abs() > RANK_TOLERANCE * lead).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuckerFactor {
    pub core: DenseTensor,
    pub modes: Vec<ModeMatrix>,
}

impl TuckerFactor {
    pub fn new(core: DenseTensor, modes: Vec<ModeMatrix>) -> Result<Self> {
        let f = Self { core, modes };
        f.check()?;
        Ok(f)
    }

    fn check(&self) -> Result<()> {
        if self.modes.len() != self.core.order() {
            return Err(Error::Dims(format!(
                "{} mode matrices for a core of order {}",
                self.modes.len(),
                self.core.order()
            )));
        }
        for (j, m) in self.modes.iter().enumerate() {
            if m.rank() != self.core.dims()[j] {
                return Err(Error::Shape {
                    mode: j,
                    msg: format!("mode has {} columns, core dimension is {}", m.rank(), self.core.dims()[j]),
                });
            }
        }
        Ok(())
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.rows()).collect()
    }
}

/// `η ×₁ A⁽¹⁾ ⋯ ×ₚ A⁽ᵖ⁾`.
pub fn reconstruct(f: &TuckerFactor) -> Result<DenseTensor> {
    f.check()?;
    let mut t = f.core.clone();
    for (j, m) in f.modes.iter().enumerate() {
        t = mode_product(&t, &m.entries, j)?;
    }
    Ok(t)
}

/// Converts a Tucker factorization into an equivalent compact HOSVD: each
/// mode is replaced by the Q factor of its thin QR decomposition and the core
/// absorbs the R factors. Diagonals of R are made nonnegative.
pub fn tucker_to_hosvd(f: &TuckerFactor) -> Result<TuckerFactor> {
    f.check()?;
    let mut core = f.core.clone();
    let mut modes = Vec::with_capacity(f.modes.len());
    for (j, m) in f.modes.iter().enumerate() {
        let a = &m.entries;
        let rank = numerical_rank(a);
        if rank < a.ncols() || a.ncols() > a.nrows() {
            return Err(Error::RankDeficient { mode: j, rank, cols: a.ncols() });
        }
        let qr = a.clone().qr();
        let mut q = qr.q();
        let mut r = qr.r();
        for k in 0..r.nrows() {
            if r[(k, k)] < 0.0 {
                q.column_mut(k).neg_mut();
                r.row_mut(k).neg_mut();
            }
        }
        core = mode_product(&core, &r, j)?;
        modes.push(ModeMatrix::semi_orthogonal(q, m.kind)?);
    }
    TuckerFactor::new(core, modes)
}

/// Rank-`r` CP factorization `Σ_z w_z a_z⁽¹⁾ ∘ ⋯ ∘ a_z⁽ᵖ⁾`.
#[derive(Debug, Clone, PartialEq)]
pub struct CpFactor {
    pub weights: Vec<f64>,
    pub modes: Vec<DMatrix<f64>>,
}

impl CpFactor {
    pub fn rank(&self) -> usize {
        self.weights.len()
    }

    /// Superdiagonal-core Tucker embedding.
    pub fn as_tucker(&self) -> Result<TuckerFactor> {
        let r = self.rank();
        for (j, m) in self.modes.iter().enumerate() {
            if m.ncols() != r {
                return Err(Error::Shape { mode: j, msg: format!("expected {r} columns, found {}", m.ncols()) });
            }
        }
        let p = self.modes.len();
        let mut core = DenseTensor::zeros(&vec![r; p]);
        for (z, &w) in self.weights.iter().enumerate() {
            core.set(&vec![z; p], w);
        }
        let modes = self.modes.iter().map(|m| ModeMatrix::new(m.clone(), DomainKind::Spatial)).collect();
        TuckerFactor::new(core, modes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(dims: &[usize], rng: &mut impl Rng) -> DenseTensor {
        DenseTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn random_matrix(r: usize, c: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_mode_product_is_noop() {
        let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = mode_product(&t, &DMatrix::identity(2, 2), 0).unwrap();
        assert_eq!(out, t);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = random_tensor(&[2, 3, 4], &mut rng);
        let mut u = t.clone();
        for j in 0..3 {
            u = mode_product(&u, &DMatrix::identity(t.dims()[j], t.dims()[j]), j).unwrap();
        }
        assert_eq!(u.values(), t.values());
    }

    #[test]
    fn mode_product_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = random_tensor(&[3, 3], &mut rng);
        let m = DMatrix::identity(3, 3) * 2.0;
        let out = mode_product(&t, &m, 1).unwrap();
        for a in 0..3 {
            for b in 0..3 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += t.get(&[a, k]) * m[(b, k)];
                }
                assert_eq!(out.get(&[a, b]), s);
                assert_eq!(out.get(&[a, b]), 2.0 * t.get(&[a, b]));
            }
        }
    }

    #[test]
    fn mode_product_shape_error_names_mode() {
        let t = DenseTensor::zeros(&[2, 3]);
        let err = mode_product(&t, &DMatrix::zeros(4, 2), 1).unwrap_err();
        assert!(matches!(err, Error::Shape { mode: 1, .. }));
    }

    #[test]
    fn transpose_product_agrees() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = random_tensor(&[4, 5, 3], &mut rng);
        let m = random_matrix(5, 2, &mut rng);
        let a = mode_product_transpose(&t, &m, 1).unwrap();
        let b = mode_product(&t, &m.transpose(), 1).unwrap();
        assert!(relative_frobenius(&a, &b) < 1e-14);
    }

    #[test]
    fn unfold_fold_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_tensor(&[3, 4, 5], &mut rng);
        for j in 0..3 {
            let m = unfold(&t, j).unwrap();
            assert_eq!(m.nrows(), t.dims()[j]);
            assert_eq!(fold(&m, j, t.dims()).unwrap(), t);
        }
        // last-mode unfolding is a reshape of the storage
        let m = unfold(&t, 2).unwrap();
        assert_eq!(m[(1, 0)], t.values()[1]);
    }

    #[test]
    fn norms_and_kronecker() {
        assert_eq!(frobenius(&DenseTensor::zeros(&[3, 2])), 0.0);
        assert_eq!(kronecker(&DMatrix::identity(2, 2), &DMatrix::identity(3, 3)), DMatrix::identity(6, 6));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(3, 2, &mut rng);
        let b = random_matrix(4, 2, &mut rng);
        let k = kronecker(&a, &b);
        assert!((k.norm() - a.norm() * b.norm()).abs() < 1e-12);
        let t = DenseTensor::new(vec![3], vec![1.0, -4.0, 2.0]).unwrap();
        assert_eq!(sup_norm(&t), 4.0);
    }

    #[test]
    fn rank_one_indicator() {
        let core = DenseTensor::filled(&[1, 1, 1], 1.0);
        let e = |d: usize, k: usize| {
            let mut m = DMatrix::zeros(d, 1);
            m[(k, 0)] = 1.0;
            ModeMatrix::new(m, DomainKind::Spatial)
        };
        let f = TuckerFactor::new(core, vec![e(3, 0), e(2, 1), e(4, 3)]).unwrap();
        let t = reconstruct(&f).unwrap();
        for (o, v) in t.values().iter().enumerate() {
            let expect = if o == t.offset(&[0, 1, 3]) { 1.0 } else { 0.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn hosvd_rejects_duplicated_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut a = random_matrix(6, 3, &mut rng);
        let c0 = a.column(0).into_owned();
        a.set_column(2, &c0);
        let f = TuckerFactor::new(
            random_tensor(&[3, 2], &mut rng),
            vec![
                ModeMatrix::new(a, DomainKind::Spatial),
                ModeMatrix::new(random_matrix(5, 2, &mut rng), DomainKind::Spatial),
            ],
        )
        .unwrap();
        match tucker_to_hosvd(&f) {
            Err(Error::RankDeficient { mode: 0, rank: 2, cols: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn hosvd_of_orthogonal_input_is_stable() {
        let q = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        let core = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let f = TuckerFactor::new(
            core,
            vec![ModeMatrix::new(q.clone(), DomainKind::Spatial), ModeMatrix::new(q, DomainKind::Spatial)],
        )
        .unwrap();
        let h = tucker_to_hosvd(&f).unwrap();
        assert!(relative_frobenius(&reconstruct(&h).unwrap(), &reconstruct(&f).unwrap()) < 1e-14);
        assert!(h.modes.iter().all(|m| orthogonality_defect(&m.entries) < 1e-14));
    }

    #[test]
    fn slab_edits() {
        let t = DenseTensor::from_fn(&[2, 3, 2], |i| (i[0] * 100 + i[1] * 10 + i[2]) as f64);
        let r = t.remove_index(1, 1);
        assert_eq!(r.dims(), &[2, 2, 2]);
        assert_eq!(r.get(&[1, 1, 1]), 121.0);
        let a = r.append_index(1, |_| -1.0);
        assert_eq!(a.dims(), &[2, 3, 2]);
        assert_eq!(a.get(&[0, 2, 1]), -1.0);
        assert_eq!(t.slice(0, 1).get(&[2, 1]), 121.0);
    }
}

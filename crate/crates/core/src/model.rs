//! Model state and forward evaluation of baseline (`α`) and time-varying (`β`)
//! surfaces, the marginal latent-factor moments and covariance tensors.
//!
//! Mode order inside a component is `[group, x, y, z]` for `α` and
//! `[group, x, y, z, time]` for `β`; cores use the same order.

use nalgebra::{DMatrix, DVector};

use crate::bases::{BasisSet, SplineBasis};
use crate::error::{Error, Result};
use crate::priors::{ShrinkageChain, ShrinkageMode};
use crate::tensor::{self, contract, mode_product, mode_product_transpose, orthogonality_defect, DenseTensor};

pub const GROUP: usize = 0;
pub const TIME: usize = 4;

/// Largest `n·d₁d₂d₃` accepted by [`marginal_moments`].
pub const MARGINAL_LIMIT: usize = 4096;

/// One mode matrix with its CSC-PING parameterization: column `ℓ` equals
/// `∏_k Gᵀγ_{ℓ,k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeState {
    pub basis: BasisSet,
    pub depth: usize,
    /// `coeffs[ℓ][k]`, each of length `m`.
    pub coeffs: Vec<Vec<DVector<f64>>>,
    pub shrink: ShrinkageChain,
    /// `d × r`, kept in sync with `coeffs`.
    pub matrix: DMatrix<f64>,
}

impl ModeState {
    pub fn new(basis: BasisSet, depth: usize, coeffs: Vec<Vec<DVector<f64>>>, shrink: ShrinkageChain) -> Self {
        let d = basis.grid_len();
        let mut m = Self { basis, depth, coeffs, shrink, matrix: DMatrix::zeros(d, 0) };
        m.refresh();
        m
    }

    pub fn rank(&self) -> usize {
        self.coeffs.len()
    }

    pub fn grid_len(&self) -> usize {
        self.basis.grid_len()
    }

    /// `Gᵀγ_{ℓ,k}`.
    pub fn field(&self, l: usize, k: usize) -> DVector<f64> {
        self.basis.g.tr_mul(&self.coeffs[l][k])
    }

    /// Product of every component field of column `ℓ` except `k`.
    pub fn others(&self, l: usize, k: usize) -> DVector<f64> {
        let mut out = DVector::from_element(self.grid_len(), 1.0);
        for j in (0..self.depth).filter(|&j| j != k) {
            out.component_mul_assign(&self.field(l, j));
        }
        out
    }

    pub fn column(&self, l: usize) -> DVector<f64> {
        let mut out = self.field(l, 0);
        for k in 1..self.depth {
            out.component_mul_assign(&self.field(l, k));
        }
        out
    }

    pub fn refresh_column(&mut self, l: usize) {
        let c = self.column(l);
        self.matrix.set_column(l, &c);
    }

    pub fn refresh(&mut self) {
        let d = self.grid_len();
        let r = self.rank();
        self.matrix = DMatrix::zeros(d, r);
        for l in 0..r {
            self.refresh_column(l);
        }
    }

    /// Prior standard deviation multiplier of component `k` of column `ℓ`.
    pub fn component_scale(&self, l: usize, k: usize, mode: ShrinkageMode) -> f64 {
        if k == 0 {
            self.shrink.scale(l, mode)
        } else {
            1.0
        }
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.matrix.tr_mul(&self.matrix)
    }

    /// Drop column `ℓ`; its shrinkage increment is folded into the next one so
    /// the remaining columns keep their scales.
    pub fn remove_column(&mut self, l: usize) {
        self.coeffs.remove(l);
        let inc = self.shrink.increments.remove(l);
        if l < self.shrink.increments.len() {
            self.shrink.increments[l] *= inc;
        }
        self.refresh();
    }
}

/// `α` or `β` block of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub modes: Vec<ModeState>,
    /// One core per subject.
    pub cores: Vec<DenseTensor>,
    pub mean: DenseTensor,
    /// Cell variances `σ²_z`.
    pub cell_var: DenseTensor,
    pub tau2: f64,
    /// Prior variance of the mean-core cells.
    pub mean_var: f64,
}

impl Component {
    pub fn ranks(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.rank()).collect()
    }

    pub fn is_temporal(&self) -> bool {
        self.modes.len() == 5
    }

    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        self.modes.iter().map(|m| m.matrix.clone()).collect()
    }

    pub fn n_cells(&self) -> usize {
        self.mean.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        let ranks = self.ranks();
        for t in self.cores.iter().chain([&self.mean, &self.cell_var]) {
            if t.dims() != ranks.as_slice() {
                return Err(Error::Dims(format!("core dims {:?} do not match ranks {:?}", t.dims(), ranks)));
            }
        }
        Ok(())
    }
}

/// Full parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub alpha: Component,
    pub beta: Component,
    pub sigma2: f64,
    pub spline: SplineBasis,
    /// Zero-based group of each subject.
    pub groups: Vec<usize>,
}

/// Which core to evaluate with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Mean,
    Subject(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Alpha,
    Beta,
}

impl ModelState {
    pub fn component(&self, w: Which) -> &Component {
        match w {
            Which::Alpha => &self.alpha,
            Which::Beta => &self.beta,
        }
    }

    pub fn component_mut(&mut self, w: Which) -> &mut Component {
        match w {
            Which::Alpha => &mut self.alpha,
            Which::Beta => &mut self.beta,
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        [1, 2, 3].map(|s| self.alpha.modes[s].grid_len())
    }

    pub fn n_groups(&self) -> usize {
        self.alpha.modes[GROUP].grid_len()
    }

    pub fn n_subjects(&self) -> usize {
        self.groups.len()
    }

    fn core(&self, w: Which, target: Target) -> Result<&DenseTensor> {
        let c = self.component(w);
        match target {
            Target::Mean => Ok(&c.mean),
            Target::Subject(i) => c.cores.get(i).ok_or_else(|| Error::Lookup(format!("no subject with index {i}"))),
        }
    }

    fn check_group(&self, h_g: usize) -> Result<()> {
        if h_g >= self.n_groups() {
            return Err(Error::Lookup(format!("group {} outside 1..={}", h_g + 1, self.n_groups())));
        }
        Ok(())
    }

    /// Largest semi-orthogonality defect over all modes, and the largest
    /// `|β(·, 0)|` over groups for the mean and every subject.
    pub fn invariant_defects(&self) -> (f64, f64) {
        let mut orth: f64 = 0.0;
        for c in [&self.alpha, &self.beta] {
            for m in &c.modes {
                orth = orth.max(orthogonality_defect(&m.matrix));
            }
        }
        let mut sep: f64 = 0.0;
        for h in 0..self.n_groups() {
            let targets = std::iter::once(Target::Mean).chain((0..self.n_subjects()).map(Target::Subject));
            for tg in targets {
                let b = eval_beta(self, tg, h, 0.0).expect("valid indices");
                sep = sep.max(tensor::sup_norm(&b));
            }
        }
        (orth, sep)
    }
}

/// `core ×_g a_g(h)` restricted to the spatial modes (and time if present).
pub fn group_slice(core: &DenseTensor, group_mode: &DMatrix<f64>, h_g: usize) -> DenseTensor {
    let row: Vec<f64> = group_mode.row(h_g).iter().copied().collect();
    contract(core, GROUP, &row)
}

/// `r ×₁ A₁ ×₂ A₂ ×₃ A₃` for a 3-way tensor.
pub fn spatial_expand(r: &DenseTensor, modes: [&DMatrix<f64>; 3]) -> DenseTensor {
    let mut t = r.clone();
    for (j, m) in modes.iter().enumerate() {
        t = mode_product(&t, m, j).expect("spatial mode shapes");
    }
    t
}

/// `x ×₁ A₁ᵀ ×₂ A₂ᵀ ×₃ A₃ᵀ` for a 3-way tensor.
pub fn spatial_project(x: &DenseTensor, modes: [&DMatrix<f64>; 3]) -> DenseTensor {
    let mut t = x.clone();
    for (j, m) in modes.iter().enumerate() {
        t = mode_product_transpose(&t, m, j).expect("spatial mode shapes");
    }
    t
}

/// Temporal weights `b(t)ᵀ A_t` (length `r_t`).
pub fn temporal_weights(spline: &SplineBasis, time_mode: &DMatrix<f64>, t: f64) -> Result<Vec<f64>> {
    let b = spline.eval(t)?;
    Ok((time_mode.transpose() * b).iter().copied().collect())
}

/// Baseline surface from a core and `[group, x, y, z]` mode matrices.
pub fn alpha_surface(core: &DenseTensor, modes: &[DMatrix<f64>], h_g: usize) -> DenseTensor {
    let r = group_slice(core, &modes[GROUP], h_g);
    spatial_expand(&r, [&modes[1], &modes[2], &modes[3]])
}

fn beta_with_weights(core: &DenseTensor, modes: &[DMatrix<f64>], h_g: usize, w: &[f64]) -> DenseTensor {
    let r = group_slice(core, &modes[GROUP], h_g);
    let r = contract(&r, 3, w);
    spatial_expand(&r, [&modes[1], &modes[2], &modes[3]])
}

/// Time-varying surface at `t` from a core and `[group, x, y, z, time]` modes
/// (time mode with `d_t` rows).
pub fn beta_surface(core: &DenseTensor, modes: &[DMatrix<f64>], spline: &SplineBasis, h_g: usize, t: f64) -> Result<DenseTensor> {
    let w = temporal_weights(spline, &modes[TIME], t)?;
    Ok(beta_with_weights(core, modes, h_g, &w))
}

/// `∂β/∂t` at `t`, using the analytic spline derivative.
pub fn beta_derivative_surface(
    core: &DenseTensor,
    modes: &[DMatrix<f64>],
    spline: &SplineBasis,
    h_g: usize,
    t: f64,
) -> Result<DenseTensor> {
    let db = spline.derivative(t)?;
    let w: Vec<f64> = (modes[TIME].transpose() * db).iter().copied().collect();
    Ok(beta_with_weights(core, modes, h_g, &w))
}

pub fn eval_alpha(state: &ModelState, target: Target, h_g: usize) -> Result<DenseTensor> {
    state.check_group(h_g)?;
    let core = state.core(Which::Alpha, target)?;
    Ok(alpha_surface(core, &state.alpha.matrices(), h_g))
}

pub fn eval_beta(state: &ModelState, target: Target, h_g: usize, t: f64) -> Result<DenseTensor> {
    state.check_group(h_g)?;
    let core = state.core(Which::Beta, target)?;
    beta_surface(core, &state.beta.matrices(), &state.spline, h_g, t)
}

/// Projected residual cells of subject `i` observed as `y` at time `t`:
/// the other component is removed, the rest is projected on the spatial
/// columns of `which`, the fitted core slice `η̃·∏δ` is subtracted and each
/// cell is divided by `√∏δ`, with `δ` the squared column norms. Under the
/// model these cells are iid `N(0, σ_ε²)` when the spatial columns are
/// orthogonal.
pub fn principal_residuals(state: &ModelState, which: Which, i: usize, y: &DenseTensor, t: f64) -> Result<DenseTensor> {
    let h_g = *state.groups.get(i).ok_or_else(|| Error::Lookup(format!("no subject with index {i}")))?;
    if y.dims() != state.grid() {
        return Err(Error::Dims(format!("observation dims {:?}, grid {:?}", y.dims(), state.grid())));
    }
    let mut r = y.clone();
    let comp = state.component(which);
    let core = state.core(which, Target::Subject(i))?;
    let mut slice = group_slice(core, &comp.modes[GROUP].matrix, h_g);
    match which {
        Which::Alpha => r.axpy(-1.0, &eval_beta(state, Target::Subject(i), h_g, t)?),
        Which::Beta => {
            r.axpy(-1.0, &eval_alpha(state, Target::Subject(i), h_g)?);
            slice = contract(&slice, 3, &temporal_weights(&state.spline, &comp.modes[TIME].matrix, t)?);
        }
    }
    let m = [&comp.modes[1].matrix, &comp.modes[2].matrix, &comp.modes[3].matrix];
    let delta: Vec<Vec<f64>> = m.iter().map(|a| a.column_iter().map(|c| c.norm_squared()).collect()).collect();
    let proj = spatial_project(&r, m);
    Ok(DenseTensor::from_fn(proj.dims(), |z| {
        let d = delta[0][z[0]] * delta[1][z[1]] * delta[2][z[2]];
        (proj.get(z) - slice.get(z) * d) / d.sqrt()
    }))
}

fn loadings(modes: &[DMatrix<f64>], h_g: usize, temporal: Option<&[f64]>) -> DMatrix<f64> {
    let g = DMatrix::from_row_slice(1, modes[GROUP].ncols(), &modes[GROUP].row(h_g).iter().copied().collect::<Vec<_>>());
    let mut l = g.kronecker(&modes[1]).kronecker(&modes[2]).kronecker(&modes[3]);
    if let Some(w) = temporal {
        l = l.kronecker(&DMatrix::from_row_slice(1, w.len(), w));
    }
    l
}

/// Mean and covariance of one subject's stacked observations (time-major,
/// voxels fastest) in group `h_g` at the given times, with the random cores
/// integrated out: `Λ_α diag(τ_α²Σ_α) Λ_αᵀ + Λ_β(t) diag(τ_β²Σ_β) Λ_β(t′)ᵀ + σ_ε² I`.
pub fn marginal_moments(state: &ModelState, h_g: usize, times: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    state.check_group(h_g)?;
    let v: usize = state.grid().iter().product();
    let n = times.len();
    if n * v > MARGINAL_LIMIT {
        return Err(Error::Capability(format!("marginal moments limited to {MARGINAL_LIMIT} entries, requested {}", n * v)));
    }
    let am = state.alpha.matrices();
    let bm = state.beta.matrices();
    let la = loadings(&am, h_g, None);
    let da = DVector::from_iterator(state.alpha.n_cells(), state.alpha.cell_var.values().iter().map(|s| s * state.alpha.tau2));
    let cov_a = &la * DMatrix::from_diagonal(&da) * la.transpose();
    let db = DVector::from_iterator(state.beta.n_cells(), state.beta.cell_var.values().iter().map(|s| s * state.beta.tau2));
    let mut lbs = Vec::with_capacity(n);
    let mut mean = DVector::zeros(n * v);
    let alpha = eval_alpha(state, Target::Mean, h_g)?;
    for (j, &t) in times.iter().enumerate() {
        let w = temporal_weights(&state.spline, &bm[TIME], t)?;
        lbs.push(loadings(&bm, h_g, Some(&w)));
        let beta = eval_beta(state, Target::Mean, h_g, t)?;
        for k in 0..v {
            mean[j * v + k] = alpha.values()[k] + beta.values()[k];
        }
    }
    let mut cov = DMatrix::zeros(n * v, n * v);
    for j in 0..n {
        for jp in 0..n {
            let mut block = cov_a.clone() + &lbs[j] * DMatrix::from_diagonal(&db) * lbs[jp].transpose();
            if j == jp {
                for k in 0..v {
                    block[(k, k)] += state.sigma2;
                }
            }
            cov.view_mut((j * v, jp * v), (v, v)).copy_from(&block);
        }
    }
    Ok((mean, cov))
}

/// Location in the group × voxel × time domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub group: usize,
    pub voxel: [usize; 3],
    pub time: f64,
}

/// Covariance of the subject-level `α` (time ignored) or `β` surfaces at two
/// points of the same group.
pub fn covariance_tensor(state: &ModelState, which: Which, p: Point, q: Point) -> Result<f64> {
    if p.group != q.group {
        return Err(Error::Domain { value: q.group as f64, domain: "same group as the first point" });
    }
    state.check_group(p.group)?;
    let comp = state.component(which);
    let m = comp.matrices();
    let wp = match which {
        Which::Beta => Some((temporal_weights(&state.spline, &m[TIME], p.time)?, temporal_weights(&state.spline, &m[TIME], q.time)?)),
        Which::Alpha => None,
    };
    let ranks = comp.ranks();
    let mut idx = vec![0usize; ranks.len()];
    let mut total = 0.0;
    loop {
        let mut f = m[GROUP][(p.group, idx[0])] * m[GROUP][(q.group, idx[0])];
        for s in 1..4 {
            f *= m[s][(p.voxel[s - 1], idx[s])] * m[s][(q.voxel[s - 1], idx[s])];
        }
        if let Some((a, b)) = &wp {
            f *= a[idx[TIME]] * b[idx[TIME]];
        }
        total += f * comp.cell_var.get(&idx) * comp.tau2;
        if !tensor::increment(&mut idx, &ranks) {
            break;
        }
    }
    Ok(total)
}

/// Per-subject cores `η⁽ⁱ⁾ = η₀ ×_N a_N(i)` implied by a factorization of the
/// subject-stacked tensor with subject mode `A_N` (`N × r_N`) and shared core
/// `η₀` whose first mode is the subject mode.
pub fn stacked_core_equivalence_check(subject_mode: &DMatrix<f64>, shared_core: &DenseTensor) -> Result<Vec<DenseTensor>> {
    if shared_core.dims()[0] != subject_mode.ncols() {
        return Err(Error::Shape {
            mode: 0,
            msg: format!("subject mode has {} columns, core has {}", subject_mode.ncols(), shared_core.dims()[0]),
        });
    }
    Ok((0..subject_mode.nrows())
        .map(|i| contract(shared_core, 0, &subject_mode.row(i).iter().copied().collect::<Vec<_>>()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bases::{build_identity_bases, SplineBasis};
    use crate::priors::ShrinkageChain;

    fn fixed_mode(entries: DMatrix<f64>) -> ModeState {
        let d = entries.nrows();
        let r = entries.ncols();
        let coeffs = (0..r).map(|l| vec![entries.column(l).into_owned()]).collect();
        ModeState::new(build_identity_bases(d), 1, coeffs, ShrinkageChain { increments: vec![1.0; r] })
    }

    #[test]
    fn rank_one_alpha_is_outer_product() {
        let a = |d: usize| DMatrix::from_fn(d, 1, |i, _| 1.0 + i as f64);
        let comp = Component {
            modes: vec![fixed_mode(a(2)), fixed_mode(a(3)), fixed_mode(a(3)), fixed_mode(a(2))],
            cores: vec![DenseTensor::filled(&[1, 1, 1, 1], 1.0)],
            mean: DenseTensor::filled(&[1, 1, 1, 1], 1.0),
            cell_var: DenseTensor::filled(&[1, 1, 1, 1], 1.0),
            tau2: 1.0,
            mean_var: 1.0,
        };
        let out = alpha_surface(&comp.mean, &comp.matrices(), 1);
        assert_eq!(out.get(&[2, 1, 0]), 2.0 * 3.0 * 2.0 * 1.0);
    }

    #[test]
    fn stacking_identity_keeps_core() {
        let core = DenseTensor::from_fn(&[1, 2, 2], |i| (i[1] * 2 + i[2]) as f64);
        let out = stacked_core_equivalence_check(&DMatrix::identity(1, 1), &core).unwrap();
        assert_eq!(out[0].values(), core.slice(0, 0).values());
        let _ = SplineBasis::quadratic(4).unwrap();
    }
}

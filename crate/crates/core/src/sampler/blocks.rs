//! Full conditionals of every Gaussian block, in canonical form.
//!
//! Given the other component, each subject's log-likelihood in one component
//! reads `σ⁻²[Σ_k ⟨S_k, P_k⟩ − ½ Σ_kk′ W_kk′ ⟨P_k, P_k′⟩]`, where `P_k` are the
//! component's spatial tensors (`K = 1` for `α`, `K = r_t` for `β`). The
//! builders below turn that into normal equations for each block.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::bases::BasisSet;
use crate::model::{alpha_surface, group_slice, spatial_expand, spatial_project, Component, ModeState, ModelState, Which, GROUP, TIME};
use crate::priors::{CanonicalGaussian, ShrinkageMode};
use crate::tensor::{multi_mode_product, multi_mode_product_transpose, unfold, DenseTensor};

use super::stats::Problem;

/// Per-subject signal tensors `S_k` and weights `W`.
#[derive(Debug, Clone)]
pub struct Targets {
    pub weights: Vec<DMatrix<f64>>,
    pub signals: Vec<Vec<DenseTensor>>,
}

/// Group-contracted cores `R_k = (η ×_g a_g(h))[…, k]`, one 3-way tensor per `k`.
pub fn reduced_cores(comp: &Component, core: &DenseTensor, group: usize) -> Vec<DenseTensor> {
    let r = group_slice(core, &comp.modes[GROUP].matrix, group);
    if comp.is_temporal() {
        (0..r.dims()[3]).map(|k| r.slice(3, k)).collect()
    } else {
        vec![r]
    }
}

fn spatial_modes(comp: &Component) -> [&DMatrix<f64>; 3] {
    [&comp.modes[1].matrix, &comp.modes[2].matrix, &comp.modes[3].matrix]
}

/// Spatial tensors `P_k` of subject `i`.
pub fn subject_fields(comp: &Component, i: usize, group: usize) -> Vec<DenseTensor> {
    reduced_cores(comp, &comp.cores[i], group).iter().map(|r| spatial_expand(r, spatial_modes(comp))).collect()
}

pub fn subject_alpha(state: &ModelState, i: usize, group: usize) -> DenseTensor {
    alpha_surface(&state.alpha.cores[i], &state.alpha.matrices(), group)
}

pub fn alpha_targets(state: &ModelState, problem: &Problem) -> Targets {
    let at = &state.beta.modes[TIME].matrix;
    let parts: Vec<(DMatrix<f64>, Vec<DenseTensor>)> = problem
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let fields = subject_fields(&state.beta, i, s.group);
            let wbar = at.tr_mul(&s.bsum);
            let mut sig = s.sum_y.clone();
            for (k, f) in fields.iter().enumerate() {
                sig.axpy(-wbar[k], f);
            }
            (DMatrix::from_element(1, 1, s.n_obs() as f64), vec![sig])
        })
        .collect();
    let (weights, signals) = parts.into_iter().unzip();
    Targets { weights, signals }
}

pub fn beta_targets(state: &ModelState, problem: &Problem) -> Targets {
    let at = &state.beta.modes[TIME].matrix;
    let parts: Vec<(DMatrix<f64>, Vec<DenseTensor>)> = problem
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let alpha = subject_alpha(state, i, s.group);
            let wbar = at.tr_mul(&s.bsum);
            let w = at.transpose() * &s.btb * at;
            let sig = (0..at.ncols())
                .map(|k| {
                    let mut t = DenseTensor::zeros(alpha.dims());
                    for (h, yb) in s.yb.iter().enumerate() {
                        if at[(h, k)] != 0.0 {
                            t.axpy(at[(h, k)], yb);
                        }
                    }
                    t.axpy(-wbar[k], &alpha);
                    t
                })
                .collect();
            (w, sig)
        })
        .collect();
    let (weights, signals) = parts.into_iter().unzip();
    Targets { weights, signals }
}

pub fn targets(state: &ModelState, problem: &Problem, which: Which) -> Targets {
    match which {
        Which::Alpha => alpha_targets(state, problem),
        Which::Beta => beta_targets(state, problem),
    }
}

/// Quadratic and linear coefficients for one mode matrix:
/// log-likelihood `σ⁻²[⟨A, D⟩ − ½ tr(A H Aᵀ)]`.
#[derive(Debug, Clone)]
pub struct SpatialSystem {
    pub h: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

/// Normal equations for spatial mode `s ∈ {1, 2, 3}`.
pub fn spatial_system(comp: &Component, targets: &Targets, groups: &[usize], s: usize) -> SpatialSystem {
    let j = s - 1;
    let mats = spatial_modes(comp);
    let grams: Vec<DMatrix<f64>> = mats.iter().map(|m| m.tr_mul(m)).collect();
    let gram_ops: Vec<Option<&DMatrix<f64>>> = (0..3).map(|q| if q == j { None } else { Some(&grams[q]) }).collect();
    let proj_ops: Vec<Option<&DMatrix<f64>>> = (0..3).map(|q| if q == j { None } else { Some(mats[q]) }).collect();
    let r = comp.modes[s].rank();
    let d = comp.modes[s].grid_len();
    let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..groups.len())
        .into_par_iter()
        .map(|i| {
            let rs = reduced_cores(comp, &comp.cores[i], groups[i]);
            let ru: Vec<DMatrix<f64>> = rs.iter().map(|x| unfold(x, j).expect("order 3")).collect();
            let tu: Vec<DMatrix<f64>> =
                rs.iter().map(|x| unfold(&multi_mode_product(x, &gram_ops), j).expect("order 3")).collect();
            let w = &targets.weights[i];
            let mut h = DMatrix::zeros(r, r);
            let mut dm = DMatrix::zeros(d, r);
            for k in 0..rs.len() {
                for kp in 0..rs.len() {
                    if w[(k, kp)] != 0.0 {
                        h += w[(k, kp)] * &tu[k] * ru[kp].transpose();
                    }
                }
                let p = unfold(&multi_mode_product_transpose(&targets.signals[i][k], &proj_ops), j).expect("order 3");
                dm += p * ru[k].transpose();
            }
            (h, dm)
        })
        .collect();
    let mut h = DMatrix::zeros(r, r);
    let mut dm = DMatrix::zeros(d, r);
    for (hi, di) in parts {
        h += hi;
        dm += di;
    }
    h = (&h + h.transpose()) * 0.5;
    SpatialSystem { h, d: dm }
}

/// `(Q, b)` such that the log-likelihood in column `ℓ` is `σ⁻²[aᵀb − ½aᵀQa]`.
pub fn spatial_column(mode: &ModeState, sys: &SpatialSystem, l: usize) -> (DMatrix<f64>, DVector<f64>) {
    let d = mode.grid_len();
    let q = DMatrix::identity(d, d) * sys.h[(l, l)];
    let mut b = sys.d.column(l).into_owned();
    for lp in (0..mode.rank()).filter(|&lp| lp != l) {
        b.axpy(-sys.h[(lp, l)], &mode.matrix.column(lp), 1.0);
    }
    (q, b)
}

/// Per-group quadratic (`r_g × r_g`) and linear (`r_g`) terms for the group mode.
#[derive(Debug, Clone)]
pub struct GroupSystem {
    pub h: Vec<DMatrix<f64>>,
    pub d: Vec<DVector<f64>>,
}

fn group_slices(comp: &Component, core: &DenseTensor, zg: usize) -> Vec<DenseTensor> {
    let x = core.slice(GROUP, zg);
    if comp.is_temporal() {
        (0..x.dims()[3]).map(|k| x.slice(3, k)).collect()
    } else {
        vec![x]
    }
}

pub fn group_system(comp: &Component, targets: &Targets, groups: &[usize], n_groups: usize) -> GroupSystem {
    let mats = spatial_modes(comp);
    let grams: Vec<DMatrix<f64>> = mats.iter().map(|m| m.tr_mul(m)).collect();
    let gram_ops: Vec<Option<&DMatrix<f64>>> = grams.iter().map(Some).collect();
    let rg = comp.modes[GROUP].rank();
    let parts: Vec<(DMatrix<f64>, DVector<f64>)> = (0..groups.len())
        .into_par_iter()
        .map(|i| {
            let xs: Vec<Vec<DenseTensor>> = (0..rg).map(|zg| group_slices(comp, &comp.cores[i], zg)).collect();
            let ys: Vec<Vec<DenseTensor>> =
                xs.iter().map(|v| v.iter().map(|x| multi_mode_product(x, &gram_ops)).collect()).collect();
            let proj: Vec<DenseTensor> = targets.signals[i].iter().map(|s| spatial_project(s, mats)).collect();
            let w = &targets.weights[i];
            let kk = proj.len();
            let mut h = DMatrix::zeros(rg, rg);
            let mut dv = DVector::zeros(rg);
            for zg in 0..rg {
                for k in 0..kk {
                    dv[zg] += proj[k].dot(&xs[zg][k]);
                    for zgp in 0..rg {
                        for kp in 0..kk {
                            if w[(k, kp)] != 0.0 {
                                h[(zg, zgp)] += w[(k, kp)] * ys[zg][k].dot(&xs[zgp][kp]);
                            }
                        }
                    }
                }
            }
            (h, dv)
        })
        .collect();
    let mut h = vec![DMatrix::zeros(rg, rg); n_groups];
    let mut d = vec![DVector::zeros(rg); n_groups];
    for (i, (hi, di)) in parts.into_iter().enumerate() {
        h[groups[i]] += hi;
        d[groups[i]] += di;
    }
    for m in h.iter_mut() {
        *m = (&*m + m.transpose()) * 0.5;
    }
    GroupSystem { h, d }
}

pub fn group_column(mode: &ModeState, sys: &GroupSystem, l: usize) -> (DMatrix<f64>, DVector<f64>) {
    let dg = mode.grid_len();
    let q = DMatrix::from_diagonal(&DVector::from_fn(dg, |h, _| sys.h[h][(l, l)]));
    let b = DVector::from_fn(dg, |h, _| {
        let mut v = sys.d[h][l];
        for lp in (0..mode.rank()).filter(|&lp| lp != l) {
            v -= sys.h[h][(l, lp)] * mode.matrix[(h, lp)];
        }
        v
    });
    (q, b)
}

/// Per-subject inner products for the temporal mode: `G[k,k′] = ⟨P_k, P_k′⟩`
/// and `E[h,k] = ⟨Σ_j B[j,h](y_j − α), P_k⟩`.
#[derive(Debug, Clone)]
pub struct TemporalSystem {
    pub inner: Vec<DMatrix<f64>>,
    pub cross: Vec<DMatrix<f64>>,
}

pub fn temporal_system(state: &ModelState, problem: &Problem) -> TemporalSystem {
    let comp = &state.beta;
    let mats = spatial_modes(comp);
    let grams: Vec<DMatrix<f64>> = mats.iter().map(|m| m.tr_mul(m)).collect();
    let gram_ops: Vec<Option<&DMatrix<f64>>> = grams.iter().map(Some).collect();
    let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = problem
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let rs = reduced_cores(comp, &comp.cores[i], s.group);
            let kk = rs.len();
            let ts: Vec<DenseTensor> = rs.iter().map(|r| multi_mode_product(r, &gram_ops)).collect();
            let inner = DMatrix::from_fn(kk, kk, |k, kp| ts[k].dot(&rs[kp]));
            let alpha = spatial_project(&subject_alpha(state, i, s.group), mats);
            let ar: Vec<f64> = rs.iter().map(|r| alpha.dot(r)).collect();
            let dt = s.yb.len();
            let mut cross = DMatrix::zeros(dt, kk);
            for h in 0..dt {
                let p = spatial_project(&s.yb[h], mats);
                for k in 0..kk {
                    cross[(h, k)] = p.dot(&rs[k]) - s.bsum[h] * ar[k];
                }
            }
            (inner, cross)
        })
        .collect();
    let (inner, cross) = parts.into_iter().unzip();
    TemporalSystem { inner, cross }
}

pub fn temporal_column(mode: &ModeState, sys: &TemporalSystem, problem: &Problem, l: usize) -> (DMatrix<f64>, DVector<f64>) {
    let dt = mode.grid_len();
    let mut q = DMatrix::zeros(dt, dt);
    let mut b = DVector::zeros(dt);
    for (i, s) in problem.subjects.iter().enumerate() {
        q += &s.btb * sys.inner[i][(l, l)];
        b += sys.cross[i].column(l);
        for k in (0..mode.rank()).filter(|&k| k != l) {
            b -= &s.btb * mode.matrix.column(k) * sys.inner[i][(k, l)];
        }
    }
    (q, b)
}

/// Conditional of one PING component's coefficients given the column's
/// log-likelihood `σ⁻²[aᵀb − ½aᵀQa]`, where `a = others ∘ Gᵀγ`, a
/// `N(0, scale²Q_prior)` prior on `γ`, and orthogonality of `a` to the columns
/// of `fixed`.
pub fn column_conditional_with(
    basis: &BasisSet,
    others: &DVector<f64>,
    qmat: &DMatrix<f64>,
    b: &DVector<f64>,
    sigma2: f64,
    scale: f64,
    fixed: &DMatrix<f64>,
) -> CanonicalGaussian {
    // X = G diag(others), so a = Xᵀγ
    let mut x = basis.g.clone();
    for h in 0..x.ncols() {
        x.column_mut(h).scale_mut(others[h]);
    }
    let mut precision = &x * qmat * x.transpose() / sigma2 + &basis.precision / (scale * scale);
    precision = (&precision + precision.transpose()) * 0.5;
    let linear = &x * b / sigma2;
    let constraint = if fixed.ncols() == 0 {
        None
    } else {
        let a = fixed.transpose() * x.transpose();
        let c = DVector::zeros(a.nrows());
        Some((a, c))
    };
    CanonicalGaussian { precision, linear, constraint }
}

/// Mode matrix without column `ℓ`.
pub fn other_columns(mode: &ModeState, l: usize) -> DMatrix<f64> {
    mode.matrix.clone().remove_column(l)
}

pub fn column_conditional(
    mode: &ModeState,
    l: usize,
    k: usize,
    qmat: &DMatrix<f64>,
    b: &DVector<f64>,
    sigma2: f64,
    shrinkage: ShrinkageMode,
) -> CanonicalGaussian {
    column_conditional_with(
        &mode.basis,
        &mode.others(l, k),
        qmat,
        b,
        sigma2,
        mode.component_scale(l, k, shrinkage),
        &other_columns(mode, l),
    )
}

/// Pieces shared by all core blocks of one subject.
#[derive(Debug, Clone)]
pub struct CoreContext {
    /// `S_k ×₁ A₁ᵀ ×₂ A₂ᵀ ×₃ A₃ᵀ`.
    pub proj: Vec<DenseTensor>,
    pub weights: DMatrix<f64>,
    pub group_row: Vec<f64>,
    /// Diagonals of the spatial Gram matrices.
    pub delta: [Vec<f64>; 3],
}

pub fn core_context(comp: &Component, targets: &Targets, i: usize, group: usize) -> CoreContext {
    let mats = spatial_modes(comp);
    let delta = [0, 1, 2].map(|s| mats[s].column_iter().map(|c| c.norm_squared()).collect());
    CoreContext {
        proj: targets.signals[i].iter().map(|s| spatial_project(s, mats)).collect(),
        weights: targets.weights[i].clone(),
        group_row: comp.modes[GROUP].matrix.row(group).iter().copied().collect(),
        delta,
    }
}

fn core_index(comp: &Component, zg: usize, z: [usize; 3], k: usize) -> Vec<usize> {
    let mut idx = vec![zg, z[0], z[1], z[2]];
    if comp.is_temporal() {
        idx.push(k);
    }
    idx
}

/// Joint conditional of the cells `η[z_g, z, k]` (ordered `z_g·K + k`) of one
/// subject's core at spatial cell `z`.
pub fn core_block(comp: &Component, ctx: &CoreContext, z: [usize; 3], sigma2: f64) -> CanonicalGaussian {
    let rg = ctx.group_row.len();
    let kk = ctx.weights.nrows();
    let n = rg * kk;
    let dprod: f64 = (0..3).map(|s| ctx.delta[s][z[s]]).product();
    let mut precision = DMatrix::zeros(n, n);
    let mut linear = DVector::zeros(n);
    for zg in 0..rg {
        for k in 0..kk {
            let r = zg * kk + k;
            for zgp in 0..rg {
                for kp in 0..kk {
                    precision[(r, zgp * kk + kp)] =
                        dprod * ctx.group_row[zg] * ctx.group_row[zgp] * ctx.weights[(k, kp)] / sigma2;
                }
            }
            let idx = core_index(comp, zg, z, k);
            let v = comp.tau2 * comp.cell_var.get(&idx);
            precision[(r, r)] += 1.0 / v;
            linear[r] = ctx.group_row[zg] * ctx.proj[k].get(&z) / sigma2 + comp.mean.get(&idx) / v;
        }
    }
    CanonicalGaussian { precision, linear, constraint: None }
}

/// Writes a block draw back into a core.
pub fn store_core_block(comp: &Component, core: &mut DenseTensor, z: [usize; 3], x: &DVector<f64>) {
    let kk = if comp.is_temporal() { comp.modes[TIME].rank() } else { 1 };
    for zg in 0..comp.modes[GROUP].rank() {
        for k in 0..kk {
            core.set(&core_index(comp, zg, z, k), x[zg * kk + k]);
        }
    }
}

/// Precision and linear term of mean-core cell `idx` given the subject cores.
pub fn mean_core_conditional(comp: &Component, idx: &[usize]) -> (f64, f64) {
    let v = comp.tau2 * comp.cell_var.get(idx);
    let n = comp.cores.len() as f64;
    let sum: f64 = comp.cores.iter().map(|c| c.get(idx)).sum();
    (n / v + 1.0 / comp.mean_var, sum / v)
}

/// Spatial rank triple of a component.
pub fn spatial_ranks(comp: &Component) -> [usize; 3] {
    [comp.modes[1].rank(), comp.modes[2].rank(), comp.modes[3].rank()]
}

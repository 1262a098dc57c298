//! Basis construction, warm-start initialization and prior draws.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::bases::{build_gaussian_bases, build_identity_bases, build_indicator_bases, build_temporal_bases, default_basis_count, BasisSet, SplineBasis};
use crate::config::{SamplerConfig, SpatialBasis, SpatialPrior};
use crate::error::{Error, Result};
use crate::model::{Component, ModeState, ModelState, Which, TIME};
use crate::priors::{ping_column_draw, shrinkage_gibbs_update, shrinkage_prior_draw, ColumnStat, ShrinkageChain, ShrinkageMode};
use crate::rng::{block, cell_key, gamma, normal, Streams};
use crate::tensor::{multi_mode_product_transpose, unfold, DenseTensor};

use super::blocks::{column_conditional_with, targets};
use super::stats::Problem;
use super::sweep::{conditional_mean, draw, residual_ss, Gibbs};

/// Basis and PING depth for every mode of both components.
#[derive(Debug, Clone)]
pub struct ModeBases {
    pub alpha: Vec<(BasisSet, usize)>,
    pub beta: Vec<(BasisSet, usize)>,
}

pub(super) fn spatial_basis(d: usize, p: &SpatialPrior) -> Result<BasisSet> {
    match p.basis {
        SpatialBasis::Gaussian => build_gaussian_bases(d, p.n_bases.unwrap_or_else(|| default_basis_count(d))),
        SpatialBasis::Indicator => build_indicator_bases(d),
    }
}

pub fn build_bases(grid: [usize; 3], n_groups: usize, spline: &SplineBasis, config: &SamplerConfig) -> Result<ModeBases> {
    let pr = &config.priors;
    let mut alpha = vec![(build_identity_bases(n_groups), 1)];
    let mut beta = vec![(build_identity_bases(n_groups), 1)];
    for &d in &grid {
        alpha.push((spatial_basis(d, &pr.alpha_spatial)?, pr.alpha_spatial.depth));
        beta.push((spatial_basis(d, &pr.beta_spatial)?, pr.beta_spatial.depth));
    }
    beta.push((build_temporal_bases(spline)?, 1));
    let out = ModeBases { alpha, beta };
    for (name, bases, ranks) in [("alpha", &out.alpha, &config.ranks.alpha[..]), ("beta", &out.beta, &config.ranks.beta[..])] {
        for (s, ((b, _), &r)) in bases.iter().zip(ranks).enumerate() {
            let cap = b.n_coefficients().min(b.grid_len());
            if r > cap {
                return Err(Error::Config(format!(
                    "{name} rank {r} in mode {} exceeds the {cap} columns the basis supports",
                    s + 1
                )));
            }
        }
    }
    Ok(out)
}

pub fn spline_for(config: &SamplerConfig) -> Result<SplineBasis> {
    SplineBasis::new(config.spline_degree, config.n_temporal_bases)
}

/// Leading `r` left singular vectors of the mode-`j` unfolding, signs fixed so
/// the largest entry of each is positive.
pub(super) fn leading_vectors(t: &DenseTensor, j: usize, r: usize) -> DMatrix<f64> {
    let u = unfold(t, j).expect("mode in range");
    let eig = SymmetricEigen::new(&u * u.transpose());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = DMatrix::zeros(u.nrows(), r);
    for (c, &k) in order.iter().take(r).enumerate() {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        out.set_column(c, &v);
    }
    out
}

/// Best basis representation of the target columns under the orthogonality
/// constraint, with extra PING components close to one.
fn fit_mode(basis: &BasisSet, depth: usize, targets: &DMatrix<f64>, shrinkage: ShrinkageMode) -> Result<ModeState> {
    const WEIGHT: f64 = 1e4;
    let d = basis.grid_len();
    let ones = DVector::from_element(d, 1.0);
    let mut normal_eq = &basis.g * basis.g.transpose() + &basis.precision * 1e-6;
    normal_eq = (&normal_eq + normal_eq.transpose()) * 0.5;
    let unit = normal_eq
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("basis normal equations".into()))?
        .solve(&(&basis.g * &ones));
    let unit_field = basis.g.tr_mul(&unit);
    let mut others = ones.clone();
    for _ in 1..depth {
        others.component_mul_assign(&unit_field);
    }
    let q = DMatrix::identity(d, d) * WEIGHT;
    let mut fixed = DMatrix::zeros(d, 0);
    let mut coeffs = Vec::new();
    let mut jitter = crate::linalg::JitterLog::default();
    for l in 0..targets.ncols() {
        let b = targets.column(l) * WEIGHT;
        let g = column_conditional_with(basis, &others, &q, &b, 1.0, 1.0, &fixed);
        let first = conditional_mean(&mut jitter, &g, "initial mode fit")?;
        let mut comps = vec![first];
        comps.extend((1..depth).map(|_| unit.clone()));
        let col = basis.g.tr_mul(&comps[0]).component_mul(&others);
        fixed = fixed.insert_column(l, 0.0);
        fixed.set_column(l, &col);
        coeffs.push(comps);
    }
    let r = coeffs.len();
    let mut mode = ModeState::new(basis.clone(), depth, coeffs, ShrinkageChain { increments: vec![1.0; r] });
    mode.shrink = fitted_shrinkage(&mode, shrinkage);
    Ok(mode)
}

/// Increments whose cumulative scales match each first component's size.
fn fitted_shrinkage(mode: &ModeState, shrinkage: ShrinkageMode) -> ShrinkageChain {
    let m = mode.basis.n_coefficients();
    let mut prev = 1.0;
    let mut inc = Vec::new();
    for l in 0..mode.rank() {
        let g = &mode.coeffs[l][0];
        let quad = (g.transpose() * &mode.basis.precision * g)[(0, 0)];
        let sd = (quad / (m - l) as f64).sqrt().max(1e-8);
        let p = match shrinkage {
            ShrinkageMode::AsWritten => sd,
            ShrinkageMode::InverseScale => 1.0 / (sd * sd),
        };
        inc.push(p / prev);
        prev = p;
    }
    ShrinkageChain { increments: inc }
}

/// Per-group least-squares fits of the baseline and free spline coefficients
/// at every voxel: `(α̂ [d_g, d₁, d₂, d₃], β̂ [d_g, d₁, d₂, d₃, d_t])`.
pub fn pooled_estimates(p: &Problem) -> (DenseTensor, DenseTensor) {
    let v = p.n_voxels();
    let dt = p.spline.len();
    let m = p.spline.separation_expander();
    let [d1, d2, d3] = p.grid;
    let mut alpha = DenseTensor::zeros(&[p.n_groups, d1, d2, d3]);
    let mut beta = DenseTensor::zeros(&[p.n_groups, d1, d2, d3, dt]);
    for h in 0..p.n_groups {
        let mut xtx = DMatrix::zeros(dt, dt);
        let mut xty = DMatrix::zeros(dt, v);
        for s in p.subjects.iter().filter(|s| s.group == h) {
            for (j, y) in s.obs.iter().enumerate() {
                let bm = s.design.row(j) * &m;
                let x = DVector::from_fn(dt, |c, _| if c == 0 { 1.0 } else { bm[c - 1] });
                xtx += &x * x.transpose();
                let yv = DVector::from_column_slice(y.values());
                xty += &x * yv.transpose();
            }
        }
        let ridge = 1e-4 * (xtx.trace() / dt as f64).max(1.0);
        for c in 0..dt {
            xtx[(c, c)] += ridge;
        }
        let Some(ch) = xtx.cholesky() else { continue };
        let coef = ch.solve(&xty);
        let free = coef.rows(1, dt - 1).into_owned();
        let full = &m * free;
        for vox in 0..v {
            alpha.values_mut()[h * v + vox] = coef[(0, vox)];
            for t in 0..dt {
                beta.values_mut()[(h * v + vox) * dt + t] = full[(t, vox)];
            }
        }
    }
    (alpha, beta)
}

fn warm_component(t: &DenseTensor, bases: &[(BasisSet, usize)], ranks: &[usize], n_subjects: usize, shrinkage: ShrinkageMode) -> Result<Component> {
    let modes = bases
        .iter()
        .zip(ranks)
        .enumerate()
        .map(|(j, ((b, depth), &r))| fit_mode(b, *depth, &leading_vectors(t, j, r), shrinkage))
        .collect::<Result<Vec<_>>>()?;
    let ops: Vec<DMatrix<f64>> = modes.iter().map(|m| m.matrix.clone()).collect();
    let grams: Vec<DMatrix<f64>> = ops.iter().map(|a| a.tr_mul(a)).collect();
    // least-squares core for the fitted (orthogonal) columns
    let mut core = multi_mode_product_transpose(t, &ops.iter().map(Some).collect::<Vec<_>>());
    let mut idx = vec![0usize; ranks.len()];
    loop {
        let scale: f64 = (0..ranks.len()).map(|j| grams[j][(idx[j], idx[j])]).product();
        let v = core.get(&idx);
        core.set(&idx, if scale > 0.0 { v / scale } else { 0.0 });
        if !crate::tensor::increment(&mut idx, ranks) {
            break;
        }
    }
    Ok(Component {
        modes,
        cores: vec![core.clone(); n_subjects],
        mean: core,
        cell_var: DenseTensor::filled(ranks, 1e8),
        tau2: 1.0,
        mean_var: 1.0,
    })
}

/// Deterministic warm start: pooled fits, truncated HOSVD projected onto the
/// bases, conditional-mean passes over the subject cores, then variances
/// from the spread of the cores and the residuals.
pub fn initialize(g: &mut Gibbs, bases: &ModeBases) -> Result<ModelState> {
    let shrink = g.config.priors.shrinkage;
    let (ta, tb) = pooled_estimates(&g.problem);
    let n = g.problem.n_subjects();
    let alpha = warm_component(&ta, &bases.alpha, &g.config.ranks.alpha, n, shrink)?;
    let beta = warm_component(&tb, &bases.beta, &g.config.ranks.beta, n, shrink)?;
    let mut state = ModelState { alpha, beta, sigma2: 1.0, spline: g.problem.spline.clone(), groups: g.problem.groups() };
    for _ in 0..g.config.init_passes {
        for w in [Which::Alpha, Which::Beta] {
            let tg = targets(&state, &g.problem, w);
            let cores = g.core_pass(&state, w, &tg, None)?;
            state.component_mut(w).cores = cores;
        }
    }
    for w in [Which::Alpha, Which::Beta] {
        let comp = state.component_mut(w);
        let nn = comp.cores.len() as f64;
        let mut mean = DenseTensor::zeros(comp.mean.dims());
        for c in &comp.cores {
            mean.axpy(1.0 / nn, c);
        }
        let mut var = DenseTensor::zeros(mean.dims());
        for c in &comp.cores {
            for ((v, x), m) in var.values_mut().iter_mut().zip(c.values()).zip(mean.values()) {
                *v += (x - m).powi(2) / nn;
            }
        }
        let avg = var.values().iter().sum::<f64>() / var.len() as f64;
        let floor = 1e-6 * avg.max(1e-12);
        for v in var.values_mut() {
            *v = v.max(floor);
        }
        comp.mean_var = (mean.values().iter().map(|c| c * c).sum::<f64>() / mean.len() as f64).max(1e-12);
        comp.mean = mean;
        comp.cell_var = var;
        comp.tau2 = 1.0;
    }
    let ss = residual_ss(&state, &g.problem);
    let nobs = (g.problem.included_voxels() * g.problem.n_observations()) as f64;
    state.sigma2 = (ss / nobs).max(1e-12);
    super::sweep::check_finite(&state, "initialization")?;
    Ok(state)
}

fn prior_mode(basis: &BasisSet, depth: usize, r: usize, config: &SamplerConfig, rng: &mut impl Rng) -> Result<ModeState> {
    let pr = &config.priors;
    let shrink = shrinkage_prior_draw(r, pr.kappa1, pr.kappa2, rng);
    let mut matrix = DMatrix::zeros(basis.grid_len(), 0);
    let mut coeffs = Vec::with_capacity(r);
    for l in 0..r {
        let (col, comps) = ping_column_draw(basis, depth, l, &matrix, shrink.scale(l, pr.shrinkage), rng)?;
        matrix = matrix.insert_column(l, 0.0);
        matrix.set_column(l, &col);
        coeffs.push(comps);
    }
    Ok(ModeState::new(basis.clone(), depth, coeffs, shrink))
}

/// Gibbs sweeps over the shrinkage increments and column coefficients of one
/// mode with no data, targeting the joint prior the sampler uses.
pub fn prior_mode_sweeps(mode: &mut ModeState, sweeps: usize, config: &SamplerConfig, rng: &mut impl Rng) -> Result<()> {
    let pr = &config.priors;
    let d = mode.grid_len();
    let q = DMatrix::zeros(d, d);
    let b = DVector::zeros(d);
    let mut jitter = crate::linalg::JitterLog::default();
    let m = mode.basis.n_coefficients();
    for _ in 0..sweeps {
        for l in 0..mode.rank() {
            for k in 0..mode.depth {
                let g = super::blocks::column_conditional(mode, l, k, &q, &b, 1.0, pr.shrinkage);
                mode.coeffs[l][k] = draw(&mut jitter, &g, "prior column", rng)?;
                mode.refresh_column(l);
            }
        }
        let stats: Vec<ColumnStat> = (0..mode.rank())
            .map(|l| {
                let g = &mode.coeffs[l][0];
                ColumnStat { dim: m - l, quad: (g.transpose() * &mode.basis.precision * g)[(0, 0)] }
            })
            .collect();
        mode.shrink = shrinkage_gibbs_update(&mode.shrink, &stats, pr.kappa1, pr.kappa2, pr.shrinkage, rng);
    }
    Ok(())
}

fn prior_component(
    bases: &[(BasisSet, usize)],
    ranks: &[usize],
    n_subjects: usize,
    config: &SamplerConfig,
    mode_sweeps: usize,
    rng: &mut impl Rng,
) -> Result<Component> {
    let pr = &config.priors;
    let mut modes = Vec::new();
    for ((b, depth), &r) in bases.iter().zip(ranks) {
        let mut m = prior_mode(b, *depth, r, config, rng)?;
        prior_mode_sweeps(&mut m, mode_sweeps, config, rng)?;
        modes.push(m);
    }
    let mean_var = 1.0 / gamma(rng, pr.a_mean, pr.b_mean);
    let tau2 = 1.0 / gamma(rng, pr.a_tau, pr.b_tau);
    let mean = DenseTensor::from_fn(ranks, |_| mean_var.sqrt() * normal(rng));
    let cell_var = DenseTensor::from_fn(ranks, |_| 1.0 / gamma(rng, pr.a_s, pr.b_s));
    let cores = (0..n_subjects)
        .map(|_| {
            let mut c = mean.clone();
            for (x, v) in c.values_mut().iter_mut().zip(cell_var.values()) {
                *x += (tau2 * v).sqrt() * normal(rng);
            }
            c
        })
        .collect();
    Ok(Component { modes, cores, mean, cell_var, tau2, mean_var })
}

/// Full draw from the prior for the given layout.
pub fn prior_state(
    grid: [usize; 3],
    n_groups: usize,
    groups: &[usize],
    config: &SamplerConfig,
    streams: &Streams,
    mode_sweeps: usize,
) -> Result<ModelState> {
    let spline = spline_for(config)?;
    let bases = build_bases(grid, n_groups, &spline, config)?;
    let mut rng = streams.rng(0, block::PRIOR, cell_key(&[0]));
    let alpha = prior_component(&bases.alpha, &config.ranks.alpha, groups.len(), config, mode_sweeps, &mut rng)?;
    let beta = prior_component(&bases.beta, &config.ranks.beta, groups.len(), config, mode_sweeps, &mut rng)?;
    let sigma2 = 1.0 / gamma(&mut rng, config.priors.a_eps, config.priors.b_eps);
    debug_assert_eq!(beta.modes[TIME].grid_len(), spline.len());
    Ok(ModelState { alpha, beta, sigma2, spline, groups: groups.to_vec() })
}

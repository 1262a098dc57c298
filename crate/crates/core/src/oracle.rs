//! Self-checks of the sampler on small instances: every blocked full
//! conditional against dense joint-Gaussian conditioning, and simulation-based
//! calibration with prior-drawn ground truths.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::{RankConfig, SamplerConfig, SpatialBasis, SpatialPrior};
use crate::data::LongitudinalDataset;
use crate::datagen::simulate_from_state;
use crate::error::{Error, Result};
use crate::model::{eval_alpha, eval_beta, ModelState, Target, Which, GROUP, TIME};
use crate::rng::Streams;
use crate::sampler::blocks::*;
use crate::sampler::{prior_state, Chain, Draw, PosteriorDraws, Problem};
use crate::tensor::{increment, DenseTensor};

/// Mean and covariance error of one block, relative to the oracle's scale.
#[derive(Debug, Clone, Serialize)]
pub struct BlockCheck {
    pub block: String,
    pub mean_error: f64,
    pub cov_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConditionalReport {
    pub checks: Vec<BlockCheck>,
}

impl ConditionalReport {
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.mean_error.max(c.cov_error)).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&BlockCheck> {
        self.checks.iter().max_by(|a, b| a.mean_error.max(a.cov_error).total_cmp(&b.mean_error.max(b.cov_error)))
    }
}

/// Small-instance sampler settings: all ranks 2, four temporal bases and
/// informative variance priors so prior draws stay in a sensible range.
pub fn small_config(seed: u64) -> SamplerConfig {
    let mut c = SamplerConfig {
        seed,
        threads: Some(1),
        ranks: RankConfig { alpha: [2; 4], beta: [2; 5] },
        n_temporal_bases: 4,
        ..SamplerConfig::default()
    };
    c.adapt.enabled = false;
    let p = &mut c.priors;
    p.a_eps = 20.0;
    p.b_eps = 5.0;
    p.a_tau = 20.0;
    p.b_tau = 20.0;
    p.a_mean = 10.0;
    p.b_mean = 10.0;
    p.alpha_spatial = SpatialPrior { basis: SpatialBasis::Gaussian, n_bases: Some(3), depth: 2 };
    p.beta_spatial = SpatialPrior { basis: SpatialBasis::Indicator, n_bases: None, depth: 3 };
    c
}

fn visit_lists(n: usize) -> Vec<Vec<f64>> {
    let pool = [[0.0, 0.3, 0.8], [0.0, 0.5, 1.0], [0.0, 0.2, 0.6], [0.0, 0.4, 0.9]];
    (0..n).map(|i| pool[i % pool.len()].to_vec()).collect()
}

/// Prior-drawn state and data simulated from it.
pub fn small_instance(
    grid: [usize; 3],
    n_groups: usize,
    n_subjects: usize,
    config: &SamplerConfig,
    streams: &Streams,
    mode_sweeps: usize,
) -> Result<(ModelState, LongitudinalDataset)> {
    let groups: Vec<usize> = (0..n_subjects).map(|i| i * n_groups / n_subjects).collect();
    let state = prior_state(grid, n_groups, &groups, config, streams, mode_sweeps)?;
    let data = simulate_from_state(&state, &visit_lists(n_subjects), &streams.child(1))?;
    Ok((state, data))
}

fn stacked_mean(state: &ModelState, problem: &Problem) -> Result<DVector<f64>> {
    let mut out = Vec::new();
    for (i, s) in problem.subjects.iter().enumerate() {
        let a = eval_alpha(state, Target::Subject(i), s.group)?;
        for &t in &s.times {
            let b = eval_beta(state, Target::Subject(i), s.group, t)?;
            out.extend(a.values().iter().zip(b.values()).map(|(x, y)| x + y));
        }
    }
    Ok(DVector::from_vec(out))
}

fn stacked_obs(problem: &Problem) -> DVector<f64> {
    DVector::from_iterator(
        problem.n_observations() * problem.n_voxels(),
        problem.subjects.iter().flat_map(|s| s.obs.iter().flat_map(|y| y.values().iter().copied())),
    )
}

/// Mean at block value zero and the design `∂μ/∂x`, by probing the forward
/// model one coordinate at a time.
fn probe(
    state: &ModelState,
    problem: &Problem,
    p: usize,
    set: impl Fn(&mut ModelState, &DVector<f64>),
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mut s = state.clone();
    set(&mut s, &DVector::zeros(p));
    let mu0 = stacked_mean(&s, problem)?;
    let mut x = DMatrix::zeros(mu0.len(), p);
    for j in 0..p {
        let mut s = state.clone();
        let mut e = DVector::zeros(p);
        e[j] = 1.0;
        set(&mut s, &e);
        x.set_column(j, &(stacked_mean(&s, problem)? - &mu0));
    }
    Ok((mu0, x))
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut m = m.clone();
    crate::linalg::symmetrize(&mut m);
    let svd = m.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12;
    svd.pseudo_inverse(tol).expect("both factors computed")
}

/// Joint-Gaussian conditioning in covariance form: prior `N(m0, V0)`,
/// `y = μ0 + Xx + N(0, noise·I)`, then `Cx = 0`.
fn dense_posterior(
    y: &DVector<f64>,
    mu0: &DVector<f64>,
    x: &DMatrix<f64>,
    noise: f64,
    m0: &DVector<f64>,
    v0: &DMatrix<f64>,
    constraint: Option<&DMatrix<f64>>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let vx = v0 * x.transpose();
    let mut syy = x * &vx;
    for i in 0..syy.nrows() {
        syy[(i, i)] += noise;
    }
    let ch = syy.cholesky().ok_or_else(|| Error::NotPositiveDefinite("oracle data covariance".into()))?;
    let gain = ch.solve(&vx.transpose()).transpose();
    let mut mean = m0 + &gain * (y - mu0 - x * m0);
    let mut cov = v0 - &gain * vx.transpose();
    if let Some(c) = constraint.filter(|c| c.nrows() > 0) {
        let sc = &cov * c.transpose();
        let w = pinv(&(c * &sc));
        mean -= &sc * &w * (c * &mean);
        cov -= &sc * &w * sc.transpose();
    }
    crate::linalg::symmetrize(&mut cov);
    Ok((mean, cov))
}

fn max_abs(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(0.0, |a, v| a.max(v.abs()))
}

fn compare(block: String, got: (DVector<f64>, DMatrix<f64>), want: (DVector<f64>, DMatrix<f64>)) -> BlockCheck {
    let cov_scale = max_abs(want.1.iter().copied()).max(f64::MIN_POSITIVE);
    let mean_scale = max_abs(want.0.iter().copied()).max(cov_scale.sqrt());
    BlockCheck {
        block,
        mean_error: max_abs((got.0 - &want.0).iter().copied()) / mean_scale,
        cov_error: max_abs((got.1 - &want.1).iter().copied()) / cov_scale,
    }
}

fn name(w: Which) -> &'static str {
    match w {
        Which::Alpha => "alpha",
        Which::Beta => "beta",
    }
}

fn column_checks(state: &ModelState, problem: &Problem, config: &SamplerConfig, w: Which) -> Result<Vec<BlockCheck>> {
    let y = stacked_obs(problem);
    let tg = targets(state, problem, w);
    let groups = problem.groups();
    let comp = state.component(w);
    let shrink = config.priors.shrinkage;
    let mut out = Vec::new();
    for (s, mode) in comp.modes.iter().enumerate() {
        let qb: Vec<(DMatrix<f64>, DVector<f64>)> = match s {
            GROUP => {
                let sys = group_system(comp, &tg, &groups, problem.n_groups);
                (0..mode.rank()).map(|l| group_column(mode, &sys, l)).collect()
            }
            TIME => {
                let sys = temporal_system(state, problem);
                (0..mode.rank()).map(|l| temporal_column(mode, &sys, problem, l)).collect()
            }
            _ => {
                let sys = spatial_system(comp, &tg, &groups, s);
                (0..mode.rank()).map(|l| spatial_column(mode, &sys, l)).collect()
            }
        };
        let m = mode.basis.n_coefficients();
        for (l, (q, b)) in qb.iter().enumerate() {
            for k in 0..mode.depth {
                let got = column_conditional(mode, l, k, q, b, state.sigma2, shrink).prepare()?;
                let set = |st: &mut ModelState, x: &DVector<f64>| {
                    let md = &mut st.component_mut(w).modes[s];
                    md.coeffs[l][k] = x.clone();
                    md.refresh_column(l);
                };
                let (mu0, x) = probe(state, problem, m, set)?;
                // column as a linear map of the coefficients
                let mut jac = DMatrix::zeros(mode.grid_len(), m);
                let mut md = mode.clone();
                for j in 0..m {
                    md.coeffs[l][k] = DVector::from_fn(m, |h, _| if h == j { 1.0 } else { 0.0 });
                    jac.set_column(j, &md.column(l));
                }
                let others = mode.matrix.clone().remove_column(l);
                let c = others.transpose() * jac;
                let sc = mode.component_scale(l, k, shrink);
                let v0 = &mode.basis.covariance * (sc * sc);
                let want = dense_posterior(&y, &mu0, &x, state.sigma2, &DVector::zeros(m), &v0, Some(&c))?;
                out.push(compare(
                    format!("{} mode {} column {} component {}", name(w), s + 1, l + 1, k + 1),
                    (got.mean(), got.covariance()),
                    want,
                ));
            }
        }
    }
    Ok(out)
}

fn core_checks(state: &ModelState, problem: &Problem, w: Which) -> Result<Vec<BlockCheck>> {
    let y = stacked_obs(problem);
    let tg = targets(state, problem, w);
    let comp = state.component(w);
    let rg = comp.modes[GROUP].rank();
    let kk = if comp.is_temporal() { comp.modes[TIME].rank() } else { 1 };
    let zr = spatial_ranks(comp);
    let mut out = Vec::new();
    for (i, s) in problem.subjects.iter().enumerate() {
        let ctx = core_context(comp, &tg, i, s.group);
        let mut z = [0usize; 3];
        loop {
            let got = core_block(comp, &ctx, z, state.sigma2).prepare()?;
            let index = |zg: usize, k: usize| {
                let mut idx = vec![zg, z[0], z[1], z[2]];
                if comp.is_temporal() {
                    idx.push(k);
                }
                idx
            };
            let n = rg * kk;
            let set = |st: &mut ModelState, x: &DVector<f64>| {
                let core = &mut st.component_mut(w).cores[i];
                for zg in 0..rg {
                    for k in 0..kk {
                        core.set(&index(zg, k), x[zg * kk + k]);
                    }
                }
            };
            let (mu0, x) = probe(state, problem, n, set)?;
            let mut m0 = DVector::zeros(n);
            let mut v0 = DMatrix::zeros(n, n);
            for zg in 0..rg {
                for k in 0..kk {
                    let idx = index(zg, k);
                    m0[zg * kk + k] = comp.mean.get(&idx);
                    v0[(zg * kk + k, zg * kk + k)] = comp.tau2 * comp.cell_var.get(&idx);
                }
            }
            let want = dense_posterior(&y, &mu0, &x, state.sigma2, &m0, &v0, None)?;
            out.push(compare(
                format!("{} core of subject {} at {:?}", name(w), i + 1, z),
                (got.mean(), got.covariance()),
                want,
            ));
            if !increment(&mut z, &zr) {
                break;
            }
        }
    }
    Ok(out)
}

fn mean_core_checks(state: &ModelState, w: Which) -> Vec<BlockCheck> {
    let comp = state.component(w);
    let dims = comp.mean.dims().to_vec();
    let n = comp.cores.len();
    let mut idx = vec![0usize; dims.len()];
    let mut out = Vec::new();
    loop {
        let (p, h) = mean_core_conditional(comp, &idx);
        let y = DVector::from_iterator(n, comp.cores.iter().map(|c| c.get(&idx)));
        let x = DMatrix::from_element(n, 1, 1.0);
        let noise = comp.tau2 * comp.cell_var.get(&idx);
        let prior = DMatrix::from_element(1, 1, comp.mean_var);
        let want = dense_posterior(&y, &DVector::zeros(n), &x, noise, &DVector::zeros(1), &prior, None)
            .expect("scalar conditioning");
        out.push(compare(
            format!("{} mean core cell {:?}", name(w), idx),
            (DVector::from_element(1, h / p), DMatrix::from_element(1, 1, 1.0 / p)),
            want,
        ));
        if !increment(&mut idx, &dims) {
            break;
        }
    }
    out
}

/// Every Gaussian block of the sampler at the given state against dense
/// conditioning of the joint model.
pub fn check_conditionals(state: &ModelState, problem: &Problem, config: &SamplerConfig) -> Result<ConditionalReport> {
    let mut checks = Vec::new();
    for w in [Which::Alpha, Which::Beta] {
        checks.extend(column_checks(state, problem, config, w)?);
        checks.extend(core_checks(state, problem, w)?);
        checks.extend(mean_core_checks(state, w));
    }
    Ok(ConditionalReport { checks })
}

/// The fixed tiny instance: grid 3³, two groups, four subjects with three
/// visits each, four temporal bases, all ranks 2.
pub fn conditional_oracle(seed: u64) -> Result<ConditionalReport> {
    let config = small_config(seed);
    let streams = Streams::new(seed);
    let (mut state, data) = small_instance([3, 3, 3], 2, 4, &config, &streams, 10)?;
    state.sigma2 = state.sigma2.max(0.1);
    let chain = Chain::new(&data, config.clone())?;
    check_conditionals(&state, chain.problem(), &config)
}

/// Settings of a calibration run.
#[derive(Debug, Clone, Serialize)]
pub struct SbcSettings {
    pub replications: usize,
    pub grid: [usize; 3],
    pub groups: usize,
    pub subjects: usize,
    /// Posterior draws kept per replication; ranks fall in `0..=draws`.
    pub draws: usize,
    pub thin: usize,
    /// Gibbs sweeps over the mode priors when drawing the truth.
    pub prior_sweeps: usize,
    pub seed: u64,
}

impl Default for SbcSettings {
    fn default() -> Self {
        Self { replications: 200, grid: [4, 4, 4], groups: 2, subjects: 6, draws: 9, thin: 50, prior_sweeps: 200, seed: 2024 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SbcReport {
    pub functionals: Vec<String>,
    /// `ranks[f][rep]`.
    pub ranks: Vec<Vec<usize>>,
    pub p_values: Vec<f64>,
}

impl SbcReport {
    pub fn min_p(&self) -> f64 {
        self.p_values.iter().copied().fold(1.0, f64::min)
    }
}

pub const SBC_FUNCTIONALS: [&str; 10] = [
    "alpha g1 corner voxel",
    "alpha g2 center voxel",
    "alpha g1 volume mean",
    "alpha g2 mean square",
    "beta g1 t=0.5 voxel",
    "beta g2 t=1 voxel",
    "beta g1 t=1 volume mean",
    "beta g2 t=0.7 mean square",
    "alpha x beta g1 t=1 mean",
    "beta g1-g2 t=0.8 mean gap",
];

fn mean_of(t: &DenseTensor) -> f64 {
    t.values().iter().sum::<f64>() / t.len() as f64
}

/// Scalar functionals of the population surfaces of one draw.
pub fn sbc_functionals(draws: &PosteriorDraws, d: &Draw) -> Result<[f64; 10]> {
    let g = draws.grid;
    let corner = [0, 0, 0];
    let center = [g[0] / 2, g[1] / 2, g[2] / 2];
    let off = [1.min(g[0] - 1), g[1] - 1, g[2] / 2];
    let a1 = draws.alpha(d, 0);
    let a2 = draws.alpha(d, 1);
    let b1h = draws.beta(d, 0, 0.5)?;
    let b1 = draws.beta(d, 0, 1.0)?;
    let b2 = draws.beta(d, 1, 1.0)?;
    let b2s = draws.beta(d, 1, 0.7)?;
    let mut gap = draws.beta(d, 0, 0.8)?;
    gap.axpy(-1.0, &draws.beta(d, 1, 0.8)?);
    let ab = a1.values().iter().zip(b1.values()).map(|(x, y)| x * y).sum::<f64>() / a1.len() as f64;
    Ok([
        a1.get(&corner),
        a2.get(&center),
        mean_of(&a1),
        a2.dot(&a2) / a2.len() as f64,
        b1h.get(&off),
        b2.get(&center),
        mean_of(&b1),
        b2s.dot(&b2s) / b2s.len() as f64,
        ab,
        mean_of(&gap),
    ])
}

/// Ranks of the truth's functionals among the posterior draws of one
/// replication. The chain starts at the truth, which is an exact posterior
/// draw, so every later state is one as well.
pub fn sbc_replication(settings: &SbcSettings, rep: usize) -> Result<[usize; 10]> {
    let streams = Streams::new(settings.seed).child(rep as u64 + 1);
    let mut config = small_config(settings.seed.wrapping_mul(1_000_003).wrapping_add(rep as u64));
    config.burn_in = 0;
    config.thin = settings.thin;
    config.iterations = settings.draws * settings.thin;
    let (truth, data) =
        small_instance(settings.grid, settings.groups, settings.subjects, &config, &streams, settings.prior_sweeps)?;
    let mut chain = Chain::new(&data, config)?;
    let mut draws = chain.empty_draws();
    let reference = draws.clone();
    let mut state = truth.clone();
    chain.run_from(&mut state, 0, &mut draws, |_, _, _| Ok(()))?;
    let t = sbc_functionals(&reference, &Draw::from_state(&truth, 0))?;
    let mut ranks = [0usize; 10];
    for d in &draws.draws {
        let f = sbc_functionals(&draws, d)?;
        for j in 0..10 {
            ranks[j] += usize::from(f[j] < t[j]);
        }
    }
    Ok(ranks)
}

/// Pearson χ² p-value of uniformity of ranks in `0..bins`.
pub fn uniformity_p_value(ranks: &[usize], bins: usize) -> f64 {
    let mut counts = vec![0usize; bins];
    for &r in ranks {
        counts[r.min(bins - 1)] += 1;
    }
    let e = ranks.len() as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let dist = ChiSquared::new((bins - 1) as f64).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

pub fn run_sbc(settings: &SbcSettings) -> Result<SbcReport> {
    if settings.replications == 0 || settings.draws == 0 || settings.thin == 0 {
        return Err(Error::Config("calibration needs positive replications, draws and thin".into()));
    }
    let per_rep = (0..settings.replications)
        .into_par_iter()
        .map(|rep| sbc_replication(settings, rep))
        .collect::<Result<Vec<_>>>()?;
    let ranks: Vec<Vec<usize>> = (0..10).map(|j| per_rep.iter().map(|r| r[j]).collect()).collect();
    let p_values = ranks.iter().map(|r| uniformity_p_value(r, settings.draws + 1)).collect();
    Ok(SbcReport { functionals: SBC_FUNCTIONALS.iter().map(|s| s.to_string()).collect(), ranks, p_values })
}

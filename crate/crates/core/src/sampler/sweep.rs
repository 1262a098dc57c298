//! One Gibbs sweep: `α` modes → `α` cores → `β` modes (temporal last) →
//! `β` cores → mean cores → shrinkage → variances → rank adaptation.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::config::SamplerConfig;
use crate::error::{Error, Result};
use crate::linalg::JitterLog;
use crate::model::{ModelState, Which, GROUP, TIME};
use crate::priors::{shrinkage_gibbs_update, variance_gibbs, CanonicalGaussian, ColumnStat, PreparedGaussian, MAX_BAND};
use crate::rng::{block, cell_key, normal, Streams};
use crate::tensor::{increment, DenseTensor};

use super::blocks::*;
use super::stats::Problem;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepInfo {
    pub loglik: f64,
    pub ss: f64,
}

/// Sampler bound to one problem.
pub struct Gibbs {
    pub problem: Problem,
    pub config: SamplerConfig,
    pub streams: Streams,
    pub jitter: JitterLog,
    /// Ranks never grow past these.
    pub max_ranks: [Vec<usize>; 2],
}

fn which_id(w: Which) -> usize {
    match w {
        Which::Alpha => 0,
        Which::Beta => 1,
    }
}

fn which_name(w: Which) -> &'static str {
    match w {
        Which::Alpha => "alpha",
        Which::Beta => "beta",
    }
}

pub(crate) fn draw(
    jitter: &mut JitterLog,
    g: &CanonicalGaussian,
    block: &str,
    rng: &mut impl Rng,
) -> Result<DVector<f64>> {
    let f = jitter.factor(&g.precision, MAX_BAND, block)?;
    let p = PreparedGaussian::new(f, &g.linear, g.constraint.as_ref().map(|(a, c)| (a, c)))?;
    let x = p.sample(rng);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::numerical(block, "non-finite draw"));
    }
    Ok(x)
}

pub(crate) fn conditional_mean(jitter: &mut JitterLog, g: &CanonicalGaussian, block: &str) -> Result<DVector<f64>> {
    let f = jitter.factor(&g.precision, MAX_BAND, block)?;
    let p = PreparedGaussian::new(f, &g.linear, g.constraint.as_ref().map(|(a, c)| (a, c)))?;
    Ok(p.mean())
}

/// Squared residual norm over included voxels, per subject.
pub fn residual_ss(state: &ModelState, problem: &Problem) -> f64 {
    let at = &state.beta.modes[TIME].matrix;
    let parts: Vec<f64> = problem
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let alpha = subject_alpha(state, i, s.group);
            let fields = subject_fields(&state.beta, i, s.group);
            let w = &s.design * at;
            let mut ss = 0.0;
            for (j, y) in s.obs.iter().enumerate() {
                let mut mu = alpha.clone();
                for (k, f) in fields.iter().enumerate() {
                    mu.axpy(w[(j, k)], f);
                }
                ss += match &problem.mask {
                    Some(m) => y
                        .values()
                        .iter()
                        .zip(mu.values())
                        .zip(m)
                        .filter(|(_, &keep)| keep)
                        .map(|((a, b), _)| (a - b) * (a - b))
                        .sum::<f64>(),
                    None => y.values().iter().zip(mu.values()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
                };
            }
            ss
        })
        .collect();
    parts.iter().sum()
}

pub fn check_finite(state: &ModelState, block: &str) -> Result<()> {
    let ok = [&state.alpha, &state.beta].iter().all(|c| {
        c.cores.iter().all(|t| t.is_finite())
            && c.mean.is_finite()
            && c.cell_var.is_finite()
            && c.modes.iter().all(|m| m.matrix.iter().all(|v| v.is_finite()))
            && c.tau2.is_finite()
            && c.mean_var.is_finite()
    }) && state.sigma2.is_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::numerical(block, "non-finite value in state"))
    }
}

impl Gibbs {
    pub fn new(problem: Problem, config: SamplerConfig) -> Self {
        let streams = Streams::new(config.seed);
        let max_ranks = [config.ranks.alpha.to_vec(), config.ranks.beta.to_vec()];
        Self { problem, config, streams, jitter: JitterLog::default(), max_ranks }
    }

    pub fn sweep(&mut self, state: &mut ModelState, iter: u64) -> Result<SweepInfo> {
        self.impute(state, iter);
        for w in [Which::Alpha, Which::Beta] {
            self.update_modes(state, w, iter)?;
            check_finite(state, &format!("{} modes", which_name(w)))?;
            self.update_cores(state, w, iter)?;
            check_finite(state, &format!("{} cores", which_name(w)))?;
        }
        self.update_mean_cores(state, iter);
        self.update_shrinkage(state, iter);
        let info = self.update_variances(state, iter);
        check_finite(state, "variances")?;
        if self.adapt_active(iter) {
            super::adapt::adapt_ranks(self, state, iter)?;
            check_finite(state, "rank adaptation")?;
        }
        Ok(info)
    }

    fn adapt_active(&self, iter: u64) -> bool {
        let a = &self.config.adapt;
        a.enabled && (!a.burn_in_only || (iter as usize) < self.config.burn_in)
    }

    /// Redraws masked voxels from the current model.
    pub fn impute(&mut self, state: &ModelState, iter: u64) {
        let Some(mask) = self.problem.mask.clone() else { return };
        let streams = self.streams;
        let sigma = state.sigma2.sqrt();
        let at = state.beta.modes[TIME].matrix.clone();
        self.problem.subjects.par_iter_mut().enumerate().for_each(|(i, s)| {
            let alpha = subject_alpha(state, i, s.group);
            let fields = subject_fields(&state.beta, i, s.group);
            let w = &s.design * &at;
            for (j, y) in s.obs.iter_mut().enumerate() {
                let mut rng = streams.rng(iter, block::IMPUTE, cell_key(&[i, j]));
                let mut mu = alpha.clone();
                for (k, f) in fields.iter().enumerate() {
                    mu.axpy(w[(j, k)], f);
                }
                for (v, (&keep, m)) in y.values_mut().iter_mut().zip(mask.iter().zip(mu.values())) {
                    if !keep {
                        *v = m + sigma * normal(&mut rng);
                    }
                }
            }
            s.refresh();
        });
    }

    pub fn update_modes(&mut self, state: &mut ModelState, w: Which, iter: u64) -> Result<()> {
        let tg = targets(state, &self.problem, w);
        let groups = self.problem.groups();
        let sigma2 = state.sigma2;
        let shrink = self.config.priors.shrinkage;
        let wid = which_id(w);

        let sys = group_system(state.component(w), &tg, &groups, self.problem.n_groups);
        let r = state.component(w).modes[GROUP].rank();
        for l in 0..r {
            let (q, b) = group_column(&state.component(w).modes[GROUP], &sys, l);
            self.update_column(state, w, GROUP, l, &q, &b, sigma2, shrink, iter, wid)?;
        }
        for s in 1..=3 {
            let sys = spatial_system(state.component(w), &tg, &groups, s);
            for l in 0..state.component(w).modes[s].rank() {
                let (q, b) = spatial_column(&state.component(w).modes[s], &sys, l);
                self.update_column(state, w, s, l, &q, &b, sigma2, shrink, iter, wid)?;
            }
        }
        if w == Which::Beta {
            let sys = temporal_system(state, &self.problem);
            for l in 0..state.beta.modes[TIME].rank() {
                let (q, b) = temporal_column(&state.beta.modes[TIME], &sys, &self.problem, l);
                self.update_column(state, w, TIME, l, &q, &b, sigma2, shrink, iter, wid)?;
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn update_column(
        &mut self,
        state: &mut ModelState,
        w: Which,
        s: usize,
        l: usize,
        q: &nalgebra::DMatrix<f64>,
        b: &DVector<f64>,
        sigma2: f64,
        shrink: crate::priors::ShrinkageMode,
        iter: u64,
        wid: usize,
    ) -> Result<()> {
        let depth = state.component(w).modes[s].depth;
        for k in 0..depth {
            let mode = &state.component(w).modes[s];
            let g = column_conditional(mode, l, k, q, b, sigma2, shrink);
            let mut rng = self.streams.rng(iter, block::MODE, cell_key(&[wid, s, l, k]));
            let name = format!("{} mode {} column {} component {}", which_name(w), s, l + 1, k + 1);
            let x = draw(&mut self.jitter, &g, &name, &mut rng)?;
            let mode = &mut state.component_mut(w).modes[s];
            mode.coeffs[l][k] = x;
            mode.refresh_column(l);
        }
        Ok(())
    }

    pub fn update_cores(&mut self, state: &mut ModelState, w: Which, iter: u64) -> Result<()> {
        let tg = targets(state, &self.problem, w);
        let cores = self.core_pass(state, w, &tg, Some(iter))?;
        state.component_mut(w).cores = cores;
        Ok(())
    }

    /// Draws (or, with `iter = None`, sets to their conditional means) every
    /// subject core, in parallel over subjects.
    pub fn core_pass(
        &mut self,
        state: &ModelState,
        w: Which,
        tg: &Targets,
        iter: Option<u64>,
    ) -> Result<Vec<DenseTensor>> {
        let comp = state.component(w);
        let sigma2 = state.sigma2;
        let streams = self.streams;
        let wid = which_id(w);
        let zr = spatial_ranks(comp);
        let results: Vec<Result<(DenseTensor, u64)>> = self
            .problem
            .subjects
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let ctx = core_context(comp, tg, i, s.group);
                let mut core = comp.cores[i].clone();
                let mut jitter = JitterLog::default();
                let mut z = [0usize; 3];
                loop {
                    let g = core_block(comp, &ctx, z, sigma2);
                    let name = format!("{} core of subject {}", which_name(w), i + 1);
                    let x = match iter {
                        Some(it) => {
                            let key = cell_key(&[wid, i, z[0], z[1], z[2]]);
                            let mut rng = streams.rng(it, block::CORE, key);
                            draw(&mut jitter, &g, &name, &mut rng)?
                        }
                        None => conditional_mean(&mut jitter, &g, &name)?,
                    };
                    store_core_block(comp, &mut core, z, &x);
                    if !increment(&mut z, &zr) {
                        break;
                    }
                }
                Ok((core, jitter.total))
            })
            .collect();
        let mut out = Vec::with_capacity(results.len());
        for r in results {
            let (c, j) = r?;
            self.jitter.total += j;
            out.push(c);
        }
        Ok(out)
    }

    pub fn update_mean_cores(&mut self, state: &mut ModelState, iter: u64) {
        for w in [Which::Alpha, Which::Beta] {
            let wid = which_id(w);
            let comp = state.component_mut(w);
            let mut rng = self.streams.rng(iter, block::MEAN_CORE, cell_key(&[wid]));
            let dims = comp.mean.dims().to_vec();
            let mut idx = vec![0usize; dims.len()];
            loop {
                let (p, h) = mean_core_conditional(comp, &idx);
                let v = h / p + normal(&mut rng) / p.sqrt();
                comp.mean.set(&idx, v);
                if !increment(&mut idx, &dims) {
                    break;
                }
            }
            let ss: f64 = comp.mean.values().iter().map(|c| c * c).sum();
            let pr = &self.config.priors;
            comp.mean_var = 1.0 / variance_gibbs(pr.a_mean, pr.b_mean, comp.mean.len() as f64, ss, &mut rng);
        }
    }

    pub fn update_shrinkage(&mut self, state: &mut ModelState, iter: u64) {
        let pr = self.config.priors.clone();
        for w in [Which::Alpha, Which::Beta] {
            let wid = which_id(w);
            for (s, mode) in state.component_mut(w).modes.iter_mut().enumerate() {
                let m = mode.basis.n_coefficients();
                let stats: Vec<ColumnStat> = (0..mode.rank())
                    .map(|l| {
                        let g = &mode.coeffs[l][0];
                        ColumnStat { dim: m - l, quad: (g.transpose() * &mode.basis.precision * g)[(0, 0)] }
                    })
                    .collect();
                let mut rng = self.streams.rng(iter, block::SHRINK, cell_key(&[wid, s]));
                mode.shrink = shrinkage_gibbs_update(&mode.shrink, &stats, pr.kappa1, pr.kappa2, pr.shrinkage, &mut rng);
            }
        }
    }

    pub fn update_variances(&mut self, state: &mut ModelState, iter: u64) -> SweepInfo {
        let pr = self.config.priors.clone();
        for w in [Which::Alpha, Which::Beta] {
            let wid = which_id(w);
            let mut rng = self.streams.rng(iter, block::VARIANCE, cell_key(&[wid]));
            let comp = state.component_mut(w);
            let n = comp.cores.len() as f64;
            let dims = comp.mean.dims().to_vec();
            let mut idx = vec![0usize; dims.len()];
            loop {
                let c = comp.mean.get(&idx);
                let ss: f64 = comp.cores.iter().map(|t| (t.get(&idx) - c).powi(2)).sum::<f64>() / comp.tau2;
                comp.cell_var.set(&idx, 1.0 / variance_gibbs(pr.a_s, pr.b_s, n, ss, &mut rng));
                if !increment(&mut idx, &dims) {
                    break;
                }
            }
            let mut ss = 0.0;
            for t in &comp.cores {
                for ((x, c), v) in t.values().iter().zip(comp.mean.values()).zip(comp.cell_var.values()) {
                    ss += (x - c).powi(2) / v;
                }
            }
            let count = n * comp.mean.len() as f64;
            comp.tau2 = 1.0 / variance_gibbs(pr.a_tau, pr.b_tau, count, ss, &mut rng);
        }
        let ss = residual_ss(state, &self.problem);
        let n = (self.problem.included_voxels() * self.problem.n_observations()) as f64;
        let mut rng = self.streams.rng(iter, block::VARIANCE, cell_key(&[2]));
        state.sigma2 = 1.0 / variance_gibbs(pr.a_eps, pr.b_eps, n, ss, &mut rng);
        let loglik = -0.5 * n * (2.0 * std::f64::consts::PI * state.sigma2).ln() - 0.5 * ss / state.sigma2;
        SweepInfo { loglik, ss }
    }
}

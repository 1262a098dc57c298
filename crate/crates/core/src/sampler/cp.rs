//! CP baseline: both components are sums of rank-one terms, each term scaled
//! by a scalar subject weight drawn around a population mean. Modes keep the
//! basis expansions, Laplacian priors and cumulative shrinkage of the Tucker
//! model but carry no orthogonality constraint.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::bases::{build_identity_bases, build_indicator_bases, build_temporal_bases, BasisSet};
use crate::config::{default_threads, SamplerConfig};
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::linalg::JitterLog;
use crate::model::{ModeState, GROUP, TIME};
use crate::priors::{shrinkage_gibbs_update, variance_gibbs, CanonicalGaussian, ColumnStat, ShrinkageChain, ShrinkageMode};
use crate::rng::{block, cell_key, normal, Streams};
use crate::tensor::{increment, DenseTensor};

use super::blocks::column_conditional_with;
use super::chain::{run_in_pool, write_meta, ChainOptions, ChainOutput, Draw, PopulationFactor, PosteriorDraws, TraceRecord, DRAWS_FILE, TRACE_FILE};
use super::init::{leading_vectors, pooled_estimates, spline_for};
use super::stats::Problem;
use super::sweep::{conditional_mean, draw, SweepInfo};

// sub-streams inside block::CP
const INIT: usize = 0;
const MODES: usize = 1;
const CORES: usize = 2;
const MEAN: usize = 3;
const SHRINK: usize = 4;
const VARIANCE: usize = 5;
const IMPUTE: usize = 6;

const ALS_ITERATIONS: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub struct CpComponent {
    /// `[group, x, y, z]` or `[group, x, y, z, time]`, all of depth one.
    pub modes: Vec<ModeState>,
    /// Subject weights, one per term.
    pub cores: Vec<DVector<f64>>,
    pub mean: DVector<f64>,
    pub cell_var: DVector<f64>,
    pub tau2: f64,
    pub mean_var: f64,
}

impl CpComponent {
    pub fn rank(&self) -> usize {
        self.mean.len()
    }

    fn grams(&self) -> Vec<DMatrix<f64>> {
        self.modes.iter().map(|m| m.gram()).collect()
    }

    /// Outer product of the spatial columns of term `z`.
    pub fn atom(&self, z: usize) -> DenseTensor {
        let c = |s: usize| self.modes[s].matrix.column(z).into_owned();
        let (a, b, e) = (c(1), c(2), c(3));
        DenseTensor::from_fn(&[a.len(), b.len(), e.len()], |i| a[i[0]] * b[i[1]] * e[i[2]])
    }

    pub fn atoms(&self) -> Vec<DenseTensor> {
        (0..self.rank()).map(|z| self.atom(z)).collect()
    }

    /// The population mean as a Tucker factor with a diagonal core.
    pub fn population(&self) -> PopulationFactor {
        let r = self.rank();
        let dims = vec![r; self.modes.len()];
        let core = DenseTensor::from_fn(&dims, |i| if i.iter().all(|&k| k == i[0]) { self.mean[i[0]] } else { 0.0 });
        PopulationFactor { core, modes: self.modes.iter().map(|m| m.matrix.clone()).collect() }
    }

    fn alpha_field(&self, atoms: &[DenseTensor], core: &DVector<f64>, g: usize) -> DenseTensor {
        let mut out = DenseTensor::zeros(atoms[0].dims());
        for (z, a) in atoms.iter().enumerate() {
            out.axpy(core[z] * self.modes[GROUP].matrix[(g, z)], a);
        }
        out
    }

    /// Spline-coefficient fields of a subject's `β`, one per spline.
    fn beta_fields(&self, atoms: &[DenseTensor], core: &DVector<f64>, g: usize) -> Vec<DenseTensor> {
        let et = &self.modes[TIME].matrix;
        (0..et.nrows())
            .map(|h| {
                let mut out = DenseTensor::zeros(atoms[0].dims());
                for (z, a) in atoms.iter().enumerate() {
                    out.axpy(core[z] * self.modes[GROUP].matrix[(g, z)] * et[(h, z)], a);
                }
                out
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CpState {
    pub alpha: CpComponent,
    pub beta: CpComponent,
    pub sigma2: f64,
}

impl CpState {
    pub fn draw(&self, iteration: usize) -> Draw {
        Draw {
            iteration,
            alpha: self.alpha.population(),
            beta: self.beta.population(),
            sigma2: self.sigma2,
            tau2: [self.alpha.tau2, self.beta.tau2],
        }
    }
}

/// `Σ_v t[v] ∏_{j≠s} cols[j][v_j]` as a vector over `v_s`.
fn contract_except(t: &DenseTensor, cols: [&DVector<f64>; 3], s: usize) -> DVector<f64> {
    let d = t.dims();
    let mut out = DVector::zeros(d[s]);
    let v = t.values();
    let mut p = 0;
    for i in 0..d[0] {
        for j in 0..d[1] {
            let wij = match s {
                0 => cols[1][j],
                1 => cols[0][i],
                _ => cols[0][i] * cols[1][j],
            };
            for k in 0..d[2] {
                match s {
                    0 => out[i] += v[p] * wij * cols[2][k],
                    1 => out[j] += v[p] * wij * cols[2][k],
                    _ => out[k] += v[p] * wij,
                }
                p += 1;
            }
        }
    }
    out
}

/// Product over the spatial modes except `skip` of `G_j[z, z2]`.
fn spatial_gram(grams: &[DMatrix<f64>], z: usize, z2: usize, skip: Option<usize>) -> f64 {
    (1..4).filter(|&j| Some(j) != skip).map(|j| grams[j][(z, z2)]).product()
}

/// Per-subject likelihood pieces for one component: pairwise term weights
/// `W_i` and per-term data projections `P_{i,z}`, so that the subject's
/// log-likelihood is `σ⁻²[Σ_z u_z⟨P_z, atom_z⟩ − ½ Σ u_z u_z' W_zz' ⟨atom_z, atom_z'⟩]`
/// with `u_z` the term weight times the group loading.
struct Pieces {
    weights: Vec<DMatrix<f64>>,
    proj: Vec<Vec<DenseTensor>>,
}

impl Pieces {
    fn proj(&self, i: usize, z: usize) -> &DenseTensor {
        let p = &self.proj[i];
        &p[z.min(p.len() - 1)]
    }
}

/// `β` targets: `U_i[h] = Σ_j B_jh y_j − (Bᵀ1)_h α_i`.
fn beta_targets(state: &CpState, problem: &Problem) -> Vec<Vec<DenseTensor>> {
    let atoms = state.alpha.atoms();
    problem
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let a = state.alpha.alpha_field(&atoms, &state.alpha.cores[i], s.group);
            s.yb
                .iter()
                .enumerate()
                .map(|(h, y)| {
                    let mut u = y.clone();
                    u.axpy(-s.bsum[h], &a);
                    u
                })
                .collect()
        })
        .collect()
}

fn alpha_pieces(state: &CpState, problem: &Problem) -> Pieces {
    let atoms = state.beta.atoms();
    let r = state.alpha.rank();
    let proj = problem
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut t = s.sum_y.clone();
            for (h, f) in state.beta.beta_fields(&atoms, &state.beta.cores[i], s.group).iter().enumerate() {
                t.axpy(-s.bsum[h], f);
            }
            vec![t]
        })
        .collect();
    let weights = problem.subjects.iter().map(|s| DMatrix::from_element(r, r, s.n_obs() as f64)).collect();
    Pieces { weights, proj }
}

fn beta_pieces(state: &CpState, problem: &Problem, targets: &[Vec<DenseTensor>]) -> Pieces {
    let et = &state.beta.modes[TIME].matrix;
    let weights = problem.subjects.iter().map(|s| et.transpose() * &s.btb * et).collect();
    let proj = targets
        .par_iter()
        .map(|u| {
            (0..et.ncols())
                .map(|z| {
                    let mut p = DenseTensor::zeros(u[0].dims());
                    for (h, uh) in u.iter().enumerate() {
                        p.axpy(et[(h, z)], uh);
                    }
                    p
                })
                .collect()
        })
        .collect();
    Pieces { weights, proj }
}

/// Residual sum of squares over included voxels.
pub fn cp_residual_ss(state: &CpState, problem: &Problem) -> f64 {
    let (aa, ab) = (state.alpha.atoms(), state.beta.atoms());
    let parts: Vec<f64> = problem
        .subjects
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let a = state.alpha.alpha_field(&aa, &state.alpha.cores[i], s.group);
            let f = state.beta.beta_fields(&ab, &state.beta.cores[i], s.group);
            let mut ss = 0.0;
            for (j, y) in s.obs.iter().enumerate() {
                let mut mu = a.clone();
                for (h, fh) in f.iter().enumerate() {
                    mu.axpy(s.design[(j, h)], fh);
                }
                for (k, (x, m)) in y.values().iter().zip(mu.values()).enumerate() {
                    if problem.mask.as_ref().is_none_or(|mk| mk[k]) {
                        ss += (x - m) * (x - m);
                    }
                }
            }
            ss
        })
        .collect();
    parts.iter().sum()
}

/// Gibbs sampler for the CP baseline.
pub struct CpGibbs {
    pub problem: Problem,
    pub config: SamplerConfig,
    pub streams: Streams,
    pub jitter: JitterLog,
    bases: [Vec<BasisSet>; 2],
}

fn mttkrp(t: &DenseTensor, a: &[DMatrix<f64>], n: usize) -> DMatrix<f64> {
    let dims = t.dims().to_vec();
    let r = a[0].ncols();
    let mut out = DMatrix::zeros(dims[n], r);
    let mut idx = vec![0usize; dims.len()];
    let mut w = vec![0.0; r];
    for &x in t.values() {
        if x != 0.0 {
            w.iter_mut().for_each(|v| *v = x);
            for (k, ak) in a.iter().enumerate().filter(|(k, _)| *k != n) {
                for (z, v) in w.iter_mut().enumerate() {
                    *v *= ak[(idx[k], z)];
                }
            }
            for (z, v) in w.iter().enumerate() {
                out[(idx[n], z)] += v;
            }
        }
        increment(&mut idx, &dims);
    }
    out
}

fn spd_solve(m: &DMatrix<f64>, rhs: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let ridge = 1e-10 * (m.trace() / n as f64).abs().max(1e-300);
    let reg = m + DMatrix::identity(n, n) * ridge;
    match reg.clone().cholesky() {
        Some(c) => c.solve(rhs),
        None => reg.pseudo_inverse(1e-12).expect("pseudo-inverse") * rhs,
    }
}

/// Alternating least squares for a rank-`r` CP fit of `t` whose mode `n`
/// columns lie in the span of `bases[n]`. Returns the basis coefficients
/// (`m × r`) of every mode, with the term scales carried by mode 0.
fn cp_als(t: &DenseTensor, bases: &[BasisSet], r: usize, rng: &mut impl Rng) -> Vec<DMatrix<f64>> {
    let order = bases.len();
    let project = |b: &BasisSet, a: &DMatrix<f64>| spd_solve(&(&b.g * b.g.transpose()), &(&b.g * a));
    let mut coef: Vec<DMatrix<f64>> = (0..order)
        .map(|n| {
            let mut a = leading_vectors(t, n, r);
            for z in 0..r {
                if a.column(z).norm() == 0.0 {
                    let c = DVector::from_fn(a.nrows(), |_, _| normal(rng));
                    let nrm = c.norm();
                    a.set_column(z, &(c / nrm));
                }
            }
            project(&bases[n], &a)
        })
        .collect();
    let mut mats: Vec<DMatrix<f64>> = coef.iter().zip(bases).map(|(c, b)| b.g.transpose() * c).collect();
    for _ in 0..ALS_ITERATIONS {
        for n in 0..order {
            let mut v = DMatrix::from_element(r, r, 1.0);
            for (_, a) in mats.iter().enumerate().filter(|(k, _)| *k != n) {
                v.component_mul_assign(&a.tr_mul(a));
            }
            let m = mttkrp(t, &mats, n);
            let unconstrained = spd_solve(&v, &m.transpose()).transpose();
            coef[n] = project(&bases[n], &unconstrained);
            mats[n] = bases[n].g.transpose() * &coef[n];
        }
        for n in 1..order {
            for z in 0..r {
                let nrm = mats[n].column(z).norm();
                if nrm > 0.0 {
                    coef[n].column_mut(z).scale_mut(1.0 / nrm);
                    mats[n].column_mut(z).scale_mut(1.0 / nrm);
                    coef[0].column_mut(z).scale_mut(nrm);
                    mats[0].column_mut(z).scale_mut(nrm);
                }
            }
        }
    }
    coef
}

fn fitted_shrinkage(basis: &BasisSet, coef: &DMatrix<f64>, mode: ShrinkageMode) -> ShrinkageChain {
    let m = basis.n_coefficients() as f64;
    let mut prev = 1.0;
    let increments = coef
        .column_iter()
        .map(|g| {
            let quad = (g.transpose() * &basis.precision * g)[(0, 0)];
            let sd = (quad / m).sqrt().max(1e-8);
            let p = match mode {
                ShrinkageMode::AsWritten => sd,
                ShrinkageMode::InverseScale => 1.0 / (sd * sd),
            };
            let inc = p / prev;
            prev = p;
            inc
        })
        .collect();
    ShrinkageChain { increments }
}

fn component_from(bases: &[BasisSet], coef: Vec<DMatrix<f64>>, n_subjects: usize, shrink: ShrinkageMode) -> CpComponent {
    let r = coef[0].ncols();
    let modes = bases
        .iter()
        .zip(coef)
        .map(|(b, c)| {
            let chain = fitted_shrinkage(b, &c, shrink);
            ModeState::new(b.clone(), 1, c.column_iter().map(|g| vec![g.into_owned()]).collect(), chain)
        })
        .collect();
    CpComponent {
        modes,
        cores: vec![DVector::from_element(r, 1.0); n_subjects],
        mean: DVector::from_element(r, 1.0),
        cell_var: DVector::from_element(r, 1e8),
        tau2: 1.0,
        mean_var: 1.0,
    }
}

impl CpGibbs {
    pub fn new(problem: Problem, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        // Laplacian prior directly on the column values; the spatial basis
        // settings only apply to the Tucker model
        let mut alpha = vec![build_identity_bases(problem.n_groups)];
        let mut beta = vec![build_identity_bases(problem.n_groups)];
        for &d in &problem.grid {
            alpha.push(build_indicator_bases(d)?);
            beta.push(build_indicator_bases(d)?);
        }
        beta.push(build_temporal_bases(&problem.spline)?);
        let streams = Streams::new(config.seed).child(block::CP);
        Ok(Self { problem, config, streams, jitter: JitterLog::default(), bases: [alpha, beta] })
    }

    fn rng(&self, iter: usize, parts: &[usize]) -> crate::rng::StreamRng {
        self.streams.rng(iter as u64, block::CP, cell_key(parts))
    }

    /// Basis-constrained CP-ALS on the pooled per-group fits, then
    /// conditional-mean passes over the subject weights.
    pub fn initialize(&mut self) -> Result<CpState> {
        let r = self.config.cp_rank;
        let shrink = self.config.priors.shrinkage;
        let (ta, tb) = pooled_estimates(&self.problem);
        let n = self.problem.n_subjects();
        let mut rng = self.rng(0, &[INIT]);
        let alpha = component_from(&self.bases[0], cp_als(&ta, &self.bases[0], r, &mut rng), n, shrink);
        let beta = component_from(&self.bases[1], cp_als(&tb, &self.bases[1], r, &mut rng), n, shrink);
        let mut state = CpState { alpha, beta, sigma2: 1.0 };
        for _ in 0..self.config.init_passes.max(1) {
            let pa = alpha_pieces(&state, &self.problem);
            state.alpha.cores = self.core_pass(&state.alpha, &pa, 1.0, None)?;
            let tg = beta_targets(&state, &self.problem);
            let pb = beta_pieces(&state, &self.problem, &tg);
            state.beta.cores = self.core_pass(&state.beta, &pb, 1.0, None)?;
        }
        for comp in [&mut state.alpha, &mut state.beta] {
            let nn = comp.cores.len() as f64;
            let mean = comp.cores.iter().fold(DVector::zeros(r), |acc, c| acc + c) / nn;
            let mut var = comp.cores.iter().fold(DVector::zeros(r), |acc, c| acc + (c - &mean).map(|x| x * x)) / nn;
            let floor = 1e-6 * (var.sum() / r as f64).max(1e-12);
            var.iter_mut().for_each(|v| *v = v.max(floor));
            comp.mean_var = (mean.norm_squared() / r as f64).max(1e-12);
            comp.mean = mean;
            comp.cell_var = var;
            comp.tau2 = 1.0;
        }
        let nobs = (self.problem.included_voxels() * self.problem.n_observations()) as f64;
        state.sigma2 = (cp_residual_ss(&state, &self.problem) / nobs).max(1e-12);
        check_state(&state, "cp initialization")?;
        Ok(state)
    }

    pub fn sweep(&mut self, state: &mut CpState, iter: usize) -> Result<SweepInfo> {
        self.impute(state, iter);
        let pa = alpha_pieces(state, &self.problem);
        self.update_modes(&mut state.alpha, &pa, state.sigma2, iter, 0)?;
        state.alpha.cores = self.core_pass(&state.alpha, &pa, state.sigma2, Some((iter, 0)))?;
        check_state(state, "cp alpha")?;
        let tg = beta_targets(state, &self.problem);
        let pb = beta_pieces(state, &self.problem, &tg);
        self.update_modes(&mut state.beta, &pb, state.sigma2, iter, 1)?;
        self.update_temporal(&mut state.beta, &tg, state.sigma2, iter)?;
        let pb = beta_pieces(state, &self.problem, &tg);
        state.beta.cores = self.core_pass(&state.beta, &pb, state.sigma2, Some((iter, 1)))?;
        check_state(state, "cp beta")?;
        self.update_hyper(state, iter);
        let ss = cp_residual_ss(state, &self.problem);
        let n = (self.problem.included_voxels() * self.problem.n_observations()) as f64;
        let pr = &self.config.priors;
        let mut rng = self.rng(iter, &[VARIANCE, 2]);
        state.sigma2 = 1.0 / variance_gibbs(pr.a_eps, pr.b_eps, n, ss, &mut rng);
        check_state(state, "cp variances")?;
        let loglik = -0.5 * n * (2.0 * std::f64::consts::PI * state.sigma2).ln() - 0.5 * ss / state.sigma2;
        Ok(SweepInfo { loglik, ss })
    }

    fn impute(&mut self, state: &CpState, iter: usize) {
        let Some(mask) = self.problem.mask.clone() else { return };
        let (aa, ab) = (state.alpha.atoms(), state.beta.atoms());
        let sigma = state.sigma2.sqrt();
        let streams = self.streams;
        self.problem.subjects.par_iter_mut().enumerate().for_each(|(i, s)| {
            let a = state.alpha.alpha_field(&aa, &state.alpha.cores[i], s.group);
            let f = state.beta.beta_fields(&ab, &state.beta.cores[i], s.group);
            for (j, y) in s.obs.iter_mut().enumerate() {
                let mut rng = streams.rng(iter as u64, block::CP, cell_key(&[IMPUTE, i, j]));
                let mut mu = a.clone();
                for (h, fh) in f.iter().enumerate() {
                    mu.axpy(s.design[(j, h)], fh);
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

    fn draw_column(&mut self, comp: &mut CpComponent, s: usize, z: usize, q: &DMatrix<f64>, b: &DVector<f64>, sigma2: f64, rng: &mut impl Rng) -> Result<()> {
        let mode = &comp.modes[s];
        let d = mode.grid_len();
        let scale = mode.shrink.scale(z, self.config.priors.shrinkage);
        let g = column_conditional_with(&mode.basis, &DVector::from_element(d, 1.0), q, b, sigma2, scale, &DMatrix::zeros(d, 0));
        let gamma = draw(&mut self.jitter, &g, "cp mode column", rng)?;
        comp.modes[s].coeffs[z][0] = gamma;
        comp.modes[s].refresh_column(z);
        Ok(())
    }

    /// Group and spatial modes, column by column.
    fn update_modes(&mut self, comp: &mut CpComponent, pieces: &Pieces, sigma2: f64, iter: usize, wid: usize) -> Result<()> {
        let groups = self.problem.groups();
        let r = comp.rank();
        let mut atoms = comp.atoms();
        for s in 0..4 {
            for z in 0..r {
                let grams = comp.grams();
                let ag = comp.modes[GROUP].matrix.clone();
                let d = comp.modes[s].grid_len();
                let skip = if s == GROUP { None } else { Some(s) };
                let cols: Vec<DVector<f64>> = (1..4).map(|j| comp.modes[j].matrix.column(z).into_owned()).collect();
                let parts: Vec<(DVector<f64>, DVector<f64>)> = groups
                    .par_iter()
                    .enumerate()
                    .map(|(i, &g)| {
                        let core = &comp.cores[i];
                        let w = &pieces.weights[i];
                        let mut q = DVector::zeros(d);
                        let mut b = DVector::zeros(d);
                        if s == GROUP {
                            q[g] = core[z] * core[z] * w[(z, z)] * spatial_gram(&grams, z, z, None);
                            let mut lin = core[z] * pieces.proj(i, z).dot(&atoms[z]);
                            for z2 in (0..r).filter(|&z2| z2 != z) {
                                lin -= core[z] * core[z2] * ag[(g, z2)] * w[(z, z2)] * spatial_gram(&grams, z, z2, None);
                            }
                            b[g] = lin;
                        } else {
                            let u = |k: usize| core[k] * ag[(g, k)];
                            let uz = u(z);
                            q.fill(uz * uz * w[(z, z)] * spatial_gram(&grams, z, z, skip));
                            b = contract_except(pieces.proj(i, z), [&cols[0], &cols[1], &cols[2]], s - 1) * uz;
                            for z2 in (0..r).filter(|&z2| z2 != z) {
                                let c = uz * u(z2) * w[(z, z2)] * spatial_gram(&grams, z, z2, skip);
                                b.axpy(-c, &comp.modes[s].matrix.column(z2), 1.0);
                            }
                        }
                        (q, b)
                    })
                    .collect();
                let (mut q, mut b) = (DVector::zeros(d), DVector::zeros(d));
                for (qi, bi) in &parts {
                    q += qi;
                    b += bi;
                }
                let mut rng = self.rng(iter, &[MODES, wid, s, z]);
                self.draw_column(comp, s, z, &DMatrix::from_diagonal(&q), &b, sigma2, &mut rng)?;
                if s != GROUP {
                    atoms[z] = comp.atom(z);
                }
            }
        }
        Ok(())
    }

    fn update_temporal(&mut self, comp: &mut CpComponent, targets: &[Vec<DenseTensor>], sigma2: f64, iter: usize) -> Result<()> {
        let r = comp.rank();
        let atoms = comp.atoms();
        let grams = comp.grams();
        let groups = self.problem.groups();
        let dt = comp.modes[TIME].grid_len();
        // ⟨U_i[h], atom_z⟩ does not depend on the temporal columns
        let cross: Vec<DMatrix<f64>> = targets
            .par_iter()
            .map(|u| DMatrix::from_fn(dt, r, |h, z| u[h].dot(&atoms[z])))
            .collect();
        for z in 0..r {
            let ag = &comp.modes[GROUP].matrix;
            let et = comp.modes[TIME].matrix.clone();
            let mut q = DMatrix::zeros(dt, dt);
            let mut b = DVector::zeros(dt);
            for (i, (s, &g)) in self.problem.subjects.iter().zip(&groups).enumerate() {
                let core = &comp.cores[i];
                let u = |k: usize| core[k] * ag[(g, k)];
                let uz = u(z);
                q += &s.btb * (uz * uz * spatial_gram(&grams, z, z, None));
                let mut bi = cross[i].column(z).into_owned();
                for z2 in (0..r).filter(|&z2| z2 != z) {
                    bi -= &s.btb * et.column(z2) * (u(z2) * spatial_gram(&grams, z, z2, None));
                }
                b.axpy(uz, &bi, 1.0);
            }
            let mut rng = self.rng(iter, &[MODES, 1, TIME, z]);
            self.draw_column(comp, TIME, z, &q, &b, sigma2, &mut rng)?;
        }
        Ok(())
    }

    /// Subject weights, drawn jointly per subject (or set to their
    /// conditional means when `draw_at` is `None`).
    fn core_pass(&mut self, comp: &CpComponent, pieces: &Pieces, sigma2: f64, draw_at: Option<(usize, usize)>) -> Result<Vec<DVector<f64>>> {
        let r = comp.rank();
        let atoms = comp.atoms();
        let grams = comp.grams();
        let groups = self.problem.groups();
        let ag = &comp.modes[GROUP].matrix;
        let prior_var = comp.cell_var.map(|v| v * comp.tau2);
        let results: Vec<(Result<DVector<f64>>, u64)> = groups
            .par_iter()
            .enumerate()
            .map(|(i, &g)| {
                let w = &pieces.weights[i];
                let mut precision =
                    DMatrix::from_fn(r, r, |z, z2| ag[(g, z)] * ag[(g, z2)] * w[(z, z2)] * spatial_gram(&grams, z, z2, None) / sigma2);
                let mut linear = DVector::from_fn(r, |z, _| ag[(g, z)] * pieces.proj(i, z).dot(&atoms[z]) / sigma2);
                for z in 0..r {
                    precision[(z, z)] += 1.0 / prior_var[z];
                    linear[z] += comp.mean[z] / prior_var[z];
                }
                let cg = CanonicalGaussian { precision, linear, constraint: None };
                let mut jitter = JitterLog::default();
                let out = match draw_at {
                    Some((iter, wid)) => {
                        let mut rng = self.streams.rng(iter as u64, block::CP, cell_key(&[CORES, wid, i]));
                        draw(&mut jitter, &cg, "cp subject weights", &mut rng)
                    }
                    None => conditional_mean(&mut jitter, &cg, "cp subject weights"),
                };
                (out, jitter.total)
            })
            .collect();
        let mut cores = Vec::with_capacity(results.len());
        for (c, j) in results {
            self.jitter.total += j;
            cores.push(c?);
        }
        Ok(cores)
    }

    fn update_hyper(&mut self, state: &mut CpState, iter: usize) {
        let pr = self.config.priors.clone();
        for (wid, comp) in [&mut state.alpha, &mut state.beta].into_iter().enumerate() {
            let r = comp.rank();
            let n = comp.cores.len() as f64;
            let mut rng = self.streams.rng(iter as u64, block::CP, cell_key(&[MEAN, wid]));
            for z in 0..r {
                let pv = comp.tau2 * comp.cell_var[z];
                let p = n / pv + 1.0 / comp.mean_var;
                let h = comp.cores.iter().map(|c| c[z]).sum::<f64>() / pv;
                comp.mean[z] = h / p + normal(&mut rng) / p.sqrt();
            }
            comp.mean_var = 1.0 / variance_gibbs(pr.a_mean, pr.b_mean, r as f64, comp.mean.norm_squared(), &mut rng);
            for (s, mode) in comp.modes.iter_mut().enumerate() {
                let m = mode.basis.n_coefficients();
                let stats: Vec<ColumnStat> = mode
                    .coeffs
                    .iter()
                    .map(|c| ColumnStat { dim: m, quad: (c[0].transpose() * &mode.basis.precision * &c[0])[(0, 0)] })
                    .collect();
                let mut rng = self.streams.rng(iter as u64, block::CP, cell_key(&[SHRINK, wid, s]));
                mode.shrink = shrinkage_gibbs_update(&mode.shrink, &stats, pr.kappa1, pr.kappa2, pr.shrinkage, &mut rng);
            }
            let mut rng = self.streams.rng(iter as u64, block::CP, cell_key(&[VARIANCE, wid]));
            for z in 0..r {
                let ss = comp.cores.iter().map(|c| (c[z] - comp.mean[z]).powi(2)).sum::<f64>() / comp.tau2;
                comp.cell_var[z] = 1.0 / variance_gibbs(pr.a_s, pr.b_s, n, ss, &mut rng);
            }
            let ss: f64 = comp
                .cores
                .iter()
                .map(|c| (0..r).map(|z| (c[z] - comp.mean[z]).powi(2) / comp.cell_var[z]).sum::<f64>())
                .sum();
            comp.tau2 = 1.0 / variance_gibbs(pr.a_tau, pr.b_tau, n * r as f64, ss, &mut rng);
        }
    }
}

fn check_state(state: &CpState, block: &str) -> Result<()> {
    let ok = [&state.alpha, &state.beta].iter().all(|c| {
        c.cores.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && c.mean.iter().all(|x| x.is_finite())
            && c.cell_var.iter().all(|x| x.is_finite())
            && c.modes.iter().all(|m| m.matrix.iter().all(|x| x.is_finite()))
            && c.tau2.is_finite()
            && c.mean_var.is_finite()
    }) && state.sigma2.is_finite();
    if ok {
        Ok(())
    } else {
        Err(Error::numerical(block, "non-finite value in CP state"))
    }
}

/// Fits the CP baseline at rank `config.cp_rank`, writing draws, trace and
/// metadata to `opts.out_dir` when given. Checkpoints are not written.
pub fn run_cp_baseline(data: &LongitudinalDataset, config: &SamplerConfig, opts: &ChainOptions) -> Result<ChainOutput> {
    let threads = config.threads.unwrap_or_else(default_threads);
    run_in_pool(threads, || run_cp_inner(data, config, opts))
}

fn run_cp_inner(data: &LongitudinalDataset, config: &SamplerConfig, opts: &ChainOptions) -> Result<ChainOutput> {
    config.validate()?;
    let problem = Problem::new(data, spline_for(config)?)?;
    let snapshot = problem.clone();
    let mut g = CpGibbs::new(problem, config.clone())?;
    let mut state = g.initialize()?;
    let mut draws = PosteriorDraws { grid: data.grid, n_groups: data.n_groups, spline: g.problem.spline.clone(), draws: Vec::new() };
    let dir = opts.out_dir.clone();
    let mut trace_file = match &dir {
        Some(d) => {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
            let path = d.join(TRACE_FILE);
            Some((std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };
    let mut trace = Vec::new();
    let r = config.cp_rank;
    let every = config.progress_every.max(1);
    for iter in 0..config.iterations {
        let info = g.sweep(&mut state, iter)?;
        if iter >= config.burn_in && (iter + 1 - config.burn_in) % config.thin == 0 {
            draws.draws.push(state.draw(iter));
        }
        let rec = TraceRecord { iteration: iter, loglik: info.loglik, sigma_eps: state.sigma2.sqrt(), ranks_alpha: vec![r; 4], ranks_beta: vec![r; 5] };
        if let Some((f, path)) = trace_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&rec).expect("json")).map_err(|e| Error::io(&*path, e))?;
        }
        if opts.verbose && (iter + 1) % every == 0 {
            eprintln!("iteration {:>6}  loglik {:>14.3}  sigma_eps {:.5}", iter + 1, rec.loglik, rec.sigma_eps);
        }
        trace.push(rec);
    }
    if let Some(d) = &dir {
        draws.save(d.join(DRAWS_FILE))?;
        write_meta(d, config, &snapshot, config.iterations, draws.len(), g.jitter.total, true)?;
    }
    Ok(ChainOutput { draws, trace, jitter_total: g.jitter.total })
}

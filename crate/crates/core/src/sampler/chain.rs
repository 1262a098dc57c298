//! Chain driver, retained draws, trace records and checkpoints.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bases::SplineBasis;
use crate::config::{default_threads, SamplerConfig};
use crate::container::Container;
use crate::data::LongitudinalDataset;
use crate::error::{Error, Result};
use crate::model::{alpha_surface, beta_derivative_surface, beta_surface, Component, ModeState, ModelState};
use crate::priors::ShrinkageChain;
use crate::tensor::DenseTensor;

use super::init::{build_bases, initialize, spline_for, ModeBases};
use super::stats::Problem;
use super::sweep::{Gibbs, SweepInfo};

pub const DRAWS_FILE: &str = "draws.ltck";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ltck";
pub const META_FILE: &str = "meta.json";
pub const FAILURE_FILE: &str = "failure.ltck";

/// Population-level factor of one component: mean core and mode matrices
/// (temporal mode expanded to all `d_t` spline coefficients).
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFactor {
    pub core: DenseTensor,
    pub modes: Vec<DMatrix<f64>>,
}

impl PopulationFactor {
    pub fn from_component(c: &Component) -> Self {
        Self { core: c.mean.clone(), modes: c.matrices() }
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.modes.iter().map(|m| m.ncols()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub iteration: usize,
    pub alpha: PopulationFactor,
    pub beta: PopulationFactor,
    pub sigma2: f64,
    pub tau2: [f64; 2],
}

impl Draw {
    pub fn from_state(state: &ModelState, iteration: usize) -> Self {
        Self {
            iteration,
            alpha: PopulationFactor::from_component(&state.alpha),
            beta: PopulationFactor::from_component(&state.beta),
            sigma2: state.sigma2,
            tau2: [state.alpha.tau2, state.beta.tau2],
        }
    }
}

/// Retained draws with what is needed to evaluate surfaces from them.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub grid: [usize; 3],
    pub n_groups: usize,
    pub spline: SplineBasis,
    pub draws: Vec<Draw>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DrawsMeta {
    grid: [usize; 3],
    n_groups: usize,
    spline_degree: usize,
    n_temporal_bases: usize,
    iterations: Vec<usize>,
}

fn matrix_blob(m: &DMatrix<f64>) -> DenseTensor {
    DenseTensor::from_fn(&[m.nrows(), m.ncols()], |i| m[(i[0], i[1])])
}

fn blob_matrix(t: &DenseTensor) -> Result<DMatrix<f64>> {
    if t.order() != 2 {
        return Err(Error::Dims(format!("expected a matrix blob, got dims {:?}", t.dims())));
    }
    Ok(DMatrix::from_row_slice(t.dims()[0], t.dims()[1], t.values()))
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn alpha(&self, d: &Draw, h_g: usize) -> DenseTensor {
        alpha_surface(&d.alpha.core, &d.alpha.modes, h_g)
    }

    pub fn beta(&self, d: &Draw, h_g: usize, t: f64) -> Result<DenseTensor> {
        beta_surface(&d.beta.core, &d.beta.modes, &self.spline, h_g, t)
    }

    pub fn beta_derivative(&self, d: &Draw, h_g: usize, t: f64) -> Result<DenseTensor> {
        beta_derivative_surface(&d.beta.core, &d.beta.modes, &self.spline, h_g, t)
    }

    /// Posterior mean of the group-level `β` surface at `t`.
    pub fn beta_mean(&self, h_g: usize, t: f64) -> Result<DenseTensor> {
        let mut acc = DenseTensor::zeros(&self.grid);
        for d in &self.draws {
            acc.axpy(1.0 / self.draws.len() as f64, &self.beta(d, h_g, t)?);
        }
        Ok(acc)
    }

    pub fn to_container(&self) -> Container {
        let meta = DrawsMeta {
            grid: self.grid,
            n_groups: self.n_groups,
            spline_degree: self.spline.degree(),
            n_temporal_bases: self.spline.len(),
            iterations: self.draws.iter().map(|d| d.iteration).collect(),
        };
        let mut c = Container::new(serde_json::to_value(meta).expect("meta serializes"));
        for (n, d) in self.draws.iter().enumerate() {
            for (name, f) in [("alpha", &d.alpha), ("beta", &d.beta)] {
                c.put(format!("draw/{n}/{name}/core"), f.core.clone());
                for (s, m) in f.modes.iter().enumerate() {
                    c.put(format!("draw/{n}/{name}/mode{s}"), matrix_blob(m));
                }
            }
            c.put_scalars(format!("draw/{n}/scalars"), &[d.sigma2, d.tau2[0], d.tau2[1]]);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: DrawsMeta =
            serde_json::from_value(c.meta.clone()).map_err(|e| Error::Data(format!("draws manifest: {e}")))?;
        let spline = SplineBasis::new(meta.spline_degree, meta.n_temporal_bases)?;
        let mut draws = Vec::with_capacity(meta.iterations.len());
        for (n, &iteration) in meta.iterations.iter().enumerate() {
            let factor = |name: &str, k: usize| -> Result<PopulationFactor> {
                let core = c.get(&format!("draw/{n}/{name}/core"))?.clone();
                let modes =
                    (0..k).map(|s| blob_matrix(c.get(&format!("draw/{n}/{name}/mode{s}"))?)).collect::<Result<Vec<_>>>()?;
                Ok(PopulationFactor { core, modes })
            };
            let sc = c.scalars(&format!("draw/{n}/scalars"))?;
            draws.push(Draw { iteration, alpha: factor("alpha", 4)?, beta: factor("beta", 5)?, sigma2: sc[0], tau2: [sc[1], sc[2]] });
        }
        Ok(Self { grid: meta.grid, n_groups: meta.n_groups, spline, draws })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// One line of `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub loglik: f64,
    pub sigma_eps: f64,
    pub ranks_alpha: Vec<usize>,
    pub ranks_beta: Vec<usize>,
}

impl TraceRecord {
    fn new(iteration: usize, info: &SweepInfo, state: &ModelState) -> Self {
        Self {
            iteration,
            loglik: info.loglik,
            sigma_eps: state.sigma2.sqrt(),
            ranks_alpha: state.alpha.ranks(),
            ranks_beta: state.beta.ranks(),
        }
    }
}

fn component_blobs(c: &mut Container, name: &str, comp: &Component) {
    for (s, m) in comp.modes.iter().enumerate() {
        let r = m.rank();
        let depth = m.depth;
        let len = m.basis.n_coefficients();
        c.put(
            format!("{name}/mode{s}/coeffs"),
            DenseTensor::from_fn(&[r.max(1), depth, len], |i| if r == 0 { 0.0 } else { m.coeffs[i[0]][i[1]][i[2]] }),
        );
        c.put_scalars(format!("{name}/mode{s}/shrink"), &m.shrink.increments);
    }
    for (i, core) in comp.cores.iter().enumerate() {
        c.put(format!("{name}/core/{i}"), core.clone());
    }
    c.put(format!("{name}/mean"), comp.mean.clone());
    c.put(format!("{name}/cell_var"), comp.cell_var.clone());
    c.put_scalars(format!("{name}/scalars"), &[comp.tau2, comp.mean_var]);
}

fn component_from_blobs(c: &Container, name: &str, bases: &[(crate::bases::BasisSet, usize)], n_subjects: usize) -> Result<Component> {
    let mut modes = Vec::with_capacity(bases.len());
    for (s, (basis, depth)) in bases.iter().enumerate() {
        let t = c.get(&format!("{name}/mode{s}/coeffs"))?;
        let dims = t.dims();
        if dims[1] != *depth || dims[2] != basis.n_coefficients() {
            return Err(Error::Dims(format!("{name} mode {s}: stored coefficients {dims:?} do not match the configured basis")));
        }
        let coeffs = (0..dims[0])
            .map(|l| (0..dims[1]).map(|k| nalgebra::DVector::from_fn(dims[2], |m, _| t.get(&[l, k, m]))).collect())
            .collect();
        let shrink = ShrinkageChain { increments: c.scalars(&format!("{name}/mode{s}/shrink"))?.to_vec() };
        modes.push(ModeState::new(basis.clone(), *depth, coeffs, shrink));
    }
    let cores = (0..n_subjects).map(|i| c.get(&format!("{name}/core/{i}")).cloned()).collect::<Result<Vec<_>>>()?;
    let sc = c.scalars(&format!("{name}/scalars"))?;
    let comp = Component {
        modes,
        cores,
        mean: c.get(&format!("{name}/mean"))?.clone(),
        cell_var: c.get(&format!("{name}/cell_var"))?.clone(),
        tau2: sc[0],
        mean_var: sc[1],
    };
    comp.check_shapes()?;
    Ok(comp)
}

/// Writes every state field into a container.
pub fn state_container(state: &ModelState, meta: serde_json::Value) -> Container {
    let mut c = Container::new(meta);
    component_blobs(&mut c, "alpha", &state.alpha);
    component_blobs(&mut c, "beta", &state.beta);
    c.put_scalars("sigma2", &[state.sigma2]);
    c
}

pub fn state_from_container(c: &Container, bases: &ModeBases, spline: &SplineBasis, groups: &[usize]) -> Result<ModelState> {
    Ok(ModelState {
        alpha: component_from_blobs(c, "alpha", &bases.alpha, groups.len())?,
        beta: component_from_blobs(c, "beta", &bases.beta, groups.len())?,
        sigma2: c.scalars("sigma2")?[0],
        spline: spline.clone(),
        groups: groups.to_vec(),
    })
}

/// Sampler plus its bases, ready to initialize and sweep.
pub struct Chain {
    pub gibbs: Gibbs,
    pub bases: ModeBases,
}

impl Chain {
    pub fn new(data: &LongitudinalDataset, config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        let spline = spline_for(&config)?;
        let problem = Problem::new(data, spline)?;
        Self::from_problem(problem, config)
    }

    pub fn from_problem(problem: Problem, config: SamplerConfig) -> Result<Self> {
        let bases = build_bases(problem.grid, problem.n_groups, &problem.spline, &config)?;
        Ok(Self { gibbs: Gibbs::new(problem, config), bases })
    }

    pub fn initialize(&mut self) -> Result<ModelState> {
        initialize(&mut self.gibbs, &self.bases)
    }

    pub fn sweep(&mut self, state: &mut ModelState, iter: usize) -> Result<SweepInfo> {
        self.gibbs.sweep(state, iter as u64)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.gibbs.config
    }

    pub fn problem(&self) -> &Problem {
        &self.gibbs.problem
    }

    pub fn empty_draws(&self) -> PosteriorDraws {
        let p = self.problem();
        PosteriorDraws { grid: p.grid, n_groups: p.n_groups, spline: p.spline.clone(), draws: Vec::new() }
    }

    /// Runs sweeps `start..iterations` from `state`, retaining thinned
    /// post-burn-in draws and calling `on_sweep` after each sweep.
    pub fn run_from(
        &mut self,
        state: &mut ModelState,
        start: usize,
        draws: &mut PosteriorDraws,
        mut on_sweep: impl FnMut(&TraceRecord, &ModelState, &PosteriorDraws) -> Result<()>,
    ) -> Result<()> {
        let (iterations, burn_in, thin) = (self.config().iterations, self.config().burn_in, self.config().thin);
        for iter in start..iterations {
            let info = self.sweep(state, iter)?;
            if iter >= burn_in && (iter + 1 - burn_in) % thin == 0 {
                draws.draws.push(Draw::from_state(state, iter));
            }
            on_sweep(&TraceRecord::new(iter, &info, state), state, draws)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct ChainOptions {
    pub out_dir: Option<PathBuf>,
    /// Continue from `checkpoint.ltck` in `out_dir` when present.
    pub resume: bool,
    /// Checkpoint every this many sweeps (0: only at the end).
    pub checkpoint_every: usize,
    /// Print progress to stderr every `progress_every` sweeps.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub draws: PosteriorDraws,
    pub trace: Vec<TraceRecord>,
    pub jitter_total: u64,
}

fn checkpoint(state: &ModelState, draws: &PosteriorDraws, next_iter: usize) -> Container {
    let mut c = state_container(state, serde_json::json!({ "next_iteration": next_iter }));
    for (k, v) in draws.to_container().blobs {
        c.put(format!("draws/{k}"), v);
    }
    c.meta["draws"] = draws.to_container().meta;
    c
}

fn draws_from_checkpoint(c: &Container) -> Result<PosteriorDraws> {
    let mut d = Container::new(c.meta["draws"].clone());
    for (k, v) in &c.blobs {
        if let Some(rest) = k.strip_prefix("draws/") {
            d.put(rest, v.clone());
        }
    }
    PosteriorDraws::from_container(&d)
}

fn read_trace(path: &Path, before: usize) -> Result<Vec<TraceRecord>> {
    let f = match std::fs::File::open(path) {
        Ok(f) => f,
        Err(_) => return Ok(Vec::new()),
    };
    let mut out = Vec::new();
    for line in std::io::BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: TraceRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })?;
        if r.iteration < before {
            out.push(r);
        }
    }
    Ok(out)
}

pub(super) fn write_meta(dir: &Path, config: &SamplerConfig, problem: &Problem, done: usize, n_draws: usize, jitter: u64, complete: bool) -> Result<()> {
    let meta = serde_json::json!({
        "config": config,
        "grid": problem.grid,
        "n_groups": problem.n_groups,
        "n_subjects": problem.n_subjects(),
        "n_observations": problem.n_observations(),
        "iterations_completed": done,
        "n_draws": n_draws,
        "jitter_total": jitter,
        "complete": complete,
    });
    let path = dir.join(META_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&meta).expect("json")).map_err(|e| Error::io(&path, e))
}

pub(super) fn run_in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

/// Fits the model to `data`, writing draws, trace, checkpoint and metadata to
/// `opts.out_dir` when given.
pub fn run_chain(data: &LongitudinalDataset, config: &SamplerConfig, opts: &ChainOptions) -> Result<ChainOutput> {
    let threads = config.threads.unwrap_or_else(default_threads);
    run_in_pool(threads, || run_chain_inner(data, config, opts))
}

fn run_chain_inner(data: &LongitudinalDataset, config: &SamplerConfig, opts: &ChainOptions) -> Result<ChainOutput> {
    let mut chain = Chain::new(data, config.clone())?;
    let dir = opts.out_dir.clone();
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let ckpt_path = dir.as_ref().map(|d| d.join(CHECKPOINT_FILE));
    let (mut state, start, mut draws, mut trace) = match (&ckpt_path, opts.resume) {
        (Some(p), true) if p.exists() => {
            let c = Container::read(p)?;
            let state = state_from_container(&c, &chain.bases, &chain.problem().spline, &chain.problem().groups())?;
            let start = c.meta["next_iteration"].as_u64().ok_or_else(|| Error::Data("checkpoint lacks next_iteration".into()))? as usize;
            let draws = draws_from_checkpoint(&c)?;
            let trace = read_trace(&dir.as_ref().expect("dir").join(TRACE_FILE), start)?;
            (state, start, draws, trace)
        }
        _ => (chain.initialize()?, 0, chain.empty_draws(), Vec::new()),
    };
    let mut trace_file = match &dir {
        Some(d) => {
            let path = d.join(TRACE_FILE);
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            for r in &trace {
                writeln!(f, "{}", serde_json::to_string(r).expect("json")).map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let progress_every = config.progress_every.max(1);
    let every = opts.checkpoint_every;
    let verbose = opts.verbose;
    let problem_snapshot = chain.problem().clone();
    let result = chain.run_from(&mut state, start, &mut draws, |rec, st, dr| {
        if let Some((f, path)) = trace_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(rec).expect("json")).map_err(|e| Error::io(&*path, e))?;
        }
        trace.push(rec.clone());
        if verbose && (rec.iteration + 1) % progress_every == 0 {
            eprintln!(
                "iteration {:>6}  loglik {:>14.3}  sigma_eps {:.5}  ranks {:?} {:?}",
                rec.iteration + 1,
                rec.loglik,
                rec.sigma_eps,
                rec.ranks_alpha,
                rec.ranks_beta
            );
        }
        if let (Some(p), true) = (&ckpt_path, every > 0 && (rec.iteration + 1) % every == 0) {
            checkpoint(st, dr, rec.iteration + 1).write(p)?;
        }
        Ok(())
    });
    if let Err(e) = result {
        if let Some(d) = &dir {
            let _ = state_container(&state, serde_json::json!({ "error": e.to_string() })).write(d.join(FAILURE_FILE));
        }
        return Err(e);
    }
    if let Some(d) = &dir {
        checkpoint(&state, &draws, config.iterations).write(d.join(CHECKPOINT_FILE))?;
        draws.save(d.join(DRAWS_FILE))?;
        write_meta(d, config, &problem_snapshot, config.iterations, draws.len(), chain.gibbs.jitter.total, true)?;
    }
    Ok(ChainOutput { draws, trace, jitter_total: chain.gibbs.jitter.total })
}

/// Draws stored in a chain directory.
pub fn load_draws(dir: impl AsRef<Path>) -> Result<PosteriorDraws> {
    PosteriorDraws::load(dir.as_ref().join(DRAWS_FILE))
}

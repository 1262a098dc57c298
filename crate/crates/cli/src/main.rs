use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ltucker::config::{default_threads, ConfigFile};
use ltucker::data::{load_dataset, save_dataset, RegionMask};
use ltucker::datagen::{generate_dataset, load_truth, save_truth, Truth};
use ltucker::metrics::{self, Band, Reducer, SummaryRequest};
use ltucker::oracle::{conditional_oracle, run_sbc, SbcSettings};
use ltucker::sampler::{load_draws, run_chain, run_cp_baseline, ChainOptions, PosteriorDraws};
use ltucker::{ltf, Error};

const ORACLE_TOLERANCE: f64 = 1e-8;
const SBC_ALPHA: f64 = 0.01;

#[derive(Parser)]
#[command(name = "ltucker", version, about = "Bayesian orthogonal-Tucker longitudinal mixed models")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Overrides the seed from the spec or config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "LTUCKER_THREADS")]
    threads: Option<usize>,
    /// Print progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Simulate {
        /// TOML file with a [simulation] table.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the Tucker model.
    Fit(FitArgs),
    /// Fit the CP baseline.
    FitCp(FitArgs),
    /// Posterior trajectory quantiles as CSV.
    Summarize {
        #[arg(long)]
        chain: PathBuf,
        /// TOML summary request; defaults apply when omitted.
        #[arg(long)]
        request: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Integer label volume (LTF) for region summaries.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// CSV with columns id,name naming the mask labels.
        #[arg(long)]
        region_names: Option<PathBuf>,
        /// Voxel reducer, overriding the request.
        #[arg(long, value_enum)]
        reducer: Option<ReducerArg>,
    },
    /// MSE, arc length and cross-group differences against a simulation truth.
    Metrics {
        #[arg(long)]
        chain: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        t_points: usize,
    },
    /// Dense-conditioning and calibration self-checks on small instances.
    OracleCheck {
        #[arg(long, default_value_t = 200)]
        replications: usize,
        /// JSON report destination.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FitArgs {
    /// Dataset manifest CSV.
    #[arg(long)]
    data: PathBuf,
    /// TOML file with a [sampler] table; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReducerArg {
    Median,
    Mean,
}

enum Failure {
    Engine(Error),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Engine(e)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain { .. } | Error::Lookup(_) | Error::Capability(_) | Error::Rank { .. } => 2,
        Error::Data(_) | Error::DataRow { .. } | Error::Format { .. } | Error::Io { .. } | Error::Dims(_) | Error::Shape { .. } => 3,
        Error::Numerical { .. } | Error::NotPositiveDefinite(_) | Error::RankDeficient { .. } | Error::Constraint(_) => 4,
    }
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, Error> {
    path.map_or_else(|| Ok(ConfigFile::default()), ConfigFile::load)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> Result<T, Failure> + Send) -> Result<T, Failure> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or_else(default_threads).max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>, Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
}

fn csv_error(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format { path: path.to_path_buf(), msg: e.to_string() }
}

fn simulate(common: &Common, spec: &Path, out: &Path) -> Result<(), Failure> {
    let mut sim = load_config(Some(spec))?.simulation;
    if let Some(s) = common.seed {
        sim.seed = s;
    }
    let (ds, truth) = with_pool(common.threads, || Ok(generate_dataset(&sim)?))?;
    let manifest = save_dataset(&ds, out)?;
    save_truth(&truth, out)?;
    if common.verbose {
        eprintln!("wrote {} subjects, {} scans to {}", ds.n_subjects(), ds.n_observations(), manifest.display());
    }
    Ok(())
}

fn fit(common: &Common, args: &FitArgs, cp: bool) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?.sampler;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if common.threads.is_some() {
        config.threads = common.threads;
    }
    config.validate()?;
    let data = load_dataset(&args.data)?;
    let opts = ChainOptions {
        out_dir: Some(args.out.clone()),
        resume: args.resume,
        checkpoint_every: args.checkpoint_every,
        verbose: common.verbose,
    };
    let out = if cp { run_cp_baseline(&data, &config, &opts)? } else { run_chain(&data, &config, &opts)? };
    if common.verbose {
        let last = out.trace.last().map_or(f64::NAN, |r| r.sigma_eps);
        eprintln!("kept {} draws, final sigma_eps {last:.5}, jitter events {}", out.draws.len(), out.jitter_total);
    }
    Ok(())
}

fn load_mask(mask: Option<&Path>, names: Option<&Path>) -> Result<Option<RegionMask>, Error> {
    let Some(mask) = mask else { return Ok(None) };
    let volume = ltf::read_labels(mask)?;
    let table: BTreeMap<i32, String> = match names {
        Some(p) => {
            let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(p).map_err(csv_error(p))?;
            r.deserialize::<(i32, String)>().collect::<Result<_, _>>().map_err(csv_error(p))?
        }
        None => volume.labels.iter().filter(|&&l| l != 0).map(|&l| (l, l.to_string())).collect(),
    };
    Ok(Some(RegionMask::new(volume, table)?))
}

fn check_mask(draws: &PosteriorDraws, mask: Option<&RegionMask>) -> Result<(), Error> {
    match mask {
        Some(m) if m.dims != draws.grid => {
            Err(Error::Dims(format!("mask dims {:?} do not match chain grid {:?}", m.dims, draws.grid)))
        }
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct CgdRow<'a> {
    group1: usize,
    group2: usize,
    region: &'a str,
    mean: f64,
    q05: f64,
    q50: f64,
    q95: f64,
}

fn summarize(common: &Common, chain: &Path, request: Option<&Path>, out: &Path, mask: Option<RegionMask>, reducer: Option<ReducerArg>) -> Result<(), Failure> {
    let mut req: SummaryRequest = match request {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SummaryRequest::default(),
    };
    if let Some(r) = reducer {
        req.reducer = match r {
            ReducerArg::Median => Reducer::Median,
            ReducerArg::Mean => Reducer::Mean,
        };
    }
    req.validate()?;
    let draws = load_draws(chain)?;
    check_mask(&draws, mask.as_ref())?;
    for &[a, b] in &req.group_pairs {
        if a == 0 || b == 0 || a > draws.n_groups || b > draws.n_groups {
            return Err(Error::Config(format!("group pair ({a}, {b}) outside 1..={}", draws.n_groups)).into());
        }
    }
    let (rows, cgd_rows) = with_pool(common.threads, || {
        let rows = metrics::summarize(&draws, &req, mask.as_ref())?;
        let mut cgd_rows = Vec::new();
        for (name, sel) in metrics::regions(&req, mask.as_ref())? {
            for &[a, b] in &req.group_pairs {
                cgd_rows.push((a, b, name.clone(), metrics::cgd(&draws, a - 1, b - 1, req.t_points, sel.as_deref())?));
            }
        }
        Ok((rows, cgd_rows))
    })?;
    let mut w = csv_writer(out)?;
    let err = csv_error(out);
    let mut header = vec!["group".to_string(), "region".to_string(), "time".to_string()];
    header.extend(req.quantiles.iter().map(|&q| SummaryRequest::column(q)));
    w.write_record(&header).map_err(&err)?;
    for r in &rows {
        let mut rec = vec![r.group.to_string(), r.region.clone(), r.time.to_string()];
        rec.extend(r.quantiles.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    if !cgd_rows.is_empty() {
        let path = out.with_file_name(format!("{}_cgd.csv", out.file_stem().and_then(|s| s.to_str()).unwrap_or("summary")));
        let mut w = csv_writer(&path)?;
        for (a, b, region, band) in &cgd_rows {
            w.serialize(CgdRow { group1: *a, group2: *b, region, mean: band.mean, q05: band.q05, q50: band.q50, q95: band.q95 }).map_err(csv_error(&path))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    metric: &'static str,
    group1: Option<usize>,
    group2: Option<usize>,
    mean: f64,
    q05: Option<f64>,
    q50: Option<f64>,
    q95: Option<f64>,
    truth: Option<f64>,
}

impl MetricRow {
    fn band(metric: &'static str, g1: usize, g2: Option<usize>, b: Band, truth: f64) -> Self {
        Self { metric, group1: Some(g1 + 1), group2: g2.map(|g| g + 1), mean: b.mean, q05: Some(b.q05), q50: Some(b.q50), q95: Some(b.q95), truth: Some(truth) }
    }

    fn scalar(metric: &'static str, v: f64) -> Self {
        Self { metric, group1: None, group2: None, mean: v, q05: None, q50: None, q95: None, truth: None }
    }
}

fn truth_arc_length(truth: &Truth, g: usize, t_points: usize) -> Result<f64, Error> {
    // β = c·t²·v, so ∂β/∂t = 2t·β(·, 1)
    let at_one = truth.beta(g, 1.0);
    metrics::arc_length_of(
        |t| {
            let mut d = at_one.clone();
            d.scale(2.0 * t);
            Ok(d)
        },
        t_points,
        None,
    )
}

fn metric_rows(draws: &PosteriorDraws, truth: &Truth, t_points: usize) -> Result<Vec<MetricRow>, Error> {
    if draws.grid != truth.spec.grid || draws.n_groups != truth.spec.groups {
        return Err(Error::Dims("chain and truth describe different designs".into()));
    }
    let mse = metrics::mse_from_draws(draws, truth, t_points)?;
    let mut rows = vec![MetricRow::scalar("mse_nonzero", mse.nonzero), MetricRow::scalar("mse_zero", mse.zero)];
    for g in 0..draws.n_groups {
        let b = metrics::arc_length(draws, g, t_points, None)?;
        rows.push(MetricRow::band("arc_length", g, None, b, truth_arc_length(truth, g, t_points)?));
    }
    for g1 in 0..draws.n_groups {
        for g2 in g1 + 1..draws.n_groups {
            let b = metrics::cgd(draws, g1, g2, t_points, None)?;
            let t = metrics::cgd_of(|t| Ok(truth.beta(g1, t)), |t| Ok(truth.beta(g2, t)), t_points, None)?;
            rows.push(MetricRow::band("cgd", g1, Some(g2), b, t));
        }
    }
    Ok(rows)
}

fn metrics_cmd(common: &Common, chain: &Path, truth: &Path, out: &Path, t_points: usize) -> Result<(), Failure> {
    if t_points == 0 {
        return Err(Error::Config("t_points must be positive".into()).into());
    }
    let draws = load_draws(chain)?;
    let truth = load_truth(truth)?;
    let rows = with_pool(common.threads, || Ok(metric_rows(&draws, &truth, t_points)?))?;
    let mut w = csv_writer(out)?;
    for r in &rows {
        w.serialize(r).map_err(csv_error(out))?;
    }
    w.flush().map_err(|e| Error::io(out, e))?;
    Ok(())
}

fn oracle_check(common: &Common, replications: usize, out: Option<&Path>) -> Result<(), Failure> {
    let seed = common.seed.unwrap_or(5);
    let settings = SbcSettings { replications, seed, ..SbcSettings::default() };
    let (cond, sbc) = with_pool(common.threads, || Ok((conditional_oracle(seed)?, run_sbc(&settings)?)))?;
    let worst = cond.worst().map(|c| c.block.as_str()).unwrap_or("none");
    println!("dense conditioning: {} blocks, max relative error {:.3e} ({worst})", cond.checks.len(), cond.max_error());
    for (name, p) in sbc.functionals.iter().zip(&sbc.p_values) {
        println!("calibration {name}: p = {p:.4}");
    }
    if let Some(path) = out {
        let report = serde_json::json!({ "conditional": cond, "calibration": sbc, "settings": settings });
        std::fs::write(path, serde_json::to_string_pretty(&report).expect("json")).map_err(|e| Error::io(path, e))?;
    }
    let mut problems = Vec::new();
    if !(cond.max_error() < ORACLE_TOLERANCE) {
        problems.push(format!("conditional error {:.3e} in {worst}", cond.max_error()));
    }
    if !(sbc.min_p() > SBC_ALPHA) {
        problems.push(format!("calibration p-value {:.4} at or below {SBC_ALPHA}", sbc.min_p()));
    }
    if problems.is_empty() {
        println!("oracle-check passed");
        Ok(())
    } else {
        Err(Failure::Oracle(problems.join("; ")))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    if c.threads == Some(0) {
        return Err(Error::Config("--threads must be at least 1".into()).into());
    }
    match &cli.command {
        Command::Simulate { spec, out } => simulate(c, spec, out),
        Command::Fit(args) => fit(c, args, false),
        Command::FitCp(args) => fit(c, args, true),
        Command::Summarize { chain, request, out, mask, region_names, reducer } => {
            let mask = load_mask(mask.as_deref(), region_names.as_deref())?;
            summarize(c, chain, request.as_deref(), out, mask, *reducer)
        }
        Command::Metrics { chain, truth, out, t_points } => metrics_cmd(c, chain, truth, out, *t_points),
        Command::OracleCheck { replications, out } => oracle_check(c, *replications, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Engine(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
        Err(Failure::Oracle(msg)) => {
            eprintln!("oracle-check failed: {msg}");
            ExitCode::from(5)
        }
    }
}

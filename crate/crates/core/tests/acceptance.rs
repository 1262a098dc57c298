//! Acceptance suite. Each criterion prints one PASS/FAIL line; the test
//! asserts at the end so every line is reported even when one fails.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ltucker::bases::SplineBasis;
use ltucker::config::{SamplerConfig, SimulationSpec, SpatialBasis};
use ltucker::datagen::generate_dataset;
use ltucker::metrics::{arc_length, cgd, mse_from_draws, MseReport};
use ltucker::model::{eval_alpha, eval_beta, principal_residuals, Target, Which, GROUP, TIME};
use ltucker::oracle::{conditional_oracle, run_sbc, small_config, small_instance, SbcSettings};
use ltucker::priors::{sample_constrained_mvn, sample_constrained_mvn_dense, CanonicalGaussian, GaussianForm};
use ltucker::rng::Streams;
use ltucker::sampler::{run_chain, run_cp_baseline, ChainOptions, Draw, PosteriorDraws};
use ltucker::tensor::{reconstruct, tucker_to_hosvd, DenseTensor, DomainKind, ModeMatrix, TuckerFactor};

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

struct Suite(Vec<Outcome>);

impl Suite {
    fn record(&mut self, id: usize, name: &'static str, limit: Duration, f: impl FnOnce() -> (bool, String)) {
        let t = Instant::now();
        let (ok, detail) = f();
        let elapsed = t.elapsed();
        let pass = ok && elapsed <= limit;
        let timing = if elapsed <= limit { String::new() } else { format!(" [over time limit {limit:?}]") };
        println!(
            "{} criterion {id} ({name}): {detail}{timing} ({:.1} s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
        self.0.push(Outcome { id, name, pass, detail });
    }
}

fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
}

// 1

fn hosvd_round_trip() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst_rec, mut worst_diag) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..=10)).collect();
        let ranks: Vec<usize> = dims.iter().map(|&d| rng.random_range(1..=d.min(4))).collect();
        let core = DenseTensor::from_fn(&ranks, |_| rng.random::<f64>() * 2.0 - 1.0);
        let modes = dims.iter().zip(&ranks).map(|(&d, &r)| ModeMatrix::new(random_matrix(&mut rng, d, r), DomainKind::Spatial)).collect();
        let f = TuckerFactor::new(core, modes).unwrap();
        let h = tucker_to_hosvd(&f).unwrap();
        let (a, b) = (reconstruct(&f).unwrap(), reconstruct(&h).unwrap());
        let diff: f64 = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.values().iter().map(|x| x * x).sum::<f64>().sqrt();
        worst_rec = worst_rec.max(diff / norm);
        for m in &h.modes {
            let g = m.entries.transpose() * &m.entries;
            let dmax = g.diagonal().amax();
            for i in 0..g.nrows() {
                for j in (0..g.ncols()).filter(|&j| j != i) {
                    worst_diag = worst_diag.max(g[(i, j)].abs() / dmax);
                }
            }
        }
    }
    (worst_rec <= 1e-10 && worst_diag <= 1e-8, format!("max reconstruction error {worst_rec:.2e}, max off-diagonal {worst_diag:.2e}"))
}

// 2

fn spline_contract() -> (bool, String) {
    let mut worst = 0.0f64;
    for q in 1..=3 {
        let s = SplineBasis::new(q, 8).unwrap();
        for l in 0..1000 {
            let t = l as f64 / 999.0;
            worst = worst.max((s.eval(t).unwrap().sum() - 1.0).abs());
        }
    }
    let b = SplineBasis::new(2, 6).unwrap().eval(0.0).unwrap();
    let boundary = b[0] == 0.5 && b[1] == 0.5 && b.iter().skip(2).all(|&v| v == 0.0);
    (worst <= 1e-12 && boundary, format!("partition of unity error {worst:.2e}, q=2 values at t=0 = ({}, {})", b[0], b[1]))
}

// 3

fn random_spd(rng: &mut impl Rng, n: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

fn analytic_conditional(mu: &DVector<f64>, s: &DMatrix<f64>, a: &DMatrix<f64>, c: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sa = s * a.transpose();
    let w = (a * &sa).try_inverse().unwrap();
    (mu + &sa * &w * (c - a * mu), s - &sa * &w * sa.transpose())
}

fn moments(draws: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = draws.len() as f64;
    let mean = draws.iter().fold(DVector::zeros(draws[0].len()), |acc, x| acc + x) / n;
    let cov = draws.iter().fold(DMatrix::zeros(mean.len(), mean.len()), |acc, x| {
        let d = x - &mean;
        acc + &d * d.transpose()
    }) / (n - 1.0);
    (mean, cov)
}

/// Largest deviation of the empirical moments in units of their standard errors.
fn z_scores(draws: &[DVector<f64>], mu: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
    let n = draws.len() as f64;
    let (m, c) = moments(draws);
    let mut worst = 0.0f64;
    for i in 0..mu.len() {
        worst = worst.max((m[i] - mu[i]).abs() / (s[(i, i)] / n).sqrt().max(1e-12));
        for j in 0..mu.len() {
            let se = ((s[(i, i)] * s[(j, j)] + s[(i, j)].powi(2)) / n).sqrt().max(1e-12);
            worst = worst.max((c[(i, j)] - s[(i, j)]).abs() / se);
        }
    }
    worst
}

fn constrained_law() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_z, mut worst_res) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(3..=8);
        let k = rng.random_range(1..=3.min(n - 1));
        let mu = DVector::from_fn(n, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let s = random_spd(&mut rng, n);
        let a = random_matrix(&mut rng, k, n);
        let c = DVector::from_fn(k, |_, _| rng.random::<f64>() - 0.5);
        let (mc, sc) = analytic_conditional(&mu, &s, &a, &c);
        let p = s.clone().try_inverse().unwrap();
        let g = CanonicalGaussian { linear: &p * &mu, precision: p, constraint: Some((a.clone(), c.clone())) }.prepare().unwrap();
        let draws: Vec<DVector<f64>> = (0..200_000).map(|_| g.sample(&mut rng)).collect();
        for x in &draws {
            worst_res = worst_res.max((&a * x - &c).amax());
        }
        worst_z = worst_z.max(z_scores(&draws, &mc, &sc));
    }
    // banded against dense on tridiagonal precisions
    let mut worst_band = 0.0f64;
    for case in 0..3 {
        let n = 50;
        let p = DMatrix::from_fn(n, n, |i, j| match i.abs_diff(j) {
            0 => 2.0 + 0.1 * case as f64,
            1 => -0.9,
            _ => 0.0,
        });
        let mu = DVector::from_fn(n, |i, _| (i as f64 / 7.0).sin());
        let a = random_matrix(&mut rng, 2, n);
        let c = DVector::from_vec(vec![0.3, -0.2]);
        let form = GaussianForm::Precision(p.clone());
        let banded: Vec<DVector<f64>> = (0..20_000).map(|_| sample_constrained_mvn(&mu, &form, &a, &c, &mut rng).unwrap()).collect();
        let dense: Vec<DVector<f64>> = (0..20_000).map(|_| sample_constrained_mvn_dense(&mu, &form, &a, &c, &mut rng).unwrap()).collect();
        let (mb, cb) = moments(&banded);
        let (md, cd) = moments(&dense);
        for i in 0..n {
            let se_m = ((cb[(i, i)] + cd[(i, i)]) / 20_000.0).sqrt();
            let se_v = ((2.0 * cb[(i, i)].powi(2) + 2.0 * cd[(i, i)].powi(2)) / 20_000.0).sqrt();
            worst_band = worst_band.max((mb[i] - md[i]).abs() / se_m).max((cb[(i, i)] - cd[(i, i)]).abs() / se_v);
        }
        for x in banded.iter().chain(&dense) {
            worst_res = worst_res.max((&a * x - &c).amax());
        }
    }
    (
        worst_z <= 4.0 && worst_res <= 1e-10 && worst_band <= 4.5,
        format!("max moment deviation {worst_z:.2} SE, max constraint residual {worst_res:.1e}, banded vs dense {worst_band:.2} SE"),
    )
}

// 4

fn dense_oracle() -> (bool, String) {
    let r = conditional_oracle(5).unwrap();
    let w = r.worst().unwrap();
    (r.max_error() <= 1e-8, format!("{} blocks, max relative error {:.2e} in {}", r.checks.len(), r.max_error(), w.block))
}

// 5

fn calibration() -> (bool, String) {
    let r = run_sbc(&SbcSettings::default()).unwrap();
    let (i, p) = r.p_values.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap();
    (r.min_p() > 0.01, format!("200 replications, smallest p = {p:.4} ({})", r.functionals[i]))
}

// 6, 8, 9

struct Fits {
    gls: PosteriorDraws,
    mse: Vec<(&'static str, MseReport)>,
}

fn design_config(basis: SpatialBasis, threads: usize) -> SamplerConfig {
    let mut c = SamplerConfig { seed: 8, threads: Some(threads), ..SamplerConfig::default() };
    c.priors.alpha_spatial.basis = basis;
    c.priors.beta_spatial.basis = basis;
    c
}

fn fit_design() -> Fits {
    let (data, truth) = generate_dataset(&SimulationSpec::default()).unwrap();
    let opts = ChainOptions::default();
    let gls = run_chain(&data, &design_config(SpatialBasis::Gaussian, 8), &opts).unwrap().draws;
    let glns = run_chain(&data, &design_config(SpatialBasis::Indicator, 8), &opts).unwrap().draws;
    let mut mse = vec![("GLS", mse_from_draws(&gls, &truth, 20).unwrap()), ("GLNS", mse_from_draws(&glns, &truth, 20).unwrap())];
    for (name, r) in [("CP-5", 5), ("CP-10", 10)] {
        let c = SamplerConfig { cp_rank: r, ..design_config(SpatialBasis::Gaussian, 8) };
        let d = run_cp_baseline(&data, &c, &opts).unwrap().draws;
        mse.push((name, mse_from_draws(&d, &truth, 20).unwrap()));
    }
    Fits { gls, mse }
}

fn table_three(f: &Fits) -> (bool, String) {
    let get = |n: &str| f.mse.iter().find(|(m, _)| *m == n).unwrap().1;
    let (gls, glns) = (get("GLS"), get("GLNS"));
    let best_cp = get("CP-5").nonzero.min(get("CP-10").nonzero);
    let a = gls.nonzero <= 0.05;
    let b = gls.nonzero * 10.0 <= best_cp;
    let c = gls.zero <= glns.zero;
    let table: Vec<String> = f.mse.iter().map(|(n, m)| format!("{n} {:.4}/{:.4}", m.nonzero, m.zero)).collect();
    (a && b && c, format!("nonzero/zero MSE: {}; (a) {a} (b) {b} (c) {c}", table.join(", ")))
}

fn determinism(f: &Fits) -> (bool, String) {
    let (data, _) = generate_dataset(&SimulationSpec::default()).unwrap();
    let one = run_chain(&data, &design_config(SpatialBasis::Gaussian, 1), &ChainOptions::default()).unwrap().draws;
    let same = one == f.gls;
    (same, format!("{} draws at 1 worker {} the 8-worker run", one.len(), if same { "bitwise equal" } else { "differ from" }))
}

// 7

fn decorrelation() -> (bool, String) {
    let config = small_config(17);
    let streams = Streams::new(17);
    let (state, _) = small_instance([5, 5, 5], 2, 2, &config, &streams, 10).unwrap();
    let n = 10_000;
    let sd = state.sigma2.sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (i, t) = (1, 0.6);
    let g = state.groups[i];
    let mut mean = eval_alpha(&state, Target::Subject(i), g).unwrap();
    mean.add_assign(&eval_beta(&state, Target::Subject(i), g, t).unwrap());
    let mut cells: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
    for _ in 0..n {
        let mut y = mean.clone();
        for v in y.values_mut() {
            *v += sd * ltucker::rng::normal(&mut rng);
        }
        for (w, which) in [Which::Alpha, Which::Beta].into_iter().enumerate() {
            cells[w].push(principal_residuals(&state, which, i, &y, t).unwrap().into_values());
        }
    }
    let bound = 4.0 / (n as f64).sqrt();
    let (mut worst_corr, mut worst_var) = (0.0f64, 0.0f64);
    for samples in &cells {
        let k = samples[0].len();
        let mean: Vec<f64> = (0..k).map(|a| samples.iter().map(|s| s[a]).sum::<f64>() / n as f64).collect();
        let cov = |a: usize, b: usize| samples.iter().map(|s| (s[a] - mean[a]) * (s[b] - mean[b])).sum::<f64>() / (n - 1) as f64;
        for a in 0..k {
            worst_var = worst_var.max((cov(a, a) / state.sigma2 - 1.0).abs());
            for b in a + 1..k {
                worst_corr = worst_corr.max((cov(a, b) / (cov(a, a) * cov(b, b)).sqrt()).abs());
            }
        }
    }
    (
        worst_corr < bound && worst_var <= 0.05,
        format!("max |corr| {worst_corr:.4} (bound {bound:.4}), max relative variance error {worst_var:.4}"),
    )
}

// 8

fn loop_beta(d: &Draw, spline_values: &DVector<f64>, h_g: usize, v: [usize; 3]) -> f64 {
    let core = &d.beta.core;
    let m = &d.beta.modes;
    let r = core.dims();
    let mut total = 0.0;
    for zg in 0..r[0] {
        for z1 in 0..r[1] {
            for z2 in 0..r[2] {
                for z3 in 0..r[3] {
                    for zt in 0..r[4] {
                        let w: f64 = (0..spline_values.len()).map(|j| spline_values[j] * m[TIME][(j, zt)]).sum();
                        total += core.get(&[zg, z1, z2, z3, zt])
                            * m[GROUP][(h_g, zg)]
                            * m[1][(v[0], z1)]
                            * m[2][(v[1], z2)]
                            * m[3][(v[2], z3)]
                            * w;
                    }
                }
            }
        }
    }
    total
}

fn loop_metrics(draws: &PosteriorDraws, t_points: usize) -> (Vec<f64>, Vec<f64>) {
    let g = draws.grid;
    let nvox = (g[0] * g[1] * g[2]) as f64;
    let mut arcs = vec![0.0; draws.n_groups];
    let mut gaps = vec![0.0; 3];
    for d in &draws.draws {
        for l in 1..=t_points {
            let t = l as f64 / t_points as f64;
            let db = draws.spline.derivative(t).unwrap();
            let b = draws.spline.eval(t).unwrap();
            for x in 0..g[0] {
                for y in 0..g[1] {
                    for z in 0..g[2] {
                        for (h, arc) in arcs.iter_mut().enumerate() {
                            *arc += loop_beta(d, &db, h, [x, y, z]).abs();
                        }
                        for (p, (a, c)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
                            gaps[p] += (loop_beta(d, &b, a, [x, y, z]) - loop_beta(d, &b, c, [x, y, z])).powi(2);
                        }
                    }
                }
            }
        }
    }
    let denom = t_points as f64 * nvox * draws.len() as f64;
    (arcs.into_iter().map(|a| a / denom).collect(), gaps.into_iter().map(|a| a / denom).collect())
}

fn metric_oracles(f: &Fits) -> (bool, String) {
    // loop oracle on a random prior state over a 6³ grid
    let mut config = small_config(21);
    config.ranks.beta = [2, 2, 2, 2, 3];
    config.n_temporal_bases = 6;
    let states: Vec<_> = (0..3)
        .map(|k| small_instance([6, 6, 6], 3, 3, &config, &Streams::new(100 + k), 5).unwrap().0)
        .collect();
    let draws = PosteriorDraws {
        grid: [6, 6, 6],
        n_groups: 3,
        spline: states[0].spline.clone(),
        draws: states.iter().enumerate().map(|(k, s)| Draw::from_state(s, k)).collect(),
    };
    let (arcs, gaps) = loop_metrics(&draws, 20);
    let mut worst = 0.0f64;
    for h in 0..3 {
        let a = arc_length(&draws, h, 20, None).unwrap().mean;
        worst = worst.max((a - arcs[h]).abs() / arcs[h].abs().max(1e-300));
    }
    for (p, (a, c)) in [(0, 1), (0, 2), (1, 2)].into_iter().enumerate() {
        let v = cgd(&draws, a, c, 20, None).unwrap().mean;
        worst = worst.max((v - gaps[p]).abs() / gaps[p].abs().max(1e-300));
    }
    // orderings on the fitted design
    let arc: Vec<f64> = (0..3).map(|h| arc_length(&f.gls, h, 20, None).unwrap().mean).collect();
    let c12 = cgd(&f.gls, 0, 1, 20, None).unwrap().mean;
    let c13 = cgd(&f.gls, 0, 2, 20, None).unwrap().mean;
    let c23 = cgd(&f.gls, 1, 2, 20, None).unwrap().mean;
    let arc_order = arc[0] < arc[1] && arc[1] < arc[2];
    let cgd_order = c13 > c12 && c13 > c23;
    (
        worst <= 1e-10 && arc_order && cgd_order,
        format!(
            "max relative deviation from loop oracle {worst:.2e}; Arc {:.3} < {:.3} < {:.3}: {arc_order}; CGD(1,3) {c13:.3} > CGD(1,2) {c12:.3}, CGD(2,3) {c23:.3}: {cgd_order}",
            arc[0], arc[1], arc[2]
        ),
    )
}

#[test]
fn acceptance() {
    let mut s = Suite(Vec::new());
    let secs = Duration::from_secs;
    s.record(1, "HOSVD round trip", secs(5), hosvd_round_trip);
    s.record(2, "B-spline contract", secs(1), spline_contract);
    s.record(3, "constrained sampler law", secs(120), constrained_law);
    s.record(4, "full-conditional oracle", secs(60), dense_oracle);
    s.record(5, "simulation-based calibration", secs(1800), calibration);
    let mut fits = None;
    s.record(6, "desk-scale MSE table", secs(3600), || {
        let f = fit_design();
        let r = table_three(&f);
        fits = Some(f);
        r
    });
    let fits = fits.expect("design fitted");
    s.record(7, "principal-component decorrelation", secs(120), decorrelation);
    s.record(8, "metric oracles and orderings", secs(120), || metric_oracles(&fits));
    s.record(9, "thread-count determinism", secs(3600), || determinism(&fits));
    let failed: Vec<String> = s.0.iter().filter(|o| !o.pass).map(|o| format!("{} ({}): {}", o.id, o.name, o.detail)).collect();
    assert!(failed.is_empty(), "failed criteria:\n{}", failed.join("\n"));
}

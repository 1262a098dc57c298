use ltucker::config::{SamplerConfig, SimulationSpec};
use ltucker::datagen::generate_dataset;
use ltucker::metrics::{mse_from_draws, mse_report};
use ltucker::sampler::{run_chain, ChainOptions};
use ltucker::tensor::DenseTensor;

fn small_spec() -> SimulationSpec {
    SimulationSpec { grid: [8, 8, 8], groups: 2, subjects_per_group: 8, noise_sd: 0.3, seed: 3, ..Default::default() }
}

fn small_config() -> SamplerConfig {
    let mut c = SamplerConfig {
        iterations: 160,
        burn_in: 80,
        thin: 2,
        seed: 11,
        threads: Some(2),
        n_temporal_bases: 5,
        init_passes: 5,
        ..Default::default()
    };
    c.ranks.alpha = [2, 3, 3, 3];
    c.ranks.beta = [2, 3, 3, 3, 3];
    c
}

#[test]
fn chain_beats_the_zero_estimate() {
    let (data, truth) = generate_dataset(&small_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let opts = ChainOptions { out_dir: Some(dir.path().to_path_buf()), ..Default::default() };
    let out = run_chain(&data, &small_config(), &opts).unwrap();
    assert_eq!(out.draws.len(), 40);
    let fit = mse_from_draws(&out.draws, &truth, 10).unwrap();
    let zero = mse_report(|_, _| Ok(DenseTensor::zeros(&[8, 8, 8])), &truth, 10).unwrap();
    assert!(fit.nonzero < 0.5 * zero.nonzero);
}

#[test]
fn cp_baseline_runs_and_fits() {
    let (data, truth) = generate_dataset(&small_spec()).unwrap();
    let mut cfg = small_config();
    cfg.cp_rank = 4;
    let out = ltucker::sampler::run_cp_baseline(&data, &cfg, &ChainOptions::default()).unwrap();
    let fit = mse_from_draws(&out.draws, &truth, 10).unwrap();
    let zero = mse_report(|_, _| Ok(DenseTensor::zeros(&[8, 8, 8])), &truth, 10).unwrap();
    assert!(fit.nonzero < zero.nonzero);
    let again = ltucker::sampler::run_cp_baseline(&data, &cfg, &ChainOptions::default()).unwrap();
    assert_eq!(again.draws, out.draws);
}

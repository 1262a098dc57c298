use ltucker::config::{SamplerConfig, SimulationSpec};
use ltucker::data::{load_dataset, save_dataset};
use ltucker::datagen::{active_bumps, generate_dataset, load_truth, save_truth, simulate_from_state, true_beta_surface};
use ltucker::metrics::{arc_length, cgd};
use ltucker::model::{eval_alpha, eval_beta, principal_residuals, Target, Which};
use ltucker::oracle::{small_config, small_instance};
use ltucker::rng::Streams;
use ltucker::sampler::{run_chain, ChainOptions};
use proptest::prelude::*;

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

#[test]
fn true_surface_vanishes_at_baseline_and_grows_with_group() {
    let spec = SimulationSpec { grid: [8, 8, 8], ..Default::default() };
    for g in 0..spec.groups {
        assert_eq!(max_abs(true_beta_surface(&spec, g, 0.0).values()), 0.0);
    }
    assert!(active_bumps(0) < active_bumps(1) && active_bumps(1) < active_bumps(2));
    let norms: Vec<f64> = (0..3).map(|g| true_beta_surface(&spec, g, 1.0).dot(&true_beta_surface(&spec, g, 1.0))).collect();
    assert!(norms[0] < norms[1] && norms[1] < norms[2]);
}

#[test]
fn dataset_and_truth_survive_a_disk_round_trip() {
    let spec = SimulationSpec { grid: [8, 8, 8], groups: 2, subjects_per_group: 3, seed: 9, ..Default::default() };
    let (data, truth) = generate_dataset(&spec).unwrap();
    let (again, _) = generate_dataset(&spec).unwrap();
    assert_eq!(data, again);
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_dataset(&data, dir.path()).unwrap();
    save_truth(&truth, dir.path()).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), data);
    assert_eq!(load_truth(dir.path()).unwrap(), truth);
}

#[test]
fn noiseless_data_has_zero_principal_residuals() {
    let config = small_config(4);
    let streams = Streams::new(4);
    let (mut state, _) = small_instance([4, 4, 4], 2, 4, &config, &streams, 20).unwrap();
    state.sigma2 = 0.0;
    let times = vec![vec![0.0, 0.5, 0.9]; 4];
    let data = simulate_from_state(&state, &times, &Streams::new(5)).unwrap();
    for (i, s) in data.subjects.iter().enumerate() {
        let a = eval_alpha(&state, Target::Subject(i), s.group).unwrap();
        let b = eval_beta(&state, Target::Subject(i), s.group, 0.5).unwrap();
        let scale = max_abs(a.values()) + max_abs(b.values());
        let r0 = principal_residuals(&state, Which::Alpha, i, &s.observations[0], 0.0).unwrap();
        let r1 = principal_residuals(&state, Which::Beta, i, &s.observations[1], 0.5).unwrap();
        assert!(max_abs(r0.values()) < 1e-10 * scale);
        assert!(max_abs(r1.values()) < 1e-10 * scale);
    }
}

fn resume_config(iterations: usize) -> SamplerConfig {
    let mut c = SamplerConfig {
        iterations,
        burn_in: 10,
        thin: 2,
        seed: 21,
        threads: Some(2),
        n_temporal_bases: 5,
        init_passes: 3,
        ..Default::default()
    };
    c.ranks.alpha = [2, 2, 2, 2];
    c.ranks.beta = [2, 2, 2, 2, 2];
    c
}

#[test]
fn resumed_chain_matches_uninterrupted_chain() {
    let spec = SimulationSpec { grid: [8, 8, 8], groups: 2, subjects_per_group: 3, seed: 2, ..Default::default() };
    let (data, _) = generate_dataset(&spec).unwrap();
    let full = run_chain(&data, &resume_config(30), &ChainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let opts = ChainOptions { out_dir: Some(dir.path().to_path_buf()), checkpoint_every: 10, ..Default::default() };
    run_chain(&data, &resume_config(20), &opts).unwrap();
    let resumed = run_chain(&data, &resume_config(30), &ChainOptions { resume: true, ..opts }).unwrap();

    assert_eq!(full.draws.len(), 10);
    assert_eq!(resumed.draws.draws, full.draws.draws);
    assert_eq!(resumed.trace.len(), 30);
}

#[test]
fn metric_bands_are_symmetric_and_vanish_on_the_diagonal() {
    let spec = SimulationSpec { grid: [8, 8, 8], groups: 2, subjects_per_group: 3, seed: 6, ..Default::default() };
    let (data, _) = generate_dataset(&spec).unwrap();
    let out = run_chain(&data, &resume_config(20), &ChainOptions::default()).unwrap();
    let same = cgd(&out.draws, 1, 1, 20, None).unwrap();
    assert_eq!(same.q95, 0.0);
    let ab = cgd(&out.draws, 0, 1, 20, None).unwrap();
    let ba = cgd(&out.draws, 1, 0, 20, None).unwrap();
    assert_eq!(ab, ba);
    let arc = arc_length(&out.draws, 0, 20, None).unwrap();
    assert!(arc.q05 >= 0.0 && arc.q05 <= arc.q50 && arc.q50 <= arc.q95);
    assert!(cgd(&out.draws, 0, 2, 20, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulated_visits_start_at_baseline_and_increase(seed in 0u64..1000) {
        let spec = SimulationSpec { grid: [8, 8, 8], groups: 2, subjects_per_group: 2, seed, ..Default::default() };
        let (data, _) = generate_dataset(&spec).unwrap();
        data.validate().unwrap();
        for s in &data.subjects {
            prop_assert_eq!(s.times[0], 0.0);
            prop_assert!(s.times.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.times.iter().all(|t| (0.0..=1.0).contains(t)));
            prop_assert_eq!(s.observations.len(), s.times.len());
        }
    }
}

use ltucker::oracle::{conditional_oracle, run_sbc, uniformity_p_value, SbcSettings};

#[test]
fn every_block_matches_dense_conditioning() {
    let report = conditional_oracle(5).unwrap();
    let worst = report.worst().unwrap();
    assert!(report.max_error() < 1e-8, "{worst:?}");
}

#[test]
fn uniform_ranks_pass_and_piled_ranks_fail() {
    let flat: Vec<usize> = (0..200).map(|i| i % 10).collect();
    assert!(uniformity_p_value(&flat, 10) > 0.99);
    let piled = vec![0usize; 200];
    assert!(uniformity_p_value(&piled, 10) < 1e-10);
}

#[test]
fn short_calibration_run_produces_ranks() {
    let s = SbcSettings { replications: 4, draws: 3, thin: 2, prior_sweeps: 3, ..SbcSettings::default() };
    let r = run_sbc(&s).unwrap();
    assert_eq!(r.ranks.len(), 10);
    assert!(r.ranks.iter().all(|v| v.len() == 4 && v.iter().all(|&x| x <= 3)));
}

#[test]
fn dense_check_flags_non_orthogonal_modes() {
    use ltucker::oracle::{check_conditionals, small_config, small_instance};
    use ltucker::rng::Streams;
    use ltucker::sampler::Chain;
    let config = small_config(5);
    let (mut state, data) = small_instance([3, 3, 3], 2, 4, &config, &Streams::new(5), 5).unwrap();
    let mode = &mut state.alpha.modes[1];
    mode.coeffs[1][0] = &mode.coeffs[1][0] + &mode.coeffs[0][0] * 0.5;
    mode.refresh();
    let chain = Chain::new(&data, config.clone()).unwrap();
    let report = check_conditionals(&state, chain.problem(), &config).unwrap();
    let core_errors = report.checks.iter().filter(|c| c.block.starts_with("alpha core")).map(|c| c.mean_error.max(c.cov_error));
    let e = core_errors.fold(0.0, f64::max);
    assert!(e > 1e-6, "{e}");
}

//! Simulation-level distributional checks that sit between the unit tests
//! and the acceptance suite.

use carate_core::estimators::{DfMode, EstimatorSpec, MissingnessChoice, RegressionKind, Scope};
use carate_core::missing::process_cc;
use carate_core::randomize::RandomizationScheme;
use carate_core::sim::{generate, run_monte_carlo, DgpSpec, OutcomeModel, Study};

fn study(model: OutcomeModel, n: usize, pi: f64, p_total: usize, seed: u64) -> Study {
    let block = if (pi - 0.5).abs() < 1e-12 { 4 } else { 6 };
    let mut spec = DgpSpec::new(
        model,
        n,
        pi,
        RandomizationScheme::stratified_block(pi, block),
        seed,
    );
    spec.p_total = p_total;
    Study::prepare_with_draws(spec, 200_000, 400_000).unwrap()
}

#[test]
fn tom_and_lin_gap_shrinks_with_sample_size() {
    // The weighted and interacted adjustments agree asymptotically: the
    // median of sqrt(n) |tau_T - tau_L| falls as n grows.
    let pi = 2.0 / 3.0;
    let mut medians = Vec::new();
    for &n in &[200usize, 800, 3200] {
        let study = study(OutcomeModel::Two, n, pi, 5, 31);
        let mut lin =
            EstimatorSpec::standard(RegressionKind::Lin, MissingnessChoice::Mim, Scope::Common, pi);
        lin.df_mode = DfMode::Off;
        let mut tom =
            EstimatorSpec::standard(RegressionKind::Tom, MissingnessChoice::Mim, Scope::Common, pi);
        tom.df_mode = DfMode::Off;

        let mut gaps = Vec::new();
        for rep in 0..120u64 {
            let sample = generate(&study, rep);
            let index = carate_core::build_index(&sample.data).unwrap();
            let u = carate_core::missing::process_mim(
                &sample.data,
                carate_core::missing::ImputePolicy::Constant(0.0),
            )
            .unwrap();
            let l = carate_core::estimators::fit_lin(&sample.data, &index, &u.design, &lin)
                .unwrap()
                .tau_hat;
            let t = carate_core::estimators::fit_tom(&sample.data, &index, &u.design, &tom)
                .unwrap()
                .tau_hat;
            gaps.push((n as f64).sqrt() * (t - l).abs());
        }
        gaps.sort_by(f64::total_cmp);
        medians.push(gaps[gaps.len() / 2]);
    }
    assert!(
        medians[0] > medians[1] && medians[1] > medians[2],
        "scaled ToM-Lin gaps not shrinking: {medians:?}"
    );
}

#[test]
fn complete_case_kept_fraction_matches_row_completeness_probability() {
    // With four masked columns, a row is complete with probability
    // 0.2 * 0.45^4 + 0.8 * 0.95^4, roughly 0.66.
    let study = study(OutcomeModel::Two, 200, 0.5, 7, 13);
    let expected = 0.2 * 0.45f64.powi(4) + 0.8 * 0.95f64.powi(4);
    let mut kept = 0usize;
    let mut total = 0usize;
    for rep in 0..300u64 {
        let sample = generate(&study, rep);
        if let Ok((reduced, _)) = process_cc(&sample.data) {
            kept += reduced.n();
            total += sample.data.n();
        }
    }
    let fraction = kept as f64 / total as f64;
    assert!(
        (fraction - expected).abs() < 0.01,
        "kept fraction {fraction} vs expected {expected}"
    );
}

#[test]
fn p7_appends_outcome_independent_columns() {
    // Columns 6 and 7 exist at p = 7 and carry missingness like columns
    // 4 and 5.
    let study = study(OutcomeModel::Two, 400, 0.5, 7, 5);
    let sample = generate(&study, 0);
    assert_eq!(sample.data.covariate_count(), 7);
    let mask = sample.data.mask();
    assert!(mask.col_missing_count(5) > 0 || mask.col_missing_count(6) > 0);
    for j in 0..3 {
        assert_eq!(mask.col_missing_count(j), 0);
    }
}

#[test]
fn stratum_specific_gains_under_stratum_specific_signal() {
    // Model 1's signal coefficients differ by stratum, so the per-stratum
    // fits buy real efficiency over the pooled ones.
    let study = study(OutcomeModel::One, 200, 0.5, 5, 57);
    let mut specs = EstimatorSpec::table_set(0.5);
    for s in &mut specs {
        s.df_mode = DfMode::Off;
    }
    let report = run_monte_carlo(&study, &specs, 1000, 2).unwrap();
    let sd = |label: &str| {
        report
            .rows
            .iter()
            .find(|r| r.label == label)
            .unwrap()
            .sd
            .unwrap()
    };
    assert!(
        sd("tau_F_imp_ss") < 0.95 * sd("tau_F_imp"),
        "no stratum-specific gain: {} vs {}",
        sd("tau_F_imp_ss"),
        sd("tau_F_imp")
    );
}

#[test]
fn failures_are_counted_not_dropped() {
    // A tiny sample with the full seven-column design makes the
    // stratum-specific fits run out of rows in some replications; those
    // must surface as failure counts with everything else intact.
    let mut spec = DgpSpec::new(
        OutcomeModel::Two,
        60,
        0.5,
        RandomizationScheme::stratified_block(0.5, 4),
        3,
    );
    spec.p_total = 7;
    let study = Study::prepare_with_draws(spec, 50_000, 100_000).unwrap();
    let mut ss = EstimatorSpec::standard(
        RegressionKind::Lin,
        MissingnessChoice::Mim,
        Scope::StratumSpecific,
        0.5,
    );
    ss.df_mode = DfMode::Off;
    let report = run_monte_carlo(&study, &[ss], 100, 2).unwrap();
    let row = &report.rows[0];
    assert!(row.failures > 0, "expected some stratum-specific failures");
    assert_eq!(row.failures + row.successes, 100);
    assert!(row.first_failure.as_deref().unwrap_or("").contains("stratum"));
}

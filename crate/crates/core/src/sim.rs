//! Data-generating processes, signal-to-noise calibration, the ground-truth
//! effect oracle, and the Monte Carlo evaluation harness.
//!
//! Three outcome models share a common shell: treated outcomes get a fixed
//! shift, a missingness-propensity bump, a covariate signal, and calibrated
//! Gaussian noise. Covariates 1..3 are always observed; later columns are
//! masked with probability `0.5 xi + 0.05` where `xi` is the unit's latent
//! missingness propensity, so missingness is correlated with the outcome
//! level through `xi`.
//!
//! Reproducibility: every consumer of randomness gets its own ChaCha stream
//! derived from the study seed. Replication `r` uses stream `r`; coefficient
//! draws, calibration, and the truth oracle use reserved streams near
//! `u64::MAX`. Reports are therefore identical for any thread count.

use crate::estimators::{estimate_with_processed, EstimatorSpec, MissingnessChoice};
use crate::mat::Matrix;
use crate::missing::{self, ProcessedCovariates};
use crate::model::{build_index, Mask, StratumIndex, TrialData};
use crate::randomize::RandomizationScheme;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("signal for arm {arm} has zero variance; cannot calibrate noise")]
    DegenerateSignal { arm: u8 },
    #[error("failed to build thread pool: {0}")]
    ThreadPool(String),
    #[error("replications must be at least 1")]
    NoReplications,
    #[error(transparent)]
    Scheme(#[from] crate::randomize::RandomizeError),
}

pub const STREAM_COEFFICIENTS: u64 = u64::MAX;
pub const STREAM_CALIBRATION: u64 = u64::MAX - 1;
pub const STREAM_TAU_ORACLE: u64 = u64::MAX - 2;

pub const CALIBRATION_DRAWS: usize = 1_000_000;
pub const TAU_ORACLE_DRAWS: usize = 10_000_000;

/// ChaCha stream for one purpose under one study seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum OutcomeModel {
    /// Stratum-specific linear signal with arm-specific interactions.
    One,
    /// A single linear signal shared by both arms.
    Two,
    /// Non-linear signal with logs, squares, and an exponential term.
    Three,
}

impl OutcomeModel {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" => Some(OutcomeModel::One),
            "2" => Some(OutcomeModel::Two),
            "3" => Some(OutcomeModel::Three),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            OutcomeModel::One => "1",
            OutcomeModel::Two => "2",
            OutcomeModel::Three => "3",
        }
    }
}

/// How the signal-to-noise target is read: as a ratio of standard
/// deviations (default) or of variances.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum SnrDefinition {
    SdRatio,
    VarRatio,
}

/// Study-level outcome-model coefficients, drawn once per study.
#[derive(Clone, Debug, Serialize)]
pub enum Coefficients {
    One {
        /// Control slopes for x1, x2, x1*x4, x2*x5.
        control: [f64; 4],
        /// Treated slopes for the same terms.
        treated: [f64; 4],
        /// Treated slope on x3.
        treated_x3: f64,
    },
    Two {
        shared: [f64; 5],
    },
    Three {
        linear: f64,
        product: f64,
        log_scale: f64,
        exp_scale: f64,
    },
}

/// Full description of one simulation study.
#[derive(Clone, Debug, Serialize)]
pub struct DgpSpec {
    pub model: OutcomeModel,
    pub n: usize,
    pub pi: f64,
    pub scheme: RandomizationScheme,
    /// Total covariate columns: 5, or 7 with two outcome-independent extras.
    pub p_total: usize,
    pub snr: (f64, f64),
    pub snr_definition: SnrDefinition,
    pub mu: (f64, f64),
    pub seed: u64,
}

impl DgpSpec {
    pub fn new(model: OutcomeModel, n: usize, pi: f64, scheme: RandomizationScheme, seed: u64) -> Self {
        DgpSpec {
            model,
            n,
            pi,
            scheme,
            p_total: 5,
            snr: (3.0, 1.0),
            snr_definition: SnrDefinition::SdRatio,
            mu: (2.0, 1.0),
            seed,
        }
    }
}

/// A spec with its frozen coefficient draw, calibrated noise scales, and
/// oracle ground truth.
#[derive(Clone, Debug, Serialize)]
pub struct Study {
    pub spec: DgpSpec,
    pub coefficients: Coefficients,
    pub sigma: (f64, f64),
    pub true_tau: f64,
    pub true_tau_mc_se: f64,
}

impl Study {
    /// Draw coefficients, calibrate the noise scales from a large
    /// independent pre-sample, and estimate the ground-truth effect from the
    /// oracle stream.
    pub fn prepare(spec: DgpSpec) -> Result<Study, SimError> {
        Study::prepare_with_draws(spec, CALIBRATION_DRAWS, TAU_ORACLE_DRAWS)
    }

    pub fn prepare_with_draws(
        spec: DgpSpec,
        calibration_draws: usize,
        oracle_draws: usize,
    ) -> Result<Study, SimError> {
        spec.scheme.validate()?;
        let coefficients = draw_coefficients(spec.model, spec.seed);
        let sigma = calibrate_sigma(
            spec.model,
            &coefficients,
            spec.snr,
            spec.snr_definition,
            spec.seed,
            calibration_draws,
        )?;
        let (true_tau, true_tau_mc_se) = true_tau_oracle(
            spec.model,
            &coefficients,
            spec.mu,
            sigma,
            spec.seed,
            oracle_draws,
        );
        Ok(Study {
            spec,
            coefficients,
            sigma,
            true_tau,
            true_tau_mc_se,
        })
    }
}

/// Draw the study coefficients from the reserved coefficient stream.
pub fn draw_coefficients(model: OutcomeModel, seed: u64) -> Coefficients {
    let mut rng = stream_rng(seed, STREAM_COEFFICIENTS);
    let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    match model {
        OutcomeModel::One => {
            let control = [
                uniform(-2.0, 2.0),
                uniform(-2.0, 2.0),
                uniform(-2.0, 2.0),
                uniform(-2.0, 2.0),
            ];
            let treated = [
                control[0] + uniform(0.0, 1.0),
                control[1] + uniform(0.0, 1.0),
                control[2] + uniform(0.0, 1.0),
                control[3] + uniform(0.0, 1.0),
            ];
            let treated_x3 = uniform(0.0, 10.0);
            Coefficients::One {
                control,
                treated,
                treated_x3,
            }
        }
        OutcomeModel::Two => Coefficients::Two {
            shared: [
                uniform(-2.0, 2.0),
                uniform(-2.0, 2.0),
                uniform(-2.0, 2.0),
                uniform(-2.0, 2.0),
                uniform(-2.0, 2.0),
            ],
        },
        OutcomeModel::Three => Coefficients::Three {
            linear: uniform(-2.0, 2.0),
            product: uniform(-2.0, 2.0),
            log_scale: uniform(0.0, 4.0),
            exp_scale: uniform(-0.4, 0.4),
        },
    }
}

/// One unit's covariates and signal values.
struct UnitDraw {
    x: [f64; 7],
    xi: bool,
    g_treated: f64,
    g_control: f64,
}

impl UnitDraw {
    /// Stratum index 0..3 from the two stratification covariates.
    fn stratum(&self) -> usize {
        2 * usize::from(self.x[0] > 0.0) + usize::from(self.x[1] <= 2.0)
    }

    fn strat_levels(&self) -> Vec<usize> {
        vec![usize::from(self.x[0] > 0.0), usize::from(self.x[1] <= 2.0)]
    }
}

fn draw_unit<R: Rng>(
    model: OutcomeModel,
    coefficients: &Coefficients,
    p_total: usize,
    rng: &mut R,
) -> UnitDraw {
    let xi = rng.random_bool(0.2);
    let xif = f64::from(xi);

    let x1 = [-2.0, -1.0, 1.0, 2.0][rng.random_range(0..4)];
    let u = rng.random::<f64>();
    let x2 = if u < 0.2 {
        1.0
    } else if u < 0.5 {
        2.0
    } else {
        3.0
    };
    let x3 = Exp::new(xif + 1.0).unwrap().sample(rng);

    // Bivariate normal with covariance [[4, 1], [1, 1]] via its Cholesky
    // factor [[2, 0], [0.5, sqrt(0.75)]].
    let z1: f64 = StandardNormal.sample(rng);
    let z2: f64 = StandardNormal.sample(rng);
    let (x4, x5) = match model {
        OutcomeModel::One | OutcomeModel::Two => {
            ((1.0 + xif) + 2.0 * z1, xif + 0.5 * z1 + 0.75f64.sqrt() * z2)
        }
        OutcomeModel::Three => {
            let x40 = 1.0 + 2.0 * z1;
            let x5 = xif + 0.5 * z1 + 0.75f64.sqrt() * z2;
            (x40.max(0.0) + xif, x5)
        }
    };

    let mut x = [x1, x2, x3, x4, x5, 0.0, 0.0];
    if p_total > 5 {
        x[5] = StandardNormal.sample(rng);
        let z: f64 = StandardNormal.sample(rng);
        x[6] = 1.0 + 2.0 * z;
    }

    let (g_treated, g_control) = match (model, coefficients) {
        (
            OutcomeModel::One,
            Coefficients::One {
                control,
                treated,
                treated_x3,
            },
        ) => {
            let g1 = treated[0] * x1
                + treated[1] * x2
                + treated_x3 * x3
                + treated[2] * x1 * x4
                + treated[3] * x2 * x5;
            let g0 = control[0] * x1 + control[1] * x2 + control[2] * x1 * x4 + control[3] * x2 * x5;
            (g1, g0)
        }
        (OutcomeModel::Two, Coefficients::Two { shared }) => {
            let g = shared[0] * x1 + shared[1] * x2 + shared[2] * x3 + shared[3] * x4 + shared[4] * x5;
            (g, g)
        }
        (
            OutcomeModel::Three,
            Coefficients::Three {
                linear,
                product,
                log_scale,
                exp_scale,
            },
        ) => {
            debug_assert!(x4 >= 0.0, "truncated covariate must be nonnegative");
            let log_term = x2 * (log_scale * x3 * (x4 + 1.0).ln() + 1.0).ln();
            let g1 = linear * x1 + product * x2 * x2 * x3 + log_term + exp_scale * x5.exp();
            let g0 = linear * x1 * x1 + product * x2 * x3 + log_term;
            (g1, g0)
        }
        _ => unreachable!("coefficients do not match the model"),
    };

    UnitDraw {
        x,
        xi,
        g_treated,
        g_control,
    }
}

struct RunningMoments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    fn new() -> Self {
        RunningMoments {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }

    fn push(&mut self, value: f64) {
        self.count += 1.0;
        let delta = value - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (value - self.mean);
    }

    fn variance(&self) -> f64 {
        self.m2 / (self.count - 1.0)
    }

    fn sd(&self) -> f64 {
        self.variance().sqrt()
    }
}

/// Noise scales hitting the target signal-to-noise ratios, estimated from a
/// fixed-seed pre-sample of the signals `mu-shift + g`.
pub fn calibrate_sigma(
    model: OutcomeModel,
    coefficients: &Coefficients,
    snr: (f64, f64),
    definition: SnrDefinition,
    seed: u64,
    draws: usize,
) -> Result<(f64, f64), SimError> {
    let mut rng = stream_rng(seed, STREAM_CALIBRATION);
    let mut treated = RunningMoments::new();
    let mut control = RunningMoments::new();
    for _ in 0..draws {
        let unit = draw_unit(model, coefficients, 5, &mut rng);
        treated.push(5.0 * f64::from(unit.xi) + unit.g_treated);
        control.push(unit.g_control);
    }
    let scale = |sd: f64, target: f64, arm: u8| -> Result<f64, SimError> {
        if sd == 0.0 {
            return Err(SimError::DegenerateSignal { arm });
        }
        Ok(match definition {
            SnrDefinition::SdRatio => sd / target,
            SnrDefinition::VarRatio => sd / target.sqrt(),
        })
    };
    Ok((
        scale(treated.sd(), snr.0, 1)?,
        scale(control.sd(), snr.1, 0)?,
    ))
}

/// Ground-truth average effect from a large oracle sample of potential
/// outcome differences (no assignment, no missingness), with its Monte Carlo
/// standard error.
pub fn true_tau_oracle(
    model: OutcomeModel,
    coefficients: &Coefficients,
    mu: (f64, f64),
    sigma: (f64, f64),
    seed: u64,
    draws: usize,
) -> (f64, f64) {
    let mut rng = stream_rng(seed, STREAM_TAU_ORACLE);
    let mut diff = RunningMoments::new();
    for _ in 0..draws {
        let unit = draw_unit(model, coefficients, 5, &mut rng);
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e0: f64 = StandardNormal.sample(&mut rng);
        diff.push(
            mu.0 - mu.1
                + 5.0 * f64::from(unit.xi)
                + unit.g_treated
                + sigma.0 * e1
                - unit.g_control
                - sigma.1 * e0,
        );
    }
    (diff.mean, diff.sd() / (draws as f64).sqrt())
}

/// One generated experiment: the observable trial plus both potential
/// outcomes for evaluation.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub data: TrialData,
    pub y_treated: Vec<f64>,
    pub y_control: Vec<f64>,
}

/// Generate replication `rep` of a study: covariates, masks, potential
/// outcomes, and the scheme's treatment assignment.
///
/// The mask is drawn once per unit before assignment, so the realized mask
/// never depends on the arm, and the assignment engine only ever sees the
/// stratification information.
pub fn generate(study: &Study, rep: u64) -> GeneratedSample {
    let spec = &study.spec;
    let mut rng = stream_rng(spec.seed, rep);
    let n = spec.n;

    let mut x_cols = vec![vec![0.0f64; n]; spec.p_total];
    let mut mask = Mask::all_observed(n, spec.p_total);
    let mut strata_labels = vec![0i64; n];
    let mut strat_levels = Vec::with_capacity(n);
    let mut strata0 = vec![0usize; n];
    let mut y_treated = vec![0.0f64; n];
    let mut y_control = vec![0.0f64; n];

    for i in 0..n {
        let unit = draw_unit(spec.model, &study.coefficients, spec.p_total, &mut rng);
        for (j, col) in x_cols.iter_mut().enumerate() {
            col[i] = unit.x[j];
        }
        for j in 3..spec.p_total {
            if rng.random_bool(0.5 * f64::from(unit.xi) + 0.05) {
                mask.set(i, j, true);
            }
        }
        let e1: f64 = StandardNormal.sample(&mut rng);
        let e0: f64 = StandardNormal.sample(&mut rng);
        y_treated[i] =
            spec.mu.0 + 5.0 * f64::from(unit.xi) + unit.g_treated + study.sigma.0 * e1;
        y_control[i] = spec.mu.1 + unit.g_control + study.sigma.1 * e0;
        strata0[i] = unit.stratum();
        strata_labels[i] = unit.stratum() as i64 + 1;
        strat_levels.push(unit.strat_levels());
    }

    let assignment = spec
        .scheme
        .assign(&strata0, &strat_levels, &mut rng)
        .expect("scheme parameters were validated when the study was prepared");

    let outcomes: Vec<f64> = (0..n)
        .map(|i| {
            if assignment[i] == 1 {
                y_treated[i]
            } else {
                y_control[i]
            }
        })
        .collect();

    let data = TrialData::with_numeric_strata(
        outcomes,
        assignment,
        &strata_labels,
        Matrix::from_columns(&x_cols),
        mask,
        spec.pi,
    )
    .expect("generated data satisfies the trial invariants");

    GeneratedSample {
        data,
        y_treated,
        y_control,
    }
}

/// Per-estimator aggregate over the Monte Carlo replications.
#[derive(Clone, Debug, Serialize)]
pub struct EstimatorRow {
    pub label: String,
    pub bias: f64,
    /// Sample standard deviation of the estimates; `None` for a single
    /// successful replication.
    pub sd: Option<f64>,
    pub mean_se: f64,
    pub rmse: f64,
    /// Fraction of successful replications whose interval covers the truth.
    pub cp: f64,
    pub failures: usize,
    pub successes: usize,
    /// First failure message, when any replication failed (JSON only).
    pub first_failure: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportMeta {
    pub model: OutcomeModel,
    pub n: usize,
    pub pi: f64,
    pub scheme: RandomizationScheme,
    pub p_total: usize,
    pub snr: (f64, f64),
    pub snr_definition: SnrDefinition,
    pub mu: (f64, f64),
    pub seed: u64,
    pub replications: usize,
    pub level: f64,
    pub coefficients: Coefficients,
    pub sigma: (f64, f64),
    pub true_tau: f64,
    pub true_tau_mc_se: f64,
    pub estimator_specs: Vec<EstimatorSpec>,
    pub version: String,
    /// Not part of the CSV body; varies run to run.
    pub wall_seconds: f64,
    pub threads: usize,
}

/// Per-estimator Monte Carlo aggregates and the full resolved configuration.
#[derive(Clone, Debug, Serialize)]
pub struct SimulationReport {
    pub meta: ReportMeta,
    pub rows: Vec<EstimatorRow>,
}

impl SimulationReport {
    /// Table body, one estimator per row. Deterministic for a given seed
    /// regardless of thread count: timing and thread metadata stay in the
    /// JSON sidecar.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("estimator,bias,sd,se,rmse,cp,failures\n");
        for row in &self.rows {
            let sd = row
                .sd
                .map_or_else(|| "NA".to_string(), |v| format!("{v}"));
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                row.label, row.bias, sd, row.mean_se, row.rmse, row.cp, row.failures
            ));
        }
        out
    }
}

enum RepOutcome {
    Ok { tau_hat: f64, se: f64, covered: bool },
    Failed(String),
}

fn replicate(study: &Study, specs: &[EstimatorSpec], rep: u64) -> Vec<RepOutcome> {
    let sample = generate(study, rep);
    let data = &sample.data;
    let index = match build_index(data) {
        Ok(ix) => ix,
        Err(e) => {
            let msg = e.to_string();
            return specs.iter().map(|_| RepOutcome::Failed(msg.clone())).collect();
        }
    };

    // Process each distinct missingness configuration once per replication.
    type CacheKey = (MissingnessChoice, crate::missing::ImputePolicy);
    let mut processed: Vec<(CacheKey, ProcessedCovariates)> = Vec::new();
    let mut cc_prepared: Option<Result<(TrialData, StratumIndex, ProcessedCovariates), String>> =
        None;

    specs
        .iter()
        .map(|spec| {
            let result = if spec.missingness == MissingnessChoice::Cc {
                let prepared = cc_prepared.get_or_insert_with(|| {
                    missing::process_cc(data)
                        .map_err(|e| e.to_string())
                        .and_then(|(reduced, proc_)| {
                            build_index(&reduced)
                                .map(|ix| (reduced, ix, proc_))
                                .map_err(|e| e.to_string())
                        })
                });
                match prepared {
                    Ok((reduced, ix, proc_)) => {
                        estimate_with_processed(reduced, ix, proc_, spec).map_err(|e| e.to_string())
                    }
                    Err(e) => Err(e.clone()),
                }
            } else {
                let key = (spec.missingness, spec.impute);
                let found = processed.iter().position(|(k, _)| *k == key);
                let pos = match found {
                    Some(p) => p,
                    None => match crate::estimators::process_for(data, spec) {
                        Ok(p) => {
                            processed.push((key, p));
                            processed.len() - 1
                        }
                        Err(e) => return RepOutcome::Failed(e.to_string()),
                    },
                };
                estimate_with_processed(data, &index, &processed[pos].1, spec)
                    .map_err(|e| e.to_string())
            };
            match result {
                Ok(est) => RepOutcome::Ok {
                    tau_hat: est.tau_hat,
                    se: est.se,
                    covered: est.ci.0 <= study.true_tau && study.true_tau <= est.ci.1,
                },
                Err(e) => RepOutcome::Failed(e),
            }
        })
        .collect()
}

/// Run the Monte Carlo study: generate, assign, estimate, and aggregate.
///
/// Replication `r` owns ChaCha stream `r`, so the report body is identical
/// for any thread count; estimator failures within a replication are counted
/// per estimator, never silently dropped.
pub fn run_monte_carlo(
    study: &Study,
    specs: &[EstimatorSpec],
    replications: usize,
    threads: usize,
) -> Result<SimulationReport, SimError> {
    if replications == 0 {
        return Err(SimError::NoReplications);
    }
    let started = std::time::Instant::now();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| SimError::ThreadPool(e.to_string()))?;
    let results: Vec<Vec<RepOutcome>> = pool.install(|| {
        (0..replications as u64)
            .into_par_iter()
            .map(|rep| replicate(study, specs, rep))
            .collect()
    });

    let tau = study.true_tau;
    let rows: Vec<EstimatorRow> = specs
        .iter()
        .enumerate()
        .map(|(j, spec)| {
            let mut taus = Vec::with_capacity(replications);
            let mut se_sum = 0.0;
            let mut covered = 0usize;
            let mut failures = 0usize;
            let mut first_failure = None;
            for rep_result in &results {
                match &rep_result[j] {
                    RepOutcome::Ok {
                        tau_hat,
                        se,
                        covered: c,
                    } => {
                        taus.push(*tau_hat);
                        se_sum += se;
                        covered += usize::from(*c);
                    }
                    RepOutcome::Failed(msg) => {
                        failures += 1;
                        if first_failure.is_none() {
                            first_failure = Some(msg.clone());
                        }
                    }
                }
            }
            let successes = taus.len();
            let mean = taus.iter().sum::<f64>() / successes as f64;
            let bias = mean - tau;
            let sd = if successes >= 2 {
                let ss: f64 = taus.iter().map(|t| (t - mean) * (t - mean)).sum();
                Some((ss / (successes - 1) as f64).sqrt())
            } else {
                None
            };
            let rmse = (taus.iter().map(|t| (t - tau) * (t - tau)).sum::<f64>()
                / successes as f64)
                .sqrt();
            EstimatorRow {
                label: spec.label(),
                bias,
                sd,
                mean_se: se_sum / successes as f64,
                rmse,
                cp: covered as f64 / successes as f64,
                failures,
                successes,
                first_failure,
            }
        })
        .collect();

    Ok(SimulationReport {
        meta: ReportMeta {
            model: study.spec.model,
            n: study.spec.n,
            pi: study.spec.pi,
            scheme: study.spec.scheme.clone(),
            p_total: study.spec.p_total,
            snr: study.spec.snr,
            snr_definition: study.spec.snr_definition,
            mu: study.spec.mu,
            seed: study.spec.seed,
            replications,
            level: specs.first().map_or(0.95, |s| s.level),
            coefficients: study.coefficients.clone(),
            sigma: study.sigma,
            true_tau: study.true_tau,
            true_tau_mc_se: study.true_tau_mc_se,
            estimator_specs: specs.to_vec(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_seconds: started.elapsed().as_secs_f64(),
            threads,
        },
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomize::RandomizationScheme;

    fn model2_study(seed: u64) -> Study {
        let spec = DgpSpec::new(
            OutcomeModel::Two,
            200,
            0.5,
            RandomizationScheme::stratified_block(0.5, 4),
            seed,
        );
        Study::prepare_with_draws(spec, 100_000, 200_000).unwrap()
    }

    #[test]
    fn mask_rate_matches_total_probability() {
        // P(missing) = 0.2 * 0.55 + 0.8 * 0.05 = 0.15, checked on 1e6 cells.
        let study = model2_study(11);
        let mut missing = 0usize;
        let mut cells = 0usize;
        let mut rep = 0u64;
        while cells < 1_000_000 {
            let sample = generate(&study, rep);
            for j in 3..5 {
                missing += sample.data.mask().col_missing_count(j);
                cells += sample.data.n();
            }
            rep += 1;
        }
        let rate = missing as f64 / cells as f64;
        assert!(
            (rate - 0.15).abs() < 0.002,
            "marginal missing rate {rate} off target 0.15"
        );
    }

    #[test]
    fn first_three_columns_fully_observed() {
        let study = model2_study(5);
        let sample = generate(&study, 0);
        for j in 0..3 {
            assert_eq!(sample.data.mask().col_missing_count(j), 0);
        }
    }

    #[test]
    fn observed_outcome_composes_potentials() {
        let study = model2_study(7);
        let sample = generate(&study, 3);
        for i in 0..sample.data.n() {
            let expected = if sample.data.is_treated(i) {
                sample.y_treated[i]
            } else {
                sample.y_control[i]
            };
            assert_eq!(sample.data.outcome(i), expected);
        }
    }

    #[test]
    fn strata_follow_stratification_covariates() {
        let study = model2_study(9);
        let sample = generate(&study, 1);
        for i in 0..sample.data.n() {
            let x1 = sample.data.covariate(i, 0);
            let x2 = sample.data.covariate(i, 1);
            let expected = 2 * usize::from(x1 > 0.0) + usize::from(x2 <= 2.0);
            assert_eq!(
                sample.data.stratum_label(sample.data.stratum(i)),
                (expected + 1).to_string()
            );
        }
    }

    #[test]
    fn zero_coefficients_give_analytic_tau() {
        // With a flat signal the effect is mu1 - mu0 + 5 * E[xi] = 2.
        let coeffs = Coefficients::Two { shared: [0.0; 5] };
        let (tau, mc_se) =
            true_tau_oracle(OutcomeModel::Two, &coeffs, (2.0, 1.0), (1.0, 1.0), 3, 400_000);
        assert!(
            (tau - 2.0).abs() <= 3.0 * mc_se,
            "oracle {tau} outside 3 MC-SE of 2 (se {mc_se})"
        );
    }

    #[test]
    fn model2_tau_is_exactly_two() {
        // Shared signal cancels in the difference, so tau = 1 + 5 * 0.2 = 2.
        let study = model2_study(21);
        assert!(
            (study.true_tau - 2.0).abs() <= 4.0 * study.true_tau_mc_se,
            "tau {} (mc se {})",
            study.true_tau,
            study.true_tau_mc_se
        );
    }

    #[test]
    fn degenerate_signal_rejected() {
        let coeffs = Coefficients::Two { shared: [0.0; 5] };
        let err = calibrate_sigma(
            OutcomeModel::Two,
            &coeffs,
            (3.0, 1.0),
            SnrDefinition::SdRatio,
            1,
            10_000,
        )
        .unwrap_err();
        // The treated arm still has the xi bump; the control signal is flat.
        assert!(matches!(err, SimError::DegenerateSignal { arm: 0 }));
    }

    #[test]
    fn calibration_definition() {
        // sd-ratio: sigma = sd(signal) / snr; var-ratio: sd / sqrt(snr).
        let coeffs = draw_coefficients(OutcomeModel::Two, 33);
        let sd_based = calibrate_sigma(
            OutcomeModel::Two,
            &coeffs,
            (3.0, 1.0),
            SnrDefinition::SdRatio,
            33,
            50_000,
        )
        .unwrap();
        let var_based = calibrate_sigma(
            OutcomeModel::Two,
            &coeffs,
            (3.0, 1.0),
            SnrDefinition::VarRatio,
            33,
            50_000,
        )
        .unwrap();
        // SNR_0 = 1 gives sigma_0 = sd(signal_0) under both readings.
        assert!((sd_based.1 - var_based.1).abs() < 1e-12);
        // SNR_1 = 3: the sd reading is smaller by a factor sqrt(3).
        assert!((sd_based.0 * 3.0 / 3.0f64.sqrt() - var_based.0).abs() < 1e-9);
    }

    #[test]
    fn calibration_stable_across_sample_sizes() {
        let coeffs = draw_coefficients(OutcomeModel::Two, 17);
        let small = calibrate_sigma(
            OutcomeModel::Two,
            &coeffs,
            (3.0, 1.0),
            SnrDefinition::SdRatio,
            17,
            100_000,
        )
        .unwrap();
        let large = calibrate_sigma(
            OutcomeModel::Two,
            &coeffs,
            (3.0, 1.0),
            SnrDefinition::SdRatio,
            17,
            1_000_000,
        )
        .unwrap();
        assert!((small.0 / large.0 - 1.0).abs() < 0.01);
        assert!((small.1 / large.1 - 1.0).abs() < 0.01);
    }

    #[test]
    fn model3_truncated_covariate_nonnegative() {
        let coeffs = draw_coefficients(OutcomeModel::Three, 3);
        let mut rng = stream_rng(3, 0);
        for _ in 0..10_000 {
            let unit = draw_unit(OutcomeModel::Three, &coeffs, 7, &mut rng);
            assert!(unit.x[3] >= 0.0);
            assert!(unit.g_treated.is_finite() && unit.g_control.is_finite());
        }
    }

    #[test]
    fn incompatible_scheme_rejected_at_preparation() {
        let spec = DgpSpec::new(
            OutcomeModel::Two,
            100,
            0.5,
            RandomizationScheme::stratified_block(0.5, 3),
            1,
        );
        let err = Study::prepare_with_draws(spec, 1000, 1000).unwrap_err();
        assert!(err.to_string().contains("not an integer"));
    }

    #[test]
    fn single_replication_reports_na_sd() {
        let study = model2_study(2);
        let specs = vec![EstimatorSpec::benchmark(0.5)];
        let report = run_monte_carlo(&study, &specs, 1, 1).unwrap();
        assert!(report.rows[0].sd.is_none());
        assert!(report.to_csv_string().contains("NA"));
    }

    #[test]
    fn thread_count_does_not_change_the_report() {
        let study = model2_study(4);
        let specs = EstimatorSpec::table_set(0.5);
        let one = run_monte_carlo(&study, &specs, 40, 1).unwrap();
        let eight = run_monte_carlo(&study, &specs, 40, 8).unwrap();
        assert_eq!(one.to_csv_string(), eight.to_csv_string());
    }

    #[test]
    fn rmse_identity_holds() {
        let study = model2_study(6);
        let specs = EstimatorSpec::table_set(0.5);
        let report = run_monte_carlo(&study, &specs, 50, 2).unwrap();
        for row in &report.rows {
            let r = row.successes as f64;
            let sd = row.sd.unwrap();
            let reconstructed = (row.bias * row.bias + sd * sd * (r - 1.0) / r).sqrt();
            assert!(
                (reconstructed - row.rmse).abs() < 1e-10,
                "rmse identity violated for {}",
                row.label
            );
        }
    }
}

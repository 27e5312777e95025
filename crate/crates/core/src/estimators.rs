//! The missingness x regression ATE estimator matrix plus the two benchmark
//! estimators.
//!
//! Three regression adjustments are supported, each in a stratum-common and
//! a stratum-specific variant:
//!
//! - Fisher: additive OLS with stratum dummies and the adjusted covariates;
//!   treatment-coefficient variance from the classical OLS formula.
//! - Lin: fully interacted adjustment, computed as separate per-arm
//!   regressions and recombined with stratum-size weights; nonparametric
//!   plug-in variance.
//! - ToM ("tyranny of the minority"): weighted regression with weights
//!   `A/pi^2 + (1-A)/(1-pi)^2` that pools covariate slopes across arms while
//!   up-weighting the minority arm; plug-in variance.
//!
//! Each estimator has two independent computation routes (the regression
//! display and a closed-form combination of stratum moments). Test builds
//! compute both and assert agreement; release builds run the cheaper route.

use crate::mat::Matrix;
use crate::missing::{
    self, ImputePolicy, MissingnessError, MissingnessMethod, ProcessedCovariates,
};
use crate::model::{build_index, DataError, StratumIndex, TrialData};
use crate::regress::{
    ols_fit, solve_square, wls_fit, RegressError, RegressionFit, Weights, DEFAULT_RANK_TOLERANCE,
};
use crate::variance::{
    confidence_interval, ols_variance, plug_in_variance, ParamCounts, VarianceError,
};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("treatment indicator is collinear with the rest of the design")]
    DesignDegenerate,
    #[error("arm {arm} has {have} rows but the per-arm regression needs more than {needed}")]
    InsufficientArmRows { arm: u8, needed: usize, have: usize },
    #[error(
        "stratum {stratum}, arm {arm}: {have} rows, need at least {needed} for a \
         stratum-specific fit; use the stratum-common scope for small strata"
    )]
    StratumTooSmall {
        stratum: usize,
        arm: u8,
        needed: usize,
        have: usize,
    },
    #[error("OLS variance is not valid here: {0}")]
    VarianceNotValid(String),
    #[error("invalid estimator specification: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Missing(#[from] MissingnessError),
    #[error(transparent)]
    Regress(#[from] RegressError),
    #[error(transparent)]
    Variance(#[from] VarianceError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RegressionKind {
    Fisher,
    Lin,
    Tom,
}

impl RegressionKind {
    pub fn tag(self) -> &'static str {
        match self {
            RegressionKind::Fisher => "fisher",
            RegressionKind::Lin => "lin",
            RegressionKind::Tom => "tom",
        }
    }

    fn short(self) -> &'static str {
        match self {
            RegressionKind::Fisher => "F",
            RegressionKind::Lin => "L",
            RegressionKind::Tom => "T",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Scope {
    Common,
    StratumSpecific,
}

/// Missingness handling for one estimator run; `Benchmark` means no
/// additional covariates at all.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MissingnessChoice {
    Benchmark,
    Cc,
    Ccov,
    Imp,
    Mim,
}

impl MissingnessChoice {
    pub fn method(self) -> Option<MissingnessMethod> {
        match self {
            MissingnessChoice::Benchmark => None,
            MissingnessChoice::Cc => Some(MissingnessMethod::Cc),
            MissingnessChoice::Ccov => Some(MissingnessMethod::Ccov),
            MissingnessChoice::Imp => Some(MissingnessMethod::Imp),
            MissingnessChoice::Mim => Some(MissingnessMethod::Mim),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum DfMode {
    Auto,
    On,
    Off,
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimatorSpec {
    pub regression: RegressionKind,
    pub missingness: MissingnessChoice,
    pub scope: Scope,
    pub pi: f64,
    pub df_mode: DfMode,
    pub impute: ImputePolicy,
    pub level: f64,
}

impl EstimatorSpec {
    /// Standard configuration: observed-mean imputation for `imp`, constant
    /// zero for `mim` (the estimate is invariant to that constant, so zero
    /// is the cheapest choice), 95% intervals, automatic df handling.
    pub fn standard(
        regression: RegressionKind,
        missingness: MissingnessChoice,
        scope: Scope,
        pi: f64,
    ) -> Self {
        let impute = match missingness {
            MissingnessChoice::Mim => ImputePolicy::Constant(0.0),
            _ => ImputePolicy::ObservedMean,
        };
        EstimatorSpec {
            regression,
            missingness,
            scope,
            pi,
            df_mode: DfMode::Auto,
            impute,
            level: 0.95,
        }
    }

    /// The benchmark for a target allocation: the additive stratum-dummy
    /// regression at equal allocation, the stratum-weighted difference in
    /// means otherwise.
    pub fn benchmark(pi: f64) -> Self {
        let regression = if (pi - 0.5).abs() < 1e-12 {
            RegressionKind::Fisher
        } else {
            RegressionKind::Lin
        };
        EstimatorSpec::standard(regression, MissingnessChoice::Benchmark, Scope::Common, pi)
    }

    /// The 19 rows of one simulation table: the benchmark followed by
    /// {ccov, imp, mim} x {Fisher, Lin, ToM} x {common, stratum-specific}.
    pub fn table_set(pi: f64) -> Vec<EstimatorSpec> {
        let mut out = vec![EstimatorSpec::benchmark(pi)];
        for missingness in [
            MissingnessChoice::Ccov,
            MissingnessChoice::Imp,
            MissingnessChoice::Mim,
        ] {
            for scope in [Scope::Common, Scope::StratumSpecific] {
                for regression in
                    [RegressionKind::Fisher, RegressionKind::Lin, RegressionKind::Tom]
                {
                    out.push(EstimatorSpec::standard(regression, missingness, scope, pi));
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let base = match self.missingness {
            MissingnessChoice::Benchmark => return format!("tau_{}", self.regression.short()),
            MissingnessChoice::Cc => "cc",
            MissingnessChoice::Ccov => "ccov",
            MissingnessChoice::Imp => "imp",
            MissingnessChoice::Mim => "mim",
        };
        let ss = match self.scope {
            Scope::Common => "",
            Scope::StratumSpecific => "_ss",
        };
        format!("tau_{}_{}{}", self.regression.short(), base, ss)
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !(self.pi > 0.0 && self.pi < 1.0) {
            return Err(EstimatorError::InvalidSpec(format!(
                "pi {} outside (0, 1)",
                self.pi
            )));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(EstimatorError::InvalidSpec(format!(
                "level {} outside (0, 1)",
                self.level
            )));
        }
        if self.missingness == MissingnessChoice::Benchmark
            && (self.scope != Scope::Common || self.regression == RegressionKind::Tom)
        {
            return Err(EstimatorError::InvalidSpec(
                "benchmarks are the stratum-common Fisher and Lin displays".into(),
            ));
        }
        if self.missingness == MissingnessChoice::Cc && self.scope != Scope::Common {
            return Err(EstimatorError::InvalidSpec(
                "complete-case analysis is a stratum-common demonstration path".into(),
            ));
        }
        Ok(())
    }

    /// Resolve the df adjustment: on when the design is wide relative to the
    /// sample (`q >= 5` or `n < 400`), reported in the output either way.
    /// Only the plug-in variance paths (Lin/ToM) consult this.
    pub fn resolve_df(&self, n: usize, q: usize) -> bool {
        match self.df_mode {
            DfMode::On => true,
            DfMode::Off => false,
            DfMode::Auto => q >= 5 || n < 400,
        }
    }
}

/// Fitted coefficients, shaped by the estimator family.
#[derive(Clone, Debug, Serialize)]
pub enum CoefficientReport {
    /// Pooled covariate slopes (Fisher, ToM).
    Pooled(Vec<f64>),
    /// Per-arm covariate slopes (Lin).
    PerArm { treated: Vec<f64>, control: Vec<f64> },
    /// One report per stratum (stratum-specific fits).
    PerStratum(Vec<CoefficientReport>),
    /// No covariates in the display.
    None,
}

#[derive(Clone, Debug, Serialize)]
pub struct Diagnostics {
    /// Number of adjusted-covariate columns handed to the display.
    pub covariate_columns: usize,
    /// Covariate columns dropped by the rank guard in the main fit(s).
    pub dropped_covariates: Vec<usize>,
    /// `(treated, control)` counts per stratum.
    pub per_stratum_arms: Vec<(usize, usize)>,
    /// True when a missingness processor produced zero columns and the
    /// estimate therefore equals its benchmark.
    pub benchmark_equivalent: bool,
    pub df_adjusted: bool,
    pub warnings: Vec<String>,
    pub n: usize,
}

/// One estimator run: the point estimate, its scaled variance, the interval,
/// and full method metadata.
#[derive(Clone, Debug, Serialize)]
pub struct AdjustedEstimate {
    pub tau_hat: f64,
    /// Estimate of the asymptotic variance scaled by n.
    pub sigma2_hat: f64,
    /// `sqrt(sigma2_hat / n)`.
    pub se: f64,
    pub ci: (f64, f64),
    pub coefficients: CoefficientReport,
    pub spec: EstimatorSpec,
    pub diagnostics: Diagnostics,
}

fn finish(
    tau_hat: f64,
    sigma2_hat: f64,
    n: usize,
    spec: &EstimatorSpec,
    coefficients: CoefficientReport,
    diagnostics: Diagnostics,
) -> AdjustedEstimate {
    let se = (sigma2_hat / n as f64).sqrt();
    let ci = confidence_interval(tau_hat, sigma2_hat, n, spec.level);
    AdjustedEstimate {
        tau_hat,
        sigma2_hat,
        se,
        ci,
        coefficients,
        spec: spec.clone(),
        diagnostics,
    }
}

/// Run one estimator on a dataset, processing missingness internally.
pub fn estimate(data: &TrialData, spec: &EstimatorSpec) -> Result<AdjustedEstimate, EstimatorError> {
    spec.validate()?;
    match spec.missingness {
        MissingnessChoice::Cc => {
            let (reduced, processed) = missing::process_cc(data)?;
            let index = build_index(&reduced)?;
            let mut est = dispatch(&reduced, &index, &processed.design, spec)?;
            est.diagnostics.warnings.push(missing::CC_WARNING.to_string());
            Ok(est)
        }
        _ => {
            let index = build_index(data)?;
            let processed = process_for(data, spec)?;
            estimate_with_processed(data, &index, &processed, spec)
        }
    }
}

/// Produce the adjusted design for a spec (benchmarks get zero columns).
pub fn process_for(
    data: &TrialData,
    spec: &EstimatorSpec,
) -> Result<ProcessedCovariates, EstimatorError> {
    Ok(match spec.missingness {
        MissingnessChoice::Benchmark => ProcessedCovariates::none(data.n()),
        MissingnessChoice::Ccov => missing::process_ccov(data),
        MissingnessChoice::Imp => missing::process_imp(data, spec.impute)?,
        MissingnessChoice::Mim => missing::process_mim(data, spec.impute)?,
        MissingnessChoice::Cc => {
            return Err(EstimatorError::InvalidSpec(
                "complete-case processing reduces the dataset; use estimate()".into(),
            ))
        }
    })
}

/// Run one estimator on pre-processed covariates (the Monte Carlo harness
/// shares one processed design across the six regressions).
pub fn estimate_with_processed(
    data: &TrialData,
    index: &StratumIndex,
    processed: &ProcessedCovariates,
    spec: &EstimatorSpec,
) -> Result<AdjustedEstimate, EstimatorError> {
    spec.validate()?;
    let mut est = dispatch(data, index, &processed.design, spec)?;
    if spec.missingness != MissingnessChoice::Benchmark && processed.design.cols() == 0 {
        est.diagnostics.benchmark_equivalent = true;
        est.diagnostics
            .warnings
            .push("no usable covariate columns; estimate equals the benchmark".into());
    }
    Ok(est)
}

fn dispatch(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
    spec: &EstimatorSpec,
) -> Result<AdjustedEstimate, EstimatorError> {
    let mut est = match (spec.scope, spec.regression, spec.missingness) {
        (_, _, MissingnessChoice::Benchmark) => fit_benchmark(data, index, spec)?,
        (Scope::Common, RegressionKind::Fisher, _) => fit_fisher(data, index, u, spec)?,
        (Scope::Common, RegressionKind::Lin, _) => fit_lin(data, index, u, spec)?,
        (Scope::Common, RegressionKind::Tom, _) => fit_tom(data, index, u, spec)?,
        (Scope::StratumSpecific, _, _) => fit_stratum_specific(data, index, u, spec)?,
    };
    if spec.regression == RegressionKind::Fisher && (spec.pi - 0.5).abs() > 1e-12 {
        est.diagnostics.warnings.push(
            "the additive (Fisher) adjustment is recommended for equal allocation only; \
             consider the ToM or Lin adjustment at this target proportion"
                .into(),
        );
    }
    if (spec.pi - data.target_pi()).abs() > 1e-12 {
        est.diagnostics.warnings.push(format!(
            "spec pi {} differs from the dataset target {}",
            spec.pi,
            data.target_pi()
        ));
    }
    Ok(est)
}

// ---------------------------------------------------------------------------
// Design-column helpers.

fn intercept_col(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

fn treatment_col(data: &TrialData) -> Vec<f64> {
    data.treatment().iter().map(|&a| f64::from(a)).collect()
}

/// Raw dummies for strata `0..K-1`; the last stratum is the reference level.
fn push_stratum_dummies(design: &mut Matrix, data: &TrialData, k_total: usize) {
    for k in 0..k_total.saturating_sub(1) {
        let col: Vec<f64> = (0..data.n())
            .map(|i| f64::from(data.stratum(i) == k))
            .collect();
        design.push_col(&col);
    }
}

/// Centered dummies `I_k - p_n[k]`, optionally multiplied by the treatment
/// indicator.
fn push_centered_dummies(
    design: &mut Matrix,
    data: &TrialData,
    index: &StratumIndex,
    interact_with_treatment: bool,
) {
    let k_total = index.stratum_count();
    for k in 0..k_total.saturating_sub(1) {
        let p = index.counts(k).proportion;
        let col: Vec<f64> = (0..data.n())
            .map(|i| {
                let c = f64::from(data.stratum(i) == k) - p;
                if interact_with_treatment {
                    f64::from(data.is_treated(i)) * c
                } else {
                    c
                }
            })
            .collect();
        design.push_col(&col);
    }
}

fn push_u_columns(design: &mut Matrix, u: &Matrix) {
    for c in 0..u.cols() {
        design.push_col(u.col(c));
    }
}

fn per_stratum_arms(index: &StratumIndex) -> Vec<(usize, usize)> {
    index
        .all_counts()
        .iter()
        .map(|c| (c.n_treated, c.n_control))
        .collect()
}

/// Degrees-of-freedom charge per cell for a stratum-common fit: each
/// (stratum, arm) cell pays its own fitted mean plus a size-proportional
/// share of the arm's pooled covariate-slope count.
fn prorated_counts(
    index: &StratumIndex,
    slopes_treated: usize,
    slopes_control: usize,
) -> ParamCounts {
    let n_treated: usize = index.all_counts().iter().map(|c| c.n_treated).sum();
    let n_control: usize = index.all_counts().iter().map(|c| c.n_control).sum();
    ParamCounts::PerStratum(
        index
            .all_counts()
            .iter()
            .map(|c| {
                (
                    1.0 + slopes_treated as f64 * c.n_treated as f64 / n_treated as f64,
                    1.0 + slopes_control as f64 * c.n_control as f64 / n_control as f64,
                )
            })
            .collect(),
    )
}

/// Per-stratum, per-arm means of the outcome and of every U column, plus
/// all-rows stratum means of U.
struct CellMeans {
    y_treated: Vec<f64>,
    y_control: Vec<f64>,
    u_treated: Vec<Vec<f64>>,
    u_control: Vec<Vec<f64>>,
    u_all: Vec<Vec<f64>>,
}

fn cell_means(data: &TrialData, index: &StratumIndex, u: &Matrix) -> CellMeans {
    let k_total = index.stratum_count();
    let q = u.cols();
    let mut m = CellMeans {
        y_treated: vec![0.0; k_total],
        y_control: vec![0.0; k_total],
        u_treated: vec![vec![0.0; q]; k_total],
        u_control: vec![vec![0.0; q]; k_total],
        u_all: vec![vec![0.0; q]; k_total],
    };
    for k in 0..k_total {
        let counts = index.counts(k);
        for &i in index.members(k) {
            let y = data.outcome(i);
            if data.is_treated(i) {
                m.y_treated[k] += y;
            } else {
                m.y_control[k] += y;
            }
            for c in 0..q {
                let v = u.get(i, c);
                m.u_all[k][c] += v;
                if data.is_treated(i) {
                    m.u_treated[k][c] += v;
                } else {
                    m.u_control[k][c] += v;
                }
            }
        }
        m.y_treated[k] /= counts.n_treated as f64;
        m.y_control[k] /= counts.n_control as f64;
        for c in 0..q {
            m.u_treated[k][c] /= counts.n_treated as f64;
            m.u_control[k][c] /= counts.n_control as f64;
            m.u_all[k][c] /= counts.n as f64;
        }
    }
    m
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which U columns (0-based within U) were dropped by a fit whose design has
/// `offset` columns ahead of the U block.
fn dropped_u_columns(fit: &RegressionFit, offset: usize, q: usize) -> Vec<usize> {
    (0..q)
        .filter(|c| fit.coefficient(offset + c).is_none())
        .collect()
}

fn u_slopes(fit: &RegressionFit, offset: usize, q: usize) -> Vec<f64> {
    (0..q)
        .map(|c| fit.coefficient(offset + c).unwrap_or(0.0))
        .collect()
}

// ---------------------------------------------------------------------------
// Fisher.

/// Additive OLS display: intercept, treatment, stratum dummies, covariates.
///
/// The variance is the classical OLS estimate at equal allocation, where it
/// is consistent. At unequal allocation the OLS estimate understates the
/// sampling variance, so the plug-in on the display's covariate-adjusted
/// residuals is attached instead (the reported intervals then stay valid
/// even on this discouraged path).
pub fn fit_fisher(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
    spec: &EstimatorSpec,
) -> Result<AdjustedEstimate, EstimatorError> {
    let n = data.n();
    let k_total = index.stratum_count();
    let q = u.cols();

    let mut design = Matrix::empty(n);
    design.push_col(&intercept_col(n));
    design.push_col(&treatment_col(data));
    push_stratum_dummies(&mut design, data, k_total);
    push_u_columns(&mut design, u);
    let offset = 1 + 1 + (k_total - 1);

    let fit = ols_fit(&design, data.outcomes())?;
    let tau_hat = fit.coefficient(1).ok_or(EstimatorError::DesignDegenerate)?;
    let equal_allocation = (spec.pi - 0.5).abs() < 1e-12;
    let mut df_adjusted = false;
    let sigma2 = if equal_allocation {
        ols_variance(&fit, 1, n).ok_or(EstimatorError::DesignDegenerate)?
    } else {
        let beta = u_slopes(&fit, offset, q);
        let residuals: Vec<f64> = (0..n)
            .map(|i| data.outcome(i) - u.row_dot(i, &beta))
            .collect();
        df_adjusted = spec.resolve_df(n, q);
        let slopes = q - dropped_u_columns(&fit, offset, q).len();
        let counts = prorated_counts(index, slopes, slopes);
        plug_in_variance(&residuals, data, index, spec.pi, df_adjusted, &counts)?.total()
    };

    #[cfg(debug_assertions)]
    if let Ok(closed) = fisher_closed_form_tau(data, index, u) {
        if dropped_u_columns(&fit, offset, q).is_empty() {
            debug_assert!(
                (closed - tau_hat).abs() <= 1e-8 * (1.0 + tau_hat.abs()),
                "additive display {tau_hat} disagrees with closed form {closed}"
            );
        }
    }

    let diagnostics = Diagnostics {
        covariate_columns: q,
        dropped_covariates: dropped_u_columns(&fit, offset, q),
        per_stratum_arms: per_stratum_arms(index),
        benchmark_equivalent: false,
        df_adjusted,
        warnings: if equal_allocation {
            Vec::new()
        } else {
            vec!["OLS variance is inconsistent at unequal allocation; plug-in variance attached".into()]
        },
        n,
    };
    Ok(finish(
        tau_hat,
        sigma2,
        n,
        spec,
        CoefficientReport::Pooled(u_slopes(&fit, offset, q)),
        diagnostics,
    ))
}

/// Closed-form route for the additive display: stratum-weighted arm
/// differences with weights proportional to `pi_n[k] (1 - pi_n[k]) p_n[k]`,
/// with the pooled slope solved from stratum-centered moment sums.
pub fn fisher_closed_form_tau(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
) -> Result<f64, EstimatorError> {
    let k_total = index.stratum_count();
    let q = u.cols();
    let n = data.n() as f64;
    let means = cell_means(data, index, u);

    let mut weight_sum = 0.0;
    let mut omega = vec![0.0; k_total];
    for k in 0..k_total {
        let c = index.counts(k);
        omega[k] = c.treated_fraction * (1.0 - c.treated_fraction) * c.proportion;
        weight_sum += omega[k];
    }
    for w in &mut omega {
        *w /= weight_sum;
    }

    let tau_raw: f64 = (0..k_total)
        .map(|k| omega[k] * (means.y_treated[k] - means.y_control[k]))
        .sum();
    if q == 0 {
        return Ok(tau_raw);
    }

    // Stratum-centered second moments pooled over all rows.
    let mut s_uu = Matrix::zeros(q, q);
    let mut s_uy = vec![0.0; q];
    for k in 0..k_total {
        let uk = &means.u_all[k];
        let yk: f64 = index
            .members(k)
            .iter()
            .map(|&i| data.outcome(i))
            .sum::<f64>()
            / index.counts(k).n as f64;
        for &i in index.members(k) {
            let dy = data.outcome(i) - yk;
            for a in 0..q {
                let da = u.get(i, a) - uk[a];
                s_uy[a] += da * dy / n;
                for b in a..q {
                    let db = u.get(i, b) - uk[b];
                    let v = s_uu.get(a, b) + da * db / n;
                    s_uu.set(a, b, v);
                }
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            let v = s_uu.get(b, a);
            s_uu.set(a, b, v);
        }
    }

    let tau_u: Vec<f64> = (0..q)
        .map(|c| {
            (0..k_total)
                .map(|k| omega[k] * (means.u_treated[k][c] - means.u_control[k][c]))
                .sum()
        })
        .collect();
    let scale: f64 = (0..k_total)
        .map(|k| {
            let c = index.counts(k);
            c.treated_fraction * (1.0 - c.treated_fraction) * c.proportion
        })
        .sum();

    let mut lhs = Matrix::zeros(q, q);
    for a in 0..q {
        for b in 0..q {
            lhs.set(a, b, s_uu.get(a, b) - tau_u[a] * tau_u[b] * scale);
        }
    }
    let rhs: Vec<f64> = (0..q)
        .map(|c| s_uy[c] - tau_raw * tau_u[c] * scale)
        .collect();
    let beta = solve_square(&lhs, &rhs).ok_or(EstimatorError::DesignDegenerate)?;

    Ok((0..k_total)
        .map(|k| {
            let du: Vec<f64> = (0..q)
                .map(|c| means.u_treated[k][c] - means.u_control[k][c])
                .collect();
            omega[k] * (means.y_treated[k] - means.y_control[k] - dot(&du, &beta))
        })
        .sum())
}

// ---------------------------------------------------------------------------
// Lin.

/// Fully interacted adjustment via separate per-arm regressions.
pub fn fit_lin(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
    spec: &EstimatorSpec,
) -> Result<AdjustedEstimate, EstimatorError> {
    let n = data.n();
    let k_total = index.stratum_count();
    let q = u.cols();

    let mut fits: [Option<RegressionFit>; 2] = [None, None];
    for arm in [1u8, 0u8] {
        let rows: Vec<usize> = (0..n).filter(|&i| data.treatment()[i] == arm).collect();
        let needed = k_total + q;
        if rows.len() <= needed {
            return Err(EstimatorError::InsufficientArmRows {
                arm,
                needed,
                have: rows.len(),
            });
        }
        let mut design = Matrix::empty(rows.len());
        design.push_col(&vec![1.0; rows.len()]);
        for k in 0..k_total - 1 {
            let col: Vec<f64> = rows
                .iter()
                .map(|&i| f64::from(data.stratum(i) == k))
                .collect();
            design.push_col(&col);
        }
        for c in 0..q {
            let col: Vec<f64> = rows.iter().map(|&i| u.get(i, c)).collect();
            design.push_col(&col);
        }
        let y: Vec<f64> = rows.iter().map(|&i| data.outcome(i)).collect();
        fits[arm as usize] = Some(ols_fit(&design, &y)?);
    }
    let fit_control = fits[0].take().unwrap();
    let fit_treated = fits[1].take().unwrap();
    let offset = k_total; // intercept + (K-1) dummies ahead of U

    let beta_treated = u_slopes(&fit_treated, offset, q);
    let beta_control = u_slopes(&fit_control, offset, q);

    let means = cell_means(data, index, u);
    let tau_hat: f64 = (0..k_total)
        .map(|k| {
            let p = index.counts(k).proportion;
            let dt: Vec<f64> = (0..q)
                .map(|c| means.u_treated[k][c] - means.u_all[k][c])
                .collect();
            let dc: Vec<f64> = (0..q)
                .map(|c| means.u_control[k][c] - means.u_all[k][c])
                .collect();
            p * ((means.y_treated[k] - dot(&dt, &beta_treated))
                - (means.y_control[k] - dot(&dc, &beta_control)))
        })
        .sum();

    #[cfg(debug_assertions)]
    if let Ok(display) = lin_display_tau(data, index, u) {
        let same_rank = fit_treated.kept_columns.len() == offset + q
            && fit_control.kept_columns.len() == offset + q;
        if same_rank {
            debug_assert!(
                (display - tau_hat).abs() <= 1e-8 * (1.0 + tau_hat.abs()),
                "interacted display {display} disagrees with per-arm combination {tau_hat}"
            );
        }
    }

    // Residuals with the allocation-mixed slope, then the plug-in variance.
    let beta_mixed: Vec<f64> = (0..q)
        .map(|c| (1.0 - spec.pi) * beta_treated[c] + spec.pi * beta_control[c])
        .collect();
    let residuals: Vec<f64> = (0..n)
        .map(|i| data.outcome(i) - u.row_dot(i, &beta_mixed))
        .collect();

    let df = spec.resolve_df(n, q);
    let counts = prorated_counts(
        index,
        q - dropped_u_columns(&fit_treated, offset, q).len(),
        q - dropped_u_columns(&fit_control, offset, q).len(),
    );
    let vc = plug_in_variance(&residuals, data, index, spec.pi, df, &counts)?;

    let mut dropped = dropped_u_columns(&fit_treated, offset, q);
    for c in dropped_u_columns(&fit_control, offset, q) {
        if !dropped.contains(&c) {
            dropped.push(c);
        }
    }
    let diagnostics = Diagnostics {
        covariate_columns: q,
        dropped_covariates: dropped,
        per_stratum_arms: per_stratum_arms(index),
        benchmark_equivalent: false,
        df_adjusted: df,
        warnings: Vec::new(),
        n,
    };
    Ok(finish(
        tau_hat,
        vc.total(),
        n,
        spec,
        CoefficientReport::PerArm {
            treated: beta_treated,
            control: beta_control,
        },
        diagnostics,
    ))
}

/// The single fully interacted OLS display; its treatment coefficient equals
/// the per-arm combination exactly.
pub fn lin_display_tau(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
) -> Result<f64, EstimatorError> {
    let n = data.n();
    let k_total = index.stratum_count();
    let mut design = Matrix::empty(n);
    design.push_col(&intercept_col(n));
    design.push_col(&treatment_col(data));
    push_stratum_dummies(&mut design, data, k_total);
    push_centered_dummies(&mut design, data, index, true);
    push_u_columns(&mut design, u);
    let u_means = u.col_means();
    for c in 0..u.cols() {
        let col: Vec<f64> = (0..n)
            .map(|i| f64::from(data.is_treated(i)) * (u.get(i, c) - u_means[c]))
            .collect();
        design.push_col(&col);
    }
    let fit = ols_fit(&design, data.outcomes())?;
    fit.coefficient(1).ok_or(EstimatorError::DesignDegenerate)
}

// ---------------------------------------------------------------------------
// ToM.

fn tom_weights(data: &TrialData, pi: f64) -> Vec<f64> {
    let w1 = 1.0 / (pi * pi);
    let w0 = 1.0 / ((1.0 - pi) * (1.0 - pi));
    data.treatment()
        .iter()
        .map(|&a| if a == 1 { w1 } else { w0 })
        .collect()
}

/// Minority-weighted display: intercept, treatment, centered stratum
/// dummies, their treatment interactions, and pooled covariate columns,
/// fitted by WLS with weights `A/pi^2 + (1-A)/(1-pi)^2`. The target
/// proportion enters the weights, not the realized one.
pub fn fit_tom(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
    spec: &EstimatorSpec,
) -> Result<AdjustedEstimate, EstimatorError> {
    let n = data.n();
    let k_total = index.stratum_count();
    let q = u.cols();

    let mut design = Matrix::empty(n);
    design.push_col(&intercept_col(n));
    design.push_col(&treatment_col(data));
    push_centered_dummies(&mut design, data, index, false);
    push_centered_dummies(&mut design, data, index, true);
    push_u_columns(&mut design, u);
    let offset = 2 + 2 * (k_total - 1);

    let weights = Weights::PerRow(tom_weights(data, spec.pi));
    let fit = wls_fit(&design, data.outcomes(), &weights, DEFAULT_RANK_TOLERANCE)?;
    let tau_hat = fit.coefficient(1).ok_or(EstimatorError::DesignDegenerate)?;
    let beta = u_slopes(&fit, offset, q);

    #[cfg(debug_assertions)]
    if let Ok(closed) = tom_closed_form(data, index, u) {
        if dropped_u_columns(&fit, offset, q).is_empty() && stratum_proportions_exact(index, spec.pi)
        {
            debug_assert!(
                (closed.tau_hat - tau_hat).abs() <= 1e-8 * (1.0 + tau_hat.abs()),
                "weighted display {tau_hat} disagrees with closed form {}",
                closed.tau_hat
            );
        }
    }

    let residuals: Vec<f64> = (0..n)
        .map(|i| data.outcome(i) - u.row_dot(i, &beta))
        .collect();
    let df = spec.resolve_df(n, q);
    let slopes = q - dropped_u_columns(&fit, offset, q).len();
    let counts = prorated_counts(index, slopes, slopes);
    let vc = plug_in_variance(&residuals, data, index, spec.pi, df, &counts)?;

    let diagnostics = Diagnostics {
        covariate_columns: q,
        dropped_covariates: dropped_u_columns(&fit, offset, q),
        per_stratum_arms: per_stratum_arms(index),
        benchmark_equivalent: false,
        df_adjusted: df,
        warnings: Vec::new(),
        n,
    };
    Ok(finish(
        tau_hat,
        vc.total(),
        n,
        spec,
        CoefficientReport::Pooled(beta),
        diagnostics,
    ))
}

/// True when every stratum's realized treated fraction equals `pi` exactly
/// (full permuted blocks); the closed-form route reproduces the weighted
/// display exactly in that case and only asymptotically otherwise.
pub fn stratum_proportions_exact(index: &StratumIndex, pi: f64) -> bool {
    index
        .all_counts()
        .iter()
        .all(|c| (c.treated_fraction - pi).abs() < 1e-12)
}

#[derive(Clone, Debug)]
pub struct ClosedFormTom {
    pub tau_hat: f64,
    pub beta: Vec<f64>,
}

/// Closed-form route for the minority-weighted display: the stratum-weighted
/// difference in means minus the pooled slope applied to the stratum-weighted
/// covariate difference, with the slope solved from arm-conditional stratum
/// moments scaled by the realized arm fractions.
pub fn tom_closed_form(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
) -> Result<ClosedFormTom, EstimatorError> {
    let k_total = index.stratum_count();
    let q = u.cols();
    let means = cell_means(data, index, u);

    let tau_raw: f64 = (0..k_total)
        .map(|k| index.counts(k).proportion * (means.y_treated[k] - means.y_control[k]))
        .sum();
    if q == 0 {
        return Ok(ClosedFormTom {
            tau_hat: tau_raw,
            beta: Vec::new(),
        });
    }

    let mut lhs = Matrix::zeros(q, q);
    let mut rhs = vec![0.0; q];
    for k in 0..k_total {
        let counts = index.counts(k);
        let p = counts.proportion;
        let pin = counts.treated_fraction;
        let n1 = counts.n_treated as f64;
        let n0 = counts.n_control as f64;
        for &i in index.members(k) {
            let (um, ym, scale, nn) = if data.is_treated(i) {
                (&means.u_treated[k], means.y_treated[k], 1.0 / pin, n1)
            } else {
                (&means.u_control[k], means.y_control[k], 1.0 / (1.0 - pin), n0)
            };
            let dy = data.outcome(i) - ym;
            let f = p * scale / nn;
            for a in 0..q {
                let da = u.get(i, a) - um[a];
                rhs[a] += f * da * dy;
                for b in a..q {
                    let db = u.get(i, b) - um[b];
                    let v = lhs.get(a, b) + f * da * db;
                    lhs.set(a, b, v);
                }
            }
        }
    }
    for a in 0..q {
        for b in 0..a {
            let v = lhs.get(b, a);
            lhs.set(a, b, v);
        }
    }
    let beta = solve_square(&lhs, &rhs).ok_or(EstimatorError::DesignDegenerate)?;

    let tau_u: Vec<f64> = (0..q)
        .map(|c| {
            (0..k_total)
                .map(|k| {
                    index.counts(k).proportion * (means.u_treated[k][c] - means.u_control[k][c])
                })
                .sum()
        })
        .collect();
    Ok(ClosedFormTom {
        tau_hat: tau_raw - dot(&beta, &tau_u),
        beta,
    })
}

// ---------------------------------------------------------------------------
// Stratum-specific fits.

/// Run the chosen regression independently inside each stratum and combine
/// the per-stratum effects with stratum-size weights.
pub fn fit_stratum_specific(
    data: &TrialData,
    index: &StratumIndex,
    u: &Matrix,
    spec: &EstimatorSpec,
) -> Result<AdjustedEstimate, EstimatorError> {
    let n = data.n();
    let k_total = index.stratum_count();
    let q = u.cols();

    // Every cell needs enough rows for an intercept, the effect, and the
    // covariate block.
    let needed = q + 2;
    for k in 0..k_total {
        let c = index.counts(k);
        for (arm, have) in [(1u8, c.n_treated), (0u8, c.n_control)] {
            if have < needed {
                return Err(EstimatorError::StratumTooSmall {
                    stratum: k + 1,
                    arm,
                    needed,
                    have,
                });
            }
        }
    }

    let means = cell_means(data, index, u);
    let df = spec.resolve_df(n, q);

    let mut tau_hat = 0.0;
    let mut per_stratum_coefficients = Vec::with_capacity(k_total);
    let mut dropped: Vec<usize> = Vec::new();
    let mut note_dropped = |cols: Vec<usize>| {
        for c in cols {
            if !dropped.contains(&c) {
                dropped.push(c);
            }
        }
    };

    let sigma2 = match spec.regression {
        RegressionKind::Fisher => {
            // Per-stratum additive OLS. At equal allocation the variance is
            // the stratum-size weighted sum of per-stratum OLS variances
            // (each scaled by its own stratum size); at unequal allocation
            // those are inconsistent and the global plug-in on the
            // per-stratum adjusted residuals is attached instead.
            let equal_allocation = (spec.pi - 0.5).abs() < 1e-12;
            let mut ols_total = 0.0;
            let mut beta_by_stratum: Vec<Vec<f64>> = Vec::with_capacity(k_total);
            let mut kept_counts = Vec::with_capacity(k_total);
            for k in 0..k_total {
                let rows = index.members(k);
                let mut design = Matrix::empty(rows.len());
                design.push_col(&vec![1.0; rows.len()]);
                let a_col: Vec<f64> = rows
                    .iter()
                    .map(|&i| f64::from(data.is_treated(i)))
                    .collect();
                design.push_col(&a_col);
                for c in 0..q {
                    let col: Vec<f64> = rows.iter().map(|&i| u.get(i, c)).collect();
                    design.push_col(&col);
                }
                let y: Vec<f64> = rows.iter().map(|&i| data.outcome(i)).collect();
                let fit = ols_fit(&design, &y)?;
                let tau_k = fit.coefficient(1).ok_or(EstimatorError::DesignDegenerate)?;
                let var_k =
                    ols_variance(&fit, 1, rows.len()).ok_or(EstimatorError::DesignDegenerate)?;
                let p = index.counts(k).proportion;
                tau_hat += p * tau_k;
                ols_total += p * var_k;
                note_dropped(dropped_u_columns(&fit, 2, q));
                // Each cell pays its intercept plus a size-proportional
                // share of the stratum's pooled slopes.
                let slopes = (q - dropped_u_columns(&fit, 2, q).len()) as f64;
                let c = index.counts(k);
                kept_counts.push((
                    1.0 + slopes * c.n_treated as f64 / c.n as f64,
                    1.0 + slopes * c.n_control as f64 / c.n as f64,
                ));
                let beta = u_slopes(&fit, 2, q);
                per_stratum_coefficients.push(CoefficientReport::Pooled(beta.clone()));
                beta_by_stratum.push(beta);
            }
            if equal_allocation {
                ols_total
            } else {
                let residuals: Vec<f64> = (0..n)
                    .map(|i| data.outcome(i) - u.row_dot(i, &beta_by_stratum[data.stratum(i)]))
                    .collect();
                plug_in_variance(
                    &residuals,
                    data,
                    index,
                    spec.pi,
                    df,
                    &ParamCounts::PerStratum(kept_counts),
                )?
                .total()
            }
        }
        RegressionKind::Lin => {
            // Per-stratum, per-arm regressions on an intercept and U.
            let mut beta_by_stratum: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(k_total);
            let mut kept_counts = Vec::with_capacity(k_total);
            for k in 0..k_total {
                let mut betas: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
                let mut kept = (0.0f64, 0.0f64);
                for arm in [1u8, 0u8] {
                    let rows: Vec<usize> = index
                        .members(k)
                        .iter()
                        .copied()
                        .filter(|&i| data.treatment()[i] == arm)
                        .collect();
                    let mut design = Matrix::empty(rows.len());
                    design.push_col(&vec![1.0; rows.len()]);
                    for c in 0..q {
                        let col: Vec<f64> = rows.iter().map(|&i| u.get(i, c)).collect();
                        design.push_col(&col);
                    }
                    let y: Vec<f64> = rows.iter().map(|&i| data.outcome(i)).collect();
                    let fit = ols_fit(&design, &y)?;
                    note_dropped(dropped_u_columns(&fit, 1, q));
                    if arm == 1 {
                        kept.0 = fit.kept_columns.len() as f64;
                    } else {
                        kept.1 = fit.kept_columns.len() as f64;
                    }
                    betas[arm as usize] = u_slopes(&fit, 1, q);
                }
                let [beta_control, beta_treated] = betas;
                let dt: Vec<f64> = (0..q)
                    .map(|c| means.u_treated[k][c] - means.u_all[k][c])
                    .collect();
                let dc: Vec<f64> = (0..q)
                    .map(|c| means.u_control[k][c] - means.u_all[k][c])
                    .collect();
                let tau_k = (means.y_treated[k] - dot(&dt, &beta_treated))
                    - (means.y_control[k] - dot(&dc, &beta_control));
                tau_hat += index.counts(k).proportion * tau_k;
                kept_counts.push(kept);
                per_stratum_coefficients.push(CoefficientReport::PerArm {
                    treated: beta_treated.clone(),
                    control: beta_control.clone(),
                });
                beta_by_stratum.push((beta_treated, beta_control));
            }
            let residuals: Vec<f64> = (0..n)
                .map(|i| {
                    let (bt, bc) = &beta_by_stratum[data.stratum(i)];
                    let mixed: Vec<f64> = (0..q)
                        .map(|c| (1.0 - spec.pi) * bt[c] + spec.pi * bc[c])
                        .collect();
                    data.outcome(i) - u.row_dot(i, &mixed)
                })
                .collect();
            plug_in_variance(
                &residuals,
                data,
                index,
                spec.pi,
                df,
                &ParamCounts::PerStratum(kept_counts),
            )?
            .total()
        }
        RegressionKind::Tom => {
            let weights_full = tom_weights(data, spec.pi);
            let mut beta_by_stratum: Vec<Vec<f64>> = Vec::with_capacity(k_total);
            let mut kept_counts = Vec::with_capacity(k_total);
            for k in 0..k_total {
                let rows = index.members(k);
                let mut design = Matrix::empty(rows.len());
                design.push_col(&vec![1.0; rows.len()]);
                let a_col: Vec<f64> = rows
                    .iter()
                    .map(|&i| f64::from(data.is_treated(i)))
                    .collect();
                design.push_col(&a_col);
                for c in 0..q {
                    let col: Vec<f64> = rows.iter().map(|&i| u.get(i, c)).collect();
                    design.push_col(&col);
                }
                let y: Vec<f64> = rows.iter().map(|&i| data.outcome(i)).collect();
                let w: Vec<f64> = rows.iter().map(|&i| weights_full[i]).collect();
                let fit = wls_fit(&design, &y, &Weights::PerRow(w), DEFAULT_RANK_TOLERANCE)?;
                let tau_k = fit.coefficient(1).ok_or(EstimatorError::DesignDegenerate)?;
                tau_hat += index.counts(k).proportion * tau_k;
                note_dropped(dropped_u_columns(&fit, 2, q));
                let slopes = (q - dropped_u_columns(&fit, 2, q).len()) as f64;
                let c = index.counts(k);
                kept_counts.push((
                    1.0 + slopes * c.n_treated as f64 / c.n as f64,
                    1.0 + slopes * c.n_control as f64 / c.n as f64,
                ));
                let beta = u_slopes(&fit, 2, q);
                per_stratum_coefficients.push(CoefficientReport::Pooled(beta.clone()));
                beta_by_stratum.push(beta);
            }
            let residuals: Vec<f64> = (0..n)
                .map(|i| data.outcome(i) - u.row_dot(i, &beta_by_stratum[data.stratum(i)]))
                .collect();
            plug_in_variance(
                &residuals,
                data,
                index,
                spec.pi,
                df,
                &ParamCounts::PerStratum(kept_counts),
            )?
            .total()
        }
    };

    let diagnostics = Diagnostics {
        covariate_columns: q,
        dropped_covariates: dropped,
        per_stratum_arms: per_stratum_arms(index),
        benchmark_equivalent: false,
        df_adjusted: df
            && (spec.regression != RegressionKind::Fisher || (spec.pi - 0.5).abs() >= 1e-12),
        warnings: Vec::new(),
        n,
    };
    Ok(finish(
        tau_hat,
        sigma2,
        n,
        spec,
        CoefficientReport::PerStratum(per_stratum_coefficients),
        diagnostics,
    ))
}

// ---------------------------------------------------------------------------
// Benchmarks.

/// The no-extra-covariate displays: the additive stratum-dummy OLS with its
/// OLS variance, or the stratum-weighted difference in means with the
/// plug-in variance on raw outcomes.
pub fn fit_benchmark(
    data: &TrialData,
    index: &StratumIndex,
    spec: &EstimatorSpec,
) -> Result<AdjustedEstimate, EstimatorError> {
    let n = data.n();
    let k_total = index.stratum_count();
    let empty = Matrix::empty(n);
    match spec.regression {
        RegressionKind::Fisher => {
            let est = fit_fisher(data, index, &empty, spec)?;
            Ok(AdjustedEstimate {
                coefficients: CoefficientReport::None,
                ..est
            })
        }
        RegressionKind::Lin => {
            let means = cell_means(data, index, &empty);
            let tau_hat: f64 = (0..k_total)
                .map(|k| index.counts(k).proportion * (means.y_treated[k] - means.y_control[k]))
                .sum();

            #[cfg(debug_assertions)]
            if let Ok(display) = lin_display_tau(data, index, &empty) {
                debug_assert!(
                    (display - tau_hat).abs() <= 1e-8 * (1.0 + tau_hat.abs()),
                    "benchmark display {display} disagrees with stratum means {tau_hat}"
                );
            }

            let df = spec.resolve_df(n, 0);
            let counts = ParamCounts::Uniform {
                treated: 1.0,
                control: 1.0,
            };
            let vc = plug_in_variance(data.outcomes(), data, index, spec.pi, df, &counts)?;
            let diagnostics = Diagnostics {
                covariate_columns: 0,
                dropped_covariates: Vec::new(),
                per_stratum_arms: per_stratum_arms(index),
                benchmark_equivalent: false,
                df_adjusted: df,
                warnings: Vec::new(),
                n,
            };
            Ok(finish(
                tau_hat,
                vc.total(),
                n,
                spec,
                CoefficientReport::None,
                diagnostics,
            ))
        }
        RegressionKind::Tom => Err(EstimatorError::InvalidSpec(
            "benchmarks are Fisher or Lin".into(),
        )),
    }
}

/// Guard for requesting the classical OLS variance outside its validity
/// range: it is consistent for the additive display, and for the interacted
/// and weighted displays only under equal allocation.
pub fn ols_variance_for(
    regression: RegressionKind,
    pi: f64,
    fit: &RegressionFit,
    treatment_column: usize,
    n: usize,
) -> Result<f64, EstimatorError> {
    if regression != RegressionKind::Fisher && (pi - 0.5).abs() > 1e-12 {
        return Err(EstimatorError::VarianceNotValid(format!(
            "{} regression at pi = {pi} requires the plug-in variance",
            regression.tag()
        )));
    }
    ols_variance(fit, treatment_column, n).ok_or(EstimatorError::DesignDegenerate)
}

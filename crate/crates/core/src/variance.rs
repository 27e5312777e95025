//! Variance estimators and confidence intervals.
//!
//! Two routes:
//! - the classical OLS variance of the treatment coefficient (scaled by n),
//!   valid for the additive regression under equal allocation;
//! - the nonparametric plug-in built from adjusted residuals, which splits
//!   into a within-stratum part and a stratum-heterogeneity part and remains
//!   valid under unequal allocation.

use crate::model::{StratumIndex, TrialData};
use crate::regress::RegressionFit;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VarianceError {
    #[error(
        "degrees-of-freedom adjustment leaves a nonpositive denominator in \
         stratum {stratum}, arm {arm}: {n} rows minus {p} parameters"
    )]
    DfNonPositive {
        stratum: usize,
        arm: u8,
        n: usize,
        p: f64,
    },
}

/// Regressor dimension charged to each (stratum, arm) cell when adjusting
/// degrees of freedom.
///
/// Stratum-specific fits charge their literal per-cell dimension. For
/// stratum-common fits the pooled slopes are spread across cells in
/// proportion to cell size (each cell additionally pays its own fitted
/// mean), so the counts may be fractional.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamCounts {
    /// Same dimension in every stratum (stratum-common adjustments).
    Uniform { treated: f64, control: f64 },
    /// Per-stratum `(treated, control)` dimensions (stratum-specific fits).
    PerStratum(Vec<(f64, f64)>),
}

impl ParamCounts {
    fn at(&self, stratum: usize) -> (f64, f64) {
        match self {
            ParamCounts::Uniform { treated, control } => (*treated, *control),
            ParamCounts::PerStratum(v) => v[stratum],
        }
    }
}

/// Per-stratum pieces of the plug-in variance.
#[derive(Clone, Debug, Serialize)]
pub struct StratumVariancePieces {
    pub stratum: usize,
    /// Contribution of the treated arm to the within-stratum part.
    pub treated_term: f64,
    /// Contribution of the control arm to the within-stratum part.
    pub control_term: f64,
    /// Contribution to the stratum-heterogeneity part.
    pub heterogeneity_term: f64,
}

/// The pair of plug-in variance components; the estimate is their sum.
#[derive(Clone, Debug, Serialize)]
pub struct VarianceComponents {
    /// Within-stratum residual-variance part.
    pub varsigma_r2: f64,
    /// Between-stratum effect-heterogeneity part.
    pub varsigma_h2: f64,
    pub per_stratum: Vec<StratumVariancePieces>,
    pub df_adjusted: bool,
}

impl VarianceComponents {
    pub fn total(&self) -> f64 {
        self.varsigma_r2 + self.varsigma_h2
    }
}

/// Nonparametric plug-in variance from adjusted residuals.
///
/// The within-stratum part averages squared arm-centered residuals with
/// denominators `n_[k]a` (or `n_[k]a - p_[k]a` under the df adjustment) and
/// weights `p_n[k]`, scaling the arms by `1/pi` and `1/(1-pi)`. The
/// heterogeneity part is the `p_n[k]`-weighted squared difference of
/// arm-centered stratum means.
pub fn plug_in_variance(
    residuals: &[f64],
    data: &TrialData,
    index: &StratumIndex,
    pi: f64,
    df_adjust: bool,
    param_counts: &ParamCounts,
) -> Result<VarianceComponents, VarianceError> {
    let n = data.n();
    assert_eq!(residuals.len(), n, "residual length mismatch");

    // Global arm means of the residuals.
    let mut sum1 = 0.0;
    let mut sum0 = 0.0;
    let mut n1 = 0usize;
    for i in 0..n {
        if data.is_treated(i) {
            sum1 += residuals[i];
            n1 += 1;
        } else {
            sum0 += residuals[i];
        }
    }
    let global1 = sum1 / n1 as f64;
    let global0 = sum0 / (n - n1) as f64;

    let mut varsigma_r2 = 0.0;
    let mut varsigma_h2 = 0.0;
    let mut per_stratum = Vec::with_capacity(index.stratum_count());

    for k in 0..index.stratum_count() {
        let counts = index.counts(k);
        let members = index.members(k);

        let mut m1 = 0.0;
        let mut m0 = 0.0;
        for &i in members {
            if data.is_treated(i) {
                m1 += residuals[i];
            } else {
                m0 += residuals[i];
            }
        }
        m1 /= counts.n_treated as f64;
        m0 /= counts.n_control as f64;

        let mut ss1 = 0.0;
        let mut ss0 = 0.0;
        for &i in members {
            let r = residuals[i];
            if data.is_treated(i) {
                ss1 += (r - m1) * (r - m1);
            } else {
                ss0 += (r - m0) * (r - m0);
            }
        }

        let (p1, p0) = if df_adjust {
            param_counts.at(k)
        } else {
            (0.0, 0.0)
        };
        let den1 = counts.n_treated as f64 - p1;
        let den0 = counts.n_control as f64 - p0;
        if df_adjust && den1 <= 0.0 {
            return Err(VarianceError::DfNonPositive {
                stratum: k + 1,
                arm: 1,
                n: counts.n_treated,
                p: p1,
            });
        }
        if df_adjust && den0 <= 0.0 {
            return Err(VarianceError::DfNonPositive {
                stratum: k + 1,
                arm: 0,
                n: counts.n_control,
                p: p0,
            });
        }

        let treated_term = counts.proportion / den1 * ss1 / pi;
        let control_term = counts.proportion / den0 * ss0 / (1.0 - pi);
        let diff = (m1 - global1) - (m0 - global0);
        let heterogeneity_term = counts.proportion * diff * diff;

        varsigma_r2 += treated_term + control_term;
        varsigma_h2 += heterogeneity_term;
        per_stratum.push(StratumVariancePieces {
            stratum: k + 1,
            treated_term,
            control_term,
            heterogeneity_term,
        });
    }

    Ok(VarianceComponents {
        varsigma_r2,
        varsigma_h2,
        per_stratum,
        df_adjusted: df_adjust,
    })
}

/// Classical OLS variance of one coefficient, scaled by n:
/// `n * s^2 * (X'X)^-1_cc` with `s^2 = RSS / dof`.
pub fn ols_variance(fit: &RegressionFit, column: usize, n: usize) -> Option<f64> {
    let factor = fit.var_factor(column)?;
    Some(n as f64 * fit.sigma2() * factor)
}

/// Two-sided normal-quantile confidence interval
/// `tau_hat +/- z_{(1+level)/2} * sqrt(sigma2_hat / n)`.
pub fn confidence_interval(
    tau_hat: f64,
    sigma2_hat: f64,
    n: usize,
    level: f64,
) -> (f64, f64) {
    assert!(sigma2_hat >= 0.0, "negative variance estimate");
    assert!(level > 0.0 && level < 1.0, "level must be in (0, 1)");
    let half = normal_quantile((1.0 + level) / 2.0) * (sigma2_hat / n as f64).sqrt();
    (tau_hat - half, tau_hat + half)
}

/// Standard-normal quantile function.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mat::Matrix;
    use crate::model::{build_index, Mask, TrialData};
    use crate::regress::ols_fit;
    use approx::assert_abs_diff_eq;

    fn toy_data(outcomes: Vec<f64>, treatment: Vec<u8>, strata: Vec<i64>) -> TrialData {
        let n = outcomes.len();
        TrialData::with_numeric_strata(
            outcomes,
            treatment,
            &strata,
            Matrix::zeros(n, 0),
            Mask::all_observed(n, 0),
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn constant_residuals_within_cells_zero_within_part() {
        // Residuals constant within every (stratum, arm) cell.
        let data = toy_data(
            vec![0.0; 8],
            vec![1, 1, 0, 0, 1, 1, 0, 0],
            vec![1, 1, 1, 1, 2, 2, 2, 2],
        );
        let index = build_index(&data).unwrap();
        let residuals = vec![3.0, 3.0, -1.0, -1.0, 5.0, 5.0, 2.0, 2.0];
        let vc = plug_in_variance(
            &residuals,
            &data,
            &index,
            0.5,
            false,
            &ParamCounts::Uniform {
                treated: 0.0,
                control: 0.0,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(vc.varsigma_r2, 0.0, epsilon = 1e-14);
        assert!(vc.varsigma_h2 > 0.0);
    }

    #[test]
    fn homogeneous_stratum_effects_zero_heterogeneity_part() {
        // (m_[k]1 - m_1) == (m_[k]0 - m_0) for every stratum.
        let data = toy_data(
            vec![0.0; 8],
            vec![1, 1, 0, 0, 1, 1, 0, 0],
            vec![1, 1, 1, 1, 2, 2, 2, 2],
        );
        let index = build_index(&data).unwrap();
        // Stratum 2 shifts both arms by +2: heterogeneity cancels.
        let residuals = vec![1.0, 3.0, 0.0, 2.0, 3.0, 5.0, 2.0, 4.0];
        let vc = plug_in_variance(
            &residuals,
            &data,
            &index,
            0.5,
            false,
            &ParamCounts::Uniform {
                treated: 0.0,
                control: 0.0,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(vc.varsigma_h2, 0.0, epsilon = 1e-14);
        assert!(vc.varsigma_r2 > 0.0);
    }

    #[test]
    fn literal_formula_oracle_on_hand_dataset() {
        // K = 2, n = 8: evaluate the two displayed sums directly.
        let residuals = vec![1.0, 2.0, 0.5, -0.5, 4.0, 6.0, 1.0, 3.0];
        let treatment = vec![1u8, 1, 0, 0, 1, 1, 0, 0];
        let strata = vec![1i64, 1, 1, 1, 2, 2, 2, 2];
        let pi = 0.5;
        let data = toy_data(vec![0.0; 8], treatment.clone(), strata.clone());
        let index = build_index(&data).unwrap();
        let vc = plug_in_variance(
            &residuals,
            &data,
            &index,
            pi,
            false,
            &ParamCounts::Uniform {
                treated: 0.0,
                control: 0.0,
            },
        )
        .unwrap();

        // Spreadsheet-style evaluation.
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        let r11 = [1.0, 2.0]; // stratum 1 treated
        let r10 = [0.5, -0.5];
        let r21 = [4.0, 6.0];
        let r20 = [1.0, 3.0];
        let p = 0.5; // both strata have 4 of 8 rows
        let within = |cell: &[f64]| -> f64 {
            let m = mean(cell);
            cell.iter().map(|r| (r - m) * (r - m)).sum::<f64>() / cell.len() as f64
        };
        let expected_r2 = (p * within(&r11) + p * within(&r21)) / pi
            + (p * within(&r10) + p * within(&r20)) / (1.0 - pi);
        let g1 = mean(&[1.0, 2.0, 4.0, 6.0]);
        let g0 = mean(&[0.5, -0.5, 1.0, 3.0]);
        let h1 = (mean(&r11) - g1) - (mean(&r10) - g0);
        let h2 = (mean(&r21) - g1) - (mean(&r20) - g0);
        let expected_h2 = p * h1 * h1 + p * h2 * h2;

        assert_abs_diff_eq!(vc.varsigma_r2, expected_r2, epsilon = 1e-12);
        assert_abs_diff_eq!(vc.varsigma_h2, expected_h2, epsilon = 1e-12);
        assert_abs_diff_eq!(
            vc.total(),
            vc.per_stratum
                .iter()
                .map(|s| s.treated_term + s.control_term + s.heterogeneity_term)
                .sum::<f64>(),
            epsilon = 1e-10
        );
    }

    #[test]
    fn df_adjustment_never_decreases_within_part() {
        let residuals = vec![1.0, 2.0, 0.5, -0.5, 4.0, 6.0, 1.0, 3.0];
        let data = toy_data(
            vec![0.0; 8],
            vec![1, 1, 0, 0, 1, 1, 0, 0],
            vec![1, 1, 1, 1, 2, 2, 2, 2],
        );
        let index = build_index(&data).unwrap();
        let plain = plug_in_variance(
            &residuals,
            &data,
            &index,
            0.5,
            false,
            &ParamCounts::Uniform {
                treated: 1.0,
                control: 1.0,
            },
        )
        .unwrap();
        let adjusted = plug_in_variance(
            &residuals,
            &data,
            &index,
            0.5,
            true,
            &ParamCounts::Uniform {
                treated: 1.0,
                control: 1.0,
            },
        )
        .unwrap();
        assert!(adjusted.varsigma_r2 >= plain.varsigma_r2);
        assert_abs_diff_eq!(adjusted.varsigma_h2, plain.varsigma_h2, epsilon = 1e-14);
    }

    #[test]
    fn df_nonpositive_reported() {
        let residuals = vec![1.0, 2.0, 0.5, -0.5];
        let data = toy_data(vec![0.0; 4], vec![1, 1, 0, 0], vec![1, 1, 1, 1]);
        let index = build_index(&data).unwrap();
        let err = plug_in_variance(
            &residuals,
            &data,
            &index,
            0.5,
            true,
            &ParamCounts::Uniform {
                treated: 2.0,
                control: 2.0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, VarianceError::DfNonPositive { arm: 1, .. }));
    }

    #[test]
    fn ols_variance_zero_residuals() {
        let design = Matrix::from_columns(&[vec![1.0; 4], vec![1.0, 1.0, 0.0, 0.0]]);
        let y = vec![3.0, 3.0, 1.0, 1.0];
        let fit = ols_fit(&design, &y).unwrap();
        assert_abs_diff_eq!(ols_variance(&fit, 1, 4).unwrap(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn ols_variance_two_group_closed_form() {
        // One stratum, no covariates: n * s^2 * (1/n1 + 1/n0).
        let a = vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let design = Matrix::from_columns(&[vec![1.0; 8], a.clone()]);
        let y = vec![3.0, 5.0, 4.0, 1.0, 2.0, 1.5, 0.5, 1.0];
        let fit = ols_fit(&design, &y).unwrap();
        let got = ols_variance(&fit, 1, 8).unwrap();
        let s2 = fit.sigma2();
        let expected = 8.0 * s2 * (1.0 / 3.0 + 1.0 / 5.0);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-10);
    }

    #[test]
    fn confidence_interval_examples() {
        // Degenerate variance collapses the interval.
        assert_eq!(confidence_interval(2.0, 0.0, 10, 0.95), (2.0, 2.0));
        // sigma2/n = 1 at level 0.95.
        let (lo, hi) = confidence_interval(0.0, 100.0, 100, 0.95);
        assert_abs_diff_eq!(hi, 1.959964, epsilon = 5e-7);
        assert_abs_diff_eq!(lo, -1.959964, epsilon = 5e-7);
    }

    /// Independent quantile oracle: bisection on the standard normal CDF
    /// computed by Simpson integration of the density.
    fn quantile_by_bisection(p: f64) -> f64 {
        let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = |x: f64| {
            // Integrate from -12 (CDF there < 1e-32) with 48,000 panels.
            let a = -12.0;
            let m = 48_000;
            let h = (x - a) / m as f64;
            let mut acc = pdf(a) + pdf(x);
            for i in 1..m {
                let xi = a + i as f64 * h;
                acc += pdf(xi) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            acc * h / 3.0
        };
        let (mut lo, mut hi) = (-12.0, 12.0);
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn quantile_matches_independent_routine() {
        for &p in &[0.975, 0.95, 0.9, 0.6, 0.5] {
            let independent = quantile_by_bisection(p);
            assert_abs_diff_eq!(normal_quantile(p), independent, epsilon = 1e-6);
        }
        assert_abs_diff_eq!(normal_quantile(0.975), 1.959964, epsilon = 5e-7);
    }
}

//! Missingness processors: turn the covariate matrix and its mask into the
//! adjusted regressor set handed to the estimators.
//!
//! - `ccov` keeps only fully observed covariate columns;
//! - `imp` fills masked cells with a per-column value;
//! - `mim` is `imp` plus the missingness indicators themselves as extra
//!   columns (all-zero and duplicate indicator columns removed here; any
//!   remaining collinearity falls to the regression kernel's rank guard);
//! - `cc` deletes rows with any masked cell. It is exposed only for the
//!   bias-demonstration path and should not be used for analysis.

use crate::mat::Matrix;
use crate::model::{DataError, TrialData};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MissingnessError {
    #[error("column {col} has no observed entries to average")]
    AllMissingColumn { col: usize },
    #[error("no complete rows in stratum {stratum}, arm {arm}")]
    NoCompleteRows { stratum: usize, arm: u8 },
    #[error("missingness method '{0}' is not supported")]
    MethodNotSupported(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MissingnessMethod {
    Cc,
    Ccov,
    Imp,
    Mim,
}

impl MissingnessMethod {
    pub fn tag(self) -> &'static str {
        match self {
            MissingnessMethod::Cc => "cc",
            MissingnessMethod::Ccov => "ccov",
            MissingnessMethod::Imp => "imp",
            MissingnessMethod::Mim => "mim",
        }
    }

    pub fn parse(s: &str) -> Result<Self, MissingnessError> {
        match s {
            "cc" => Ok(MissingnessMethod::Cc),
            "ccov" => Ok(MissingnessMethod::Ccov),
            "imp" => Ok(MissingnessMethod::Imp),
            "mim" => Ok(MissingnessMethod::Mim),
            other => Err(MissingnessError::MethodNotSupported(other.to_string())),
        }
    }
}

/// Where each design column came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum ColumnProvenance {
    /// Covariate column `j`, fully observed.
    Original(usize),
    /// Covariate column `j` with masked cells imputed.
    Imputed(usize),
    /// Missingness indicator of covariate column `j`.
    Indicator(usize),
}

/// Per-column imputation policy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ImputePolicy {
    /// Mean of the observed entries of the column.
    ObservedMean,
    Constant(f64),
}

/// The adjusted design columns produced by a missingness processor.
#[derive(Clone, Debug)]
pub struct ProcessedCovariates {
    pub method: MissingnessMethod,
    pub design: Matrix,
    pub provenance: Vec<ColumnProvenance>,
    /// Imputation values per covariate column (`imp`/`mim` only).
    pub imputation_values: Option<Vec<f64>>,
    /// Surviving row indices (`cc` only).
    pub kept_rows: Option<Vec<usize>>,
}

impl ProcessedCovariates {
    pub fn column_count(&self) -> usize {
        self.design.cols()
    }

    /// A design with zero columns, for the benchmark estimators.
    pub fn none(n: usize) -> Self {
        ProcessedCovariates {
            method: MissingnessMethod::Ccov,
            design: Matrix::empty(n),
            provenance: Vec::new(),
            imputation_values: None,
            kept_rows: None,
        }
    }
}

/// Keep exactly the covariate columns without any masked cell. An empty
/// design is legal; the estimators then reduce to their benchmarks.
pub fn process_ccov(data: &TrialData) -> ProcessedCovariates {
    let mut design = Matrix::empty(data.n());
    let mut provenance = Vec::new();
    for j in 0..data.covariate_count() {
        if data.mask().col_missing_count(j) == 0 {
            design.push_col(data.covariates_raw().col(j));
            provenance.push(ColumnProvenance::Original(j));
        }
    }
    ProcessedCovariates {
        method: MissingnessMethod::Ccov,
        design,
        provenance,
        imputation_values: None,
        kept_rows: None,
    }
}

fn imputation_vector(data: &TrialData, policy: ImputePolicy) -> Result<Vec<f64>, MissingnessError> {
    (0..data.covariate_count())
        .map(|j| match policy {
            ImputePolicy::Constant(c) => Ok(c),
            ImputePolicy::ObservedMean => {
                let mut sum = 0.0;
                let mut count = 0usize;
                for i in 0..data.n() {
                    if !data.is_missing(i, j) {
                        sum += data.covariate(i, j);
                        count += 1;
                    }
                }
                if count == 0 {
                    Err(MissingnessError::AllMissingColumn { col: j })
                } else {
                    Ok(sum / count as f64)
                }
            }
        })
        .collect()
}

fn imputed_matrix(data: &TrialData, values: &[f64]) -> (Matrix, Vec<ColumnProvenance>) {
    let n = data.n();
    let mut design = Matrix::empty(n);
    let mut provenance = Vec::new();
    for j in 0..data.covariate_count() {
        let mut col = Vec::with_capacity(n);
        for i in 0..n {
            col.push(if data.is_missing(i, j) {
                values[j]
            } else {
                data.covariate(i, j)
            });
        }
        design.push_col(&col);
        provenance.push(if data.mask().col_missing_count(j) > 0 {
            ColumnProvenance::Imputed(j)
        } else {
            ColumnProvenance::Original(j)
        });
    }
    (design, provenance)
}

/// Single imputation: fill each masked cell of column `j` with the policy's
/// per-column value.
pub fn process_imp(
    data: &TrialData,
    policy: ImputePolicy,
) -> Result<ProcessedCovariates, MissingnessError> {
    let values = imputation_vector(data, policy)?;
    let (design, provenance) = imputed_matrix(data, &values);
    Ok(ProcessedCovariates {
        method: MissingnessMethod::Imp,
        design,
        provenance,
        imputation_values: Some(values),
        kept_rows: None,
    })
}

/// Missing-indicator method: the imputed covariates followed by the mask
/// columns that are neither all-zero nor duplicates of an earlier kept mask
/// column.
pub fn process_mim(
    data: &TrialData,
    policy: ImputePolicy,
) -> Result<ProcessedCovariates, MissingnessError> {
    let values = imputation_vector(data, policy)?;
    let (mut design, mut provenance) = imputed_matrix(data, &values);

    let mask = data.mask();
    let mut kept_masks: Vec<&[bool]> = Vec::new();
    for j in 0..data.covariate_count() {
        let col = mask.col(j);
        if col.iter().all(|&m| !m) {
            continue;
        }
        // Exact bit equality; masks are binary so no tolerance applies.
        if kept_masks.contains(&col) {
            continue;
        }
        kept_masks.push(col);
        let indicator: Vec<f64> = col.iter().map(|&m| f64::from(m)).collect();
        design.push_col(&indicator);
        provenance.push(ColumnProvenance::Indicator(j));
    }

    Ok(ProcessedCovariates {
        method: MissingnessMethod::Mim,
        design,
        provenance,
        imputation_values: Some(values),
        kept_rows: None,
    })
}

/// Complete-case analysis: delete every row with a masked cell and keep the
/// full covariate matrix on the survivors.
///
/// This estimates the treatment effect among complete cases, which can be
/// badly biased when missingness is related to the outcomes. Callers should
/// surface that warning; see [`CC_WARNING`].
pub fn process_cc(data: &TrialData) -> Result<(TrialData, ProcessedCovariates), MissingnessError> {
    let kept: Vec<usize> = (0..data.n())
        .filter(|&i| data.mask().row_is_complete(i))
        .collect();

    // Require at least one surviving row per stratum per arm.
    for k in 0..data.stratum_count() {
        for arm in [1u8, 0u8] {
            let any = kept
                .iter()
                .any(|&i| data.stratum(i) == k && data.treatment()[i] == arm);
            if !any {
                return Err(MissingnessError::NoCompleteRows {
                    stratum: k + 1,
                    arm,
                });
            }
        }
    }

    let reduced = data.subset(&kept)?;
    let design = reduced.covariates_raw().clone();
    let provenance = (0..design.cols()).map(ColumnProvenance::Original).collect();
    Ok((
        reduced,
        ProcessedCovariates {
            method: MissingnessMethod::Cc,
            design,
            provenance,
            imputation_values: None,
            kept_rows: Some(kept),
        },
    ))
}

/// Warning attached to every complete-case result.
pub const CC_WARNING: &str = "complete-case analysis deletes incomplete rows and can be \
severely biased when missingness is related to outcomes; it is provided for demonstration \
only -- prefer ccov, imp, or mim";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mask;

    fn data_with_mask(x: Vec<Vec<f64>>, missing: &[(usize, usize)]) -> TrialData {
        let n = x[0].len();
        let mut mask = Mask::all_observed(n, x.len());
        for &(r, c) in missing {
            mask.set(r, c, true);
        }
        let treatment: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        TrialData::with_numeric_strata(
            (0..n).map(|i| i as f64).collect(),
            treatment,
            &vec![1i64; n],
            Matrix::from_columns(&x),
            mask,
            0.5,
        )
        .unwrap()
    }

    #[test]
    fn ccov_with_clean_mask_keeps_everything() {
        let d = data_with_mask(vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]], &[]);
        let p = process_ccov(&d);
        assert_eq!(p.column_count(), 2);
        assert_eq!(
            p.provenance,
            vec![ColumnProvenance::Original(0), ColumnProvenance::Original(1)]
        );
        assert_eq!(p.design.col(0), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn ccov_drops_column_with_single_missing_cell() {
        let d = data_with_mask(
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]],
            &[(2, 1)],
        );
        let p = process_ccov(&d);
        assert_eq!(p.provenance, vec![ColumnProvenance::Original(0)]);
    }

    #[test]
    fn ccov_matches_direct_scan_on_random_mask() {
        let mut state = 12345u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (state >> 33) as usize
        };
        let n = 200;
        let p = 7;
        let cols: Vec<Vec<f64>> = (0..p).map(|j| (0..n).map(|i| (i + j) as f64).collect()).collect();
        let mut missing = Vec::new();
        for j in 3..p {
            for i in 0..n {
                if next() % 10 == 0 {
                    missing.push((i, j));
                }
            }
        }
        // Ensure the dirty columns really have a masked cell.
        for j in 3..p {
            missing.push((j, j));
        }
        let d = data_with_mask(cols, &missing);
        let proc = process_ccov(&d);
        let expected: Vec<ColumnProvenance> =
            (0..3).map(ColumnProvenance::Original).collect();
        assert_eq!(proc.provenance, expected);
        assert_eq!(proc.column_count(), 3);
    }

    #[test]
    fn imp_observed_mean_fills_gaps() {
        let d = data_with_mask(vec![vec![1.0, 99.0, 3.0, 4.0]], &[(1, 0)]);
        let p = process_imp(&d, ImputePolicy::ObservedMean).unwrap();
        // Mean of {1, 3, 4} = 8/3.
        assert!((p.design.get(1, 0) - 8.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.design.get(0, 0), 1.0);
        assert_eq!(p.provenance, vec![ColumnProvenance::Imputed(0)]);
    }

    #[test]
    fn imp_constant_on_fully_observed_column_is_identity() {
        let d = data_with_mask(vec![vec![1.0, 2.0, 3.0, 4.0]], &[]);
        let p = process_imp(&d, ImputePolicy::Constant(0.0)).unwrap();
        assert_eq!(p.design.col(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(p.provenance, vec![ColumnProvenance::Original(0)]);
    }

    #[test]
    fn imp_matches_cell_by_cell_reference_loop() {
        let mut state = 777u64;
        let mut next = move || {
            state = state.wrapping_mul(2862933555777941757).wrapping_add(3037000493);
            (state >> 33) as f64 / (1u64 << 31) as f64
        };
        let n = 200;
        let pcols = 7;
        let cols: Vec<Vec<f64>> = (0..pcols)
            .map(|_| (0..n).map(|_| next() * 10.0 - 5.0).collect())
            .collect();
        let mut missing = Vec::new();
        for j in 0..pcols {
            for i in 0..n {
                if next() < 0.2 {
                    missing.push((i, j));
                }
            }
        }
        let d = data_with_mask(cols.clone(), &missing);
        let proc = process_imp(&d, ImputePolicy::ObservedMean).unwrap();
        let chat = proc.imputation_values.as_ref().unwrap();
        for j in 0..pcols {
            for i in 0..n {
                let expected = if d.is_missing(i, j) { chat[j] } else { cols[j][i] };
                assert_eq!(proc.design.get(i, j), expected);
            }
        }
    }

    #[test]
    fn imp_all_missing_column_rejected() {
        let d = data_with_mask(vec![vec![1.0, 2.0]], &[(0, 0), (1, 0)]);
        assert!(matches!(
            process_imp(&d, ImputePolicy::ObservedMean),
            Err(MissingnessError::AllMissingColumn { col: 0 })
        ));
        // A constant policy does not need observed entries.
        assert!(process_imp(&d, ImputePolicy::Constant(0.0)).is_ok());
    }

    #[test]
    fn mim_with_no_missingness_appends_nothing() {
        let d = data_with_mask(vec![vec![1.0, 2.0, 3.0, 4.0]], &[]);
        let p = process_mim(&d, ImputePolicy::Constant(0.0)).unwrap();
        assert_eq!(p.column_count(), 1);
        assert_eq!(p.provenance, vec![ColumnProvenance::Original(0)]);
    }

    #[test]
    fn mim_deduplicates_identical_mask_columns() {
        let cols = vec![
            vec![1.0, 2.0, 3.0, 4.0],
            vec![5.0, 6.0, 7.0, 8.0],
            vec![9.0, 10.0, 11.0, 12.0],
        ];
        // Columns 1 and 2 share the mask pattern {row 0, row 3}.
        let d = data_with_mask(cols, &[(0, 1), (3, 1), (0, 2), (3, 2)]);
        let p = process_mim(&d, ImputePolicy::Constant(0.0)).unwrap();
        let indicators: Vec<_> = p
            .provenance
            .iter()
            .filter(|c| matches!(c, ColumnProvenance::Indicator(_)))
            .collect();
        assert_eq!(indicators, vec![&ColumnProvenance::Indicator(1)]);
        assert_eq!(p.column_count(), 4);
        assert_eq!(p.design.col(3), &[1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mim_column_bounds() {
        // q is between p and 2p.
        let d = data_with_mask(
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]],
            &[(0, 0), (1, 1)],
        );
        let p = process_mim(&d, ImputePolicy::Constant(0.0)).unwrap();
        assert!(p.column_count() >= 2 && p.column_count() <= 4);
        assert_eq!(p.column_count(), 4);
    }

    #[test]
    fn imp_constant_changes_exactly_the_masked_cells() {
        let cols = vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]];
        let missing = [(1, 0), (2, 1)];
        let d = data_with_mask(cols, &missing);
        let a = process_imp(&d, ImputePolicy::Constant(1.5)).unwrap();
        let b = process_imp(&d, ImputePolicy::Constant(-4.0)).unwrap();
        let mut changed = Vec::new();
        for j in 0..2 {
            for i in 0..4 {
                if a.design.get(i, j) != b.design.get(i, j) {
                    changed.push((i, j));
                }
            }
        }
        assert_eq!(changed, missing.to_vec());
    }

    #[test]
    fn cc_identity_when_mask_clean() {
        let d = data_with_mask(vec![vec![1.0, 2.0, 3.0, 4.0]], &[]);
        let (reduced, p) = process_cc(&d).unwrap();
        assert_eq!(reduced.n(), 4);
        assert_eq!(p.kept_rows.as_deref(), Some(&[0usize, 1, 2, 3][..]));
    }

    #[test]
    fn cc_removes_only_incomplete_rows() {
        let d = data_with_mask(vec![vec![1.0, 2.0, 3.0, 4.0]], &[(1, 0)]);
        let (reduced, p) = process_cc(&d).unwrap();
        assert_eq!(reduced.n(), 3);
        assert_eq!(p.kept_rows.as_deref(), Some(&[0usize, 2, 3][..]));
    }

    #[test]
    fn cc_requires_complete_rows_per_stratum_arm() {
        // All treated rows masked: arm 1 has no complete rows.
        let d = data_with_mask(
            vec![vec![1.0, 2.0, 3.0, 4.0]],
            &[(1, 0), (3, 0)],
        );
        let err = process_cc(&d).unwrap_err();
        assert!(matches!(err, MissingnessError::NoCompleteRows { arm: 1, .. }));
    }

    #[test]
    fn ccov_and_imp_agree_on_clean_masks() {
        let d = data_with_mask(
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![0.5, 0.25, 0.125, 0.0625]],
            &[],
        );
        let a = process_ccov(&d);
        let b = process_imp(&d, ImputePolicy::ObservedMean).unwrap();
        assert_eq!(a.design, b.design);
        assert_eq!(a.provenance, b.provenance);
    }

    #[test]
    fn mpm_is_rejected_by_name() {
        assert!(matches!(
            MissingnessMethod::parse("mpm"),
            Err(MissingnessError::MethodNotSupported(m)) if m == "mpm"
        ));
    }
}

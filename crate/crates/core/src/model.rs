//! Domain types for a single randomized experiment: the trial dataset with
//! its missingness mask, per-stratum indexing, and the within-stratum
//! treatment-imbalance diagnostic.

use crate::mat::Matrix;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("length mismatch in {field}: expected {expected}, got {got}")]
    LengthMismatch {
        field: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("treatment at row {row} is {value}, expected 0 or 1")]
    NonBinaryTreatment { row: usize, value: i64 },
    #[error("outcome at row {row} is not a finite number")]
    MissingOutcome { row: usize },
    #[error("unmasked covariate at row {row}, column {col} is not finite")]
    NonFiniteCovariate { row: usize, col: usize },
    #[error("target treated proportion {pi} is outside (0, 1)")]
    PiOutOfRange { pi: f64 },
    #[error("attempted to read masked covariate at row {row}, column {col}")]
    MaskedValueRead { row: usize, col: usize },
    #[error("stratum '{label}' has no rows")]
    EmptyStratum { label: String },
    #[error("stratum {stratum} has no units in arm {arm}")]
    ArmEmptyInStratum { stratum: usize, arm: u8 },
    #[error("dataset has no rows")]
    Empty,
}

/// Column-major binary missingness mask aligned with the covariate matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn all_observed(rows: usize, cols: usize) -> Self {
        Mask {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = vec![false; rows * cols];
        for c in 0..cols {
            for r in 0..rows {
                data[c * rows + r] = f(r, c);
            }
        }
        Mask { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.data[col * self.rows + row]
    }

    pub fn set(&mut self, row: usize, col: usize, missing: bool) {
        self.data[col * self.rows + row] = missing;
    }

    /// The full mask column.
    pub fn col(&self, col: usize) -> &[bool] {
        &self.data[col * self.rows..(col + 1) * self.rows]
    }

    pub fn col_missing_count(&self, col: usize) -> usize {
        self.col(col).iter().filter(|&&m| m).count()
    }

    pub fn row_is_complete(&self, row: usize) -> bool {
        (0..self.cols).all(|c| !self.is_missing(row, c))
    }

    fn select_rows(&self, rows: &[usize]) -> Mask {
        Mask::from_fn(rows.len(), self.cols, |r, c| self.is_missing(rows[r], c))
    }
}

/// One experiment: outcomes, treatment indicators, compacted stratum labels,
/// covariates with a missingness mask, and the target allocation proportion.
///
/// Stratum labels are compacted to contiguous `1..=K` on construction (the
/// original labels are retained for reporting); internally strata are indexed
/// `0..K`. Everything is immutable after construction.
///
/// The asymptotic theory behind the estimators additionally assumes the
/// potential outcomes have nonzero variance in at least one stratum. That is
/// a statement about unobservable quantities, so it is documented here
/// rather than validated.
#[derive(Clone, Debug)]
pub struct TrialData {
    outcomes: Vec<f64>,
    treatment: Vec<u8>,
    strata: Vec<usize>,
    stratum_labels: Vec<String>,
    covariates: Matrix,
    mask: Mask,
    target_pi: f64,
    advisories: Vec<String>,
}

impl TrialData {
    /// Validate and assemble a trial dataset. Returns every violation found,
    /// not just the first.
    pub fn new(
        outcomes: Vec<f64>,
        treatment: Vec<u8>,
        strata: &[String],
        covariates: Matrix,
        mask: Mask,
        target_pi: f64,
    ) -> Result<Self, Vec<DataError>> {
        let n = outcomes.len();
        let mut errors = Vec::new();
        if n == 0 {
            errors.push(DataError::Empty);
        }
        if treatment.len() != n {
            errors.push(DataError::LengthMismatch {
                field: "treatment",
                expected: n,
                got: treatment.len(),
            });
        }
        if strata.len() != n {
            errors.push(DataError::LengthMismatch {
                field: "strata",
                expected: n,
                got: strata.len(),
            });
        }
        if covariates.rows() != n {
            errors.push(DataError::LengthMismatch {
                field: "covariates",
                expected: n,
                got: covariates.rows(),
            });
        }
        if mask.rows() != covariates.rows() || mask.cols() != covariates.cols() {
            errors.push(DataError::LengthMismatch {
                field: "missing_mask",
                expected: covariates.rows() * covariates.cols(),
                got: mask.rows() * mask.cols(),
            });
        }
        if !(target_pi > 0.0 && target_pi < 1.0) {
            errors.push(DataError::PiOutOfRange { pi: target_pi });
        }
        if !errors.is_empty() {
            return Err(errors);
        }

        for (row, &a) in treatment.iter().enumerate() {
            if a > 1 {
                errors.push(DataError::NonBinaryTreatment {
                    row,
                    value: a as i64,
                });
            }
        }
        for (row, &y) in outcomes.iter().enumerate() {
            if !y.is_finite() {
                errors.push(DataError::MissingOutcome { row });
            }
        }
        for col in 0..covariates.cols() {
            for row in 0..n {
                if !mask.is_missing(row, col) && !covariates.get(row, col).is_finite() {
                    errors.push(DataError::NonFiniteCovariate { row, col });
                }
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }

        let (indices, labels, advisories) = compact_labels(strata);
        Ok(TrialData {
            outcomes,
            treatment,
            strata: indices,
            stratum_labels: labels,
            covariates,
            mask,
            target_pi,
            advisories,
        })
    }

    /// Convenience constructor for integer stratum labels.
    pub fn with_numeric_strata(
        outcomes: Vec<f64>,
        treatment: Vec<u8>,
        strata: &[i64],
        covariates: Matrix,
        mask: Mask,
        target_pi: f64,
    ) -> Result<Self, Vec<DataError>> {
        let labels: Vec<String> = strata.iter().map(|s| s.to_string()).collect();
        TrialData::new(outcomes, treatment, &labels, covariates, mask, target_pi)
    }

    pub fn n(&self) -> usize {
        self.outcomes.len()
    }

    pub fn covariate_count(&self) -> usize {
        self.covariates.cols()
    }

    pub fn stratum_count(&self) -> usize {
        self.stratum_labels.len()
    }

    pub fn outcomes(&self) -> &[f64] {
        &self.outcomes
    }

    pub fn outcome(&self, row: usize) -> f64 {
        self.outcomes[row]
    }

    pub fn treatment(&self) -> &[u8] {
        &self.treatment
    }

    pub fn is_treated(&self, row: usize) -> bool {
        self.treatment[row] == 1
    }

    /// Zero-based compact stratum index of a row.
    pub fn stratum(&self, row: usize) -> usize {
        self.strata[row]
    }

    pub fn strata(&self) -> &[usize] {
        &self.strata
    }

    /// Original label of a compact stratum index.
    pub fn stratum_label(&self, stratum: usize) -> &str {
        &self.stratum_labels[stratum]
    }

    pub fn target_pi(&self) -> f64 {
        self.target_pi
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn is_missing(&self, row: usize, col: usize) -> bool {
        self.mask.is_missing(row, col)
    }

    /// Observed covariate value. Reading a masked cell is a programming
    /// error, not silent NaN propagation.
    pub fn covariate(&self, row: usize, col: usize) -> f64 {
        assert!(
            !self.mask.is_missing(row, col),
            "masked covariate read at row {row}, column {col}"
        );
        self.covariates.get(row, col)
    }

    /// Fallible variant of [`TrialData::covariate`].
    pub fn covariate_checked(&self, row: usize, col: usize) -> Result<f64, DataError> {
        if self.mask.is_missing(row, col) {
            Err(DataError::MaskedValueRead { row, col })
        } else {
            Ok(self.covariates.get(row, col))
        }
    }

    /// Raw covariate storage, for processors that consult the mask
    /// themselves.
    pub(crate) fn covariates_raw(&self) -> &Matrix {
        &self.covariates
    }

    pub fn advisories(&self) -> &[String] {
        &self.advisories
    }

    /// Restrict to the given rows (complete-case analysis). Fails if a
    /// stratum loses all of its rows.
    pub fn subset(&self, rows: &[usize]) -> Result<TrialData, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        let mut seen = vec![false; self.stratum_count()];
        for &r in rows {
            seen[self.strata[r]] = true;
        }
        if let Some(k) = seen.iter().position(|&s| !s) {
            return Err(DataError::EmptyStratum {
                label: self.stratum_labels[k].clone(),
            });
        }
        let labels: Vec<String> = rows
            .iter()
            .map(|&r| self.stratum_labels[self.strata[r]].clone())
            .collect();
        let (indices, stratum_labels, advisories) = compact_labels(&labels);
        Ok(TrialData {
            outcomes: rows.iter().map(|&r| self.outcomes[r]).collect(),
            treatment: rows.iter().map(|&r| self.treatment[r]).collect(),
            strata: indices,
            stratum_labels,
            covariates: self.covariates.select_rows(rows),
            mask: self.mask.select_rows(rows),
            target_pi: self.target_pi,
            advisories,
        })
    }
}

/// Map arbitrary labels to contiguous `1..=K`. Numeric label sets sort
/// numerically, anything else lexicographically, so the compaction is
/// deterministic under row permutation.
fn compact_labels(labels: &[String]) -> (Vec<usize>, Vec<String>, Vec<String>) {
    let mut unique: Vec<&String> = Vec::new();
    for l in labels {
        if !unique.contains(&l) {
            unique.push(l);
        }
    }
    let all_numeric = unique.iter().all(|l| l.parse::<i64>().is_ok());
    if all_numeric {
        unique.sort_by_key(|l| l.parse::<i64>().unwrap());
    } else {
        unique.sort();
    }
    let index_of = |l: &String| unique.iter().position(|u| *u == l).unwrap();
    let indices: Vec<usize> = labels.iter().map(index_of).collect();
    let owned: Vec<String> = unique.iter().map(|l| (*l).clone()).collect();

    let mut advisories = Vec::new();
    if all_numeric {
        let nums: Vec<i64> = owned.iter().map(|l| l.parse().unwrap()).collect();
        let contiguous = nums
            .iter()
            .enumerate()
            .all(|(i, &v)| v == i as i64 + nums[0]);
        if !contiguous || nums[0] != 1 {
            advisories.push(format!(
                "stratum labels {:?} compacted to 1..={}",
                nums,
                owned.len()
            ));
        }
    }
    (indices, owned, advisories)
}

/// Per-stratum membership, counts, and proportions.
#[derive(Clone, Debug, Serialize)]
pub struct StratumCounts {
    pub n: usize,
    pub n_treated: usize,
    pub n_control: usize,
    /// `n_[k] / n`
    pub proportion: f64,
    /// `n_[k]1 / n_[k]`
    pub treated_fraction: f64,
}

#[derive(Clone, Debug)]
pub struct StratumIndex {
    members: Vec<Vec<usize>>,
    counts: Vec<StratumCounts>,
    n: usize,
}

/// Tally per-stratum memberships and arm counts.
///
/// Downstream estimators need both arms in every stratum, so an empty arm is
/// reported here rather than at fit time.
pub fn build_index(data: &TrialData) -> Result<StratumIndex, DataError> {
    let k = data.stratum_count();
    let n = data.n();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for i in 0..n {
        members[data.stratum(i)].push(i);
    }
    let mut counts = Vec::with_capacity(k);
    for (s, rows) in members.iter().enumerate() {
        let n_treated = rows.iter().filter(|&&i| data.is_treated(i)).count();
        let n_control = rows.len() - n_treated;
        if n_treated == 0 {
            return Err(DataError::ArmEmptyInStratum {
                stratum: s + 1,
                arm: 1,
            });
        }
        if n_control == 0 {
            return Err(DataError::ArmEmptyInStratum {
                stratum: s + 1,
                arm: 0,
            });
        }
        counts.push(StratumCounts {
            n: rows.len(),
            n_treated,
            n_control,
            proportion: rows.len() as f64 / n as f64,
            treated_fraction: n_treated as f64 / rows.len() as f64,
        });
    }
    Ok(StratumIndex { members, counts, n })
}

impl StratumIndex {
    pub fn stratum_count(&self) -> usize {
        self.counts.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn members(&self, stratum: usize) -> &[usize] {
        &self.members[stratum]
    }

    pub fn counts(&self, stratum: usize) -> &StratumCounts {
        &self.counts[stratum]
    }

    pub fn all_counts(&self) -> &[StratumCounts] {
        &self.counts
    }
}

/// Within-stratum treatment imbalance `D_n[k] = sum_{i in [k]} (A_i - pi)`.
#[derive(Clone, Debug)]
pub struct ImbalanceDiagnostic {
    pub per_stratum: Vec<f64>,
    /// `max_k |D_n[k]| / sqrt(n)`
    pub max_scaled: f64,
}

pub fn imbalance(data: &TrialData, index: &StratumIndex) -> ImbalanceDiagnostic {
    let pi = data.target_pi();
    let per_stratum: Vec<f64> = index
        .all_counts()
        .iter()
        .map(|c| c.n_treated as f64 - pi * c.n as f64)
        .collect();
    let max_scaled = per_stratum
        .iter()
        .map(|d| d.abs())
        .fold(0.0, f64::max)
        / (index.n() as f64).sqrt();
    ImbalanceDiagnostic {
        per_stratum,
        max_scaled,
    }
}

//! Treatment-assignment engines: simple randomization, stratified permuted
//! blocks, and Pocock-Simon minimization.
//!
//! Assignment never sees outcomes, non-stratification covariates, or
//! missingness masks; the functions only accept stratum labels or
//! stratification-covariate levels. Every scheme is a deterministic function
//! of its inputs and the RNG state handed in.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RandomizeError {
    #[error("block size {block_size} times pi {pi} is not an integer")]
    BlockPiIncompatible { block_size: usize, pi: f64 },
    #[error("minimization requires at least one stratification variable")]
    NoStratificationVariables,
    #[error("biased coin probability {0} outside (0.5, 1]")]
    BiasedCoinOutOfRange(f64),
}

/// Assignment scheme taxonomy.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Scheme {
    Simple,
    StratifiedBlock {
        block_size: usize,
    },
    Minimization {
        /// Probability of following the imbalance-minimizing arm; in (0.5, 1].
        biased_coin: f64,
        /// Nonnegative weight per stratification variable.
        weights: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RandomizationScheme {
    pub kind: Scheme,
    pub target_pi: f64,
}

/// The canonical biased-coin probability for minimization.
pub const DEFAULT_BIASED_COIN: f64 = 0.75;

/// Smallest exactly-balanced block, doubled: 4 at pi = 1/2, 6 at pi = 2/3.
pub fn default_block_size(pi: f64) -> usize {
    for b in 2..=64 {
        let t = b as f64 * pi;
        if (t - t.round()).abs() < 1e-9 && t.round() >= 1.0 && (b as f64 - t).round() >= 1.0 {
            return 2 * b;
        }
    }
    64
}

impl RandomizationScheme {
    /// Check the scheme's parameters without assigning anything.
    pub fn validate(&self) -> Result<(), RandomizeError> {
        match &self.kind {
            Scheme::Simple => Ok(()),
            Scheme::StratifiedBlock { block_size } => {
                let treated = *block_size as f64 * self.target_pi;
                if *block_size == 0 || (treated - treated.round()).abs() > 1e-9 {
                    Err(RandomizeError::BlockPiIncompatible {
                        block_size: *block_size,
                        pi: self.target_pi,
                    })
                } else {
                    Ok(())
                }
            }
            Scheme::Minimization { biased_coin, .. } => {
                if *biased_coin > 0.5 && *biased_coin <= 1.0 {
                    Ok(())
                } else {
                    Err(RandomizeError::BiasedCoinOutOfRange(*biased_coin))
                }
            }
        }
    }

    pub fn simple(target_pi: f64) -> Self {
        RandomizationScheme {
            kind: Scheme::Simple,
            target_pi,
        }
    }

    pub fn stratified_block(target_pi: f64, block_size: usize) -> Self {
        RandomizationScheme {
            kind: Scheme::StratifiedBlock { block_size },
            target_pi,
        }
    }

    pub fn minimization(target_pi: f64, biased_coin: f64, weights: Vec<f64>) -> Self {
        RandomizationScheme {
            kind: Scheme::Minimization {
                biased_coin,
                weights,
            },
            target_pi,
        }
    }

    /// Dispatch on the scheme kind. `strata` are 0-based stratum indices;
    /// `strat_levels`, used only by minimization, holds one row of
    /// stratification-covariate levels per unit in arrival order.
    pub fn assign<R: Rng>(
        &self,
        strata: &[usize],
        strat_levels: &[Vec<usize>],
        rng: &mut R,
    ) -> Result<Vec<u8>, RandomizeError> {
        match &self.kind {
            Scheme::Simple => Ok(assign_simple(strata.len(), self.target_pi, rng)),
            Scheme::StratifiedBlock { block_size } => {
                assign_stratified_block(strata, *block_size, self.target_pi, rng)
            }
            Scheme::Minimization {
                biased_coin,
                weights,
            } => assign_minimization(strat_levels, self.target_pi, *biased_coin, weights, rng),
        }
    }
}

/// Independent Bernoulli(pi) assignments.
pub fn assign_simple<R: Rng>(n: usize, pi: f64, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.random_bool(pi))).collect()
}

/// Stratified permuted-block randomization.
///
/// Within each stratum, units (in arrival order) are filled from consecutive
/// blocks of `block_size`, each a uniformly random permutation containing
/// exactly `block_size * pi` treated slots. A trailing partial block is a
/// draw without replacement from one full block's composition, so the
/// within-stratum imbalance stays bounded by the block size.
pub fn assign_stratified_block<R: Rng>(
    strata: &[usize],
    block_size: usize,
    pi: f64,
    rng: &mut R,
) -> Result<Vec<u8>, RandomizeError> {
    let treated_per_block = block_size as f64 * pi;
    if block_size == 0 || (treated_per_block - treated_per_block.round()).abs() > 1e-9 {
        return Err(RandomizeError::BlockPiIncompatible {
            block_size,
            pi,
        });
    }
    let treated_per_block = treated_per_block.round() as usize;

    let stratum_count = strata.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); stratum_count];
    for (i, &s) in strata.iter().enumerate() {
        members[s].push(i);
    }

    let mut out = vec![0u8; strata.len()];
    let mut template: Vec<u8> = vec![1; treated_per_block];
    template.extend(vec![0u8; block_size - treated_per_block]);

    for rows in &members {
        let mut filled = 0;
        while filled < rows.len() {
            let mut block = template.clone();
            block.shuffle(rng);
            let take = block_size.min(rows.len() - filled);
            for (slot, &assignment) in block.iter().take(take).enumerate() {
                out[rows[filled + slot]] = assignment;
            }
            filled += take;
        }
    }
    Ok(out)
}

/// Pocock-Simon minimization with a biased coin.
///
/// Units are processed in arrival order. For each unit and each hypothetical
/// arm, the marginal imbalance of every stratification variable at the
/// unit's level is `|m1 (1 - pi) - m0 pi|` over the counts including the
/// unit; the weighted sum across variables is the score. The
/// score-minimizing arm is taken with probability `biased_coin`, the other
/// arm otherwise, and exact ties fall back to Bernoulli(pi).
pub fn assign_minimization<R: Rng>(
    strat_levels: &[Vec<usize>],
    pi: f64,
    biased_coin: f64,
    weights: &[f64],
    rng: &mut R,
) -> Result<Vec<u8>, RandomizeError> {
    let var_count = strat_levels.first().map_or(0, Vec::len);
    if var_count == 0 && !strat_levels.is_empty() {
        return Err(RandomizeError::NoStratificationVariables);
    }
    if !(biased_coin > 0.5 && biased_coin <= 1.0) {
        return Err(RandomizeError::BiasedCoinOutOfRange(biased_coin));
    }
    let weight_of = |v: usize| weights.get(v).copied().unwrap_or(1.0);

    // (variable, level) -> (treated count, control count)
    let mut counts: HashMap<(usize, usize), (u64, u64)> = HashMap::new();
    let mut out = Vec::with_capacity(strat_levels.len());

    for levels in strat_levels {
        let mut score = [0.0f64; 2];
        for (v, &level) in levels.iter().enumerate() {
            let &(m1, m0) = counts.get(&(v, level)).unwrap_or(&(0, 0));
            let w = weight_of(v);
            score[1] += w * ((m1 + 1) as f64 * (1.0 - pi) - m0 as f64 * pi).abs();
            score[0] += w * (m1 as f64 * (1.0 - pi) - (m0 + 1) as f64 * pi).abs();
        }
        let assignment = if score[1] < score[0] {
            u8::from(rng.random_bool(biased_coin))
        } else if score[0] < score[1] {
            u8::from(!rng.random_bool(biased_coin))
        } else {
            u8::from(rng.random_bool(pi))
        };
        for (v, &level) in levels.iter().enumerate() {
            let entry = counts.entry((v, level)).or_insert((0, 0));
            if assignment == 1 {
                entry.0 += 1;
            } else {
                entry.1 += 1;
            }
        }
        out.push(assignment);
    }
    Ok(out)
}

//! Observation-mask generators for the designs used in theory and
//! experiments: fully observed, missing completely at random, staggered
//! adoption, and the two-group simultaneous adoption design.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Adoption-time distribution for staggered designs, given as a table of
/// `P(tau <= t)` for `t = 1, 2, ...`. Values past the end of the table
/// repeat the last entry; any remaining mass is the probability of never
/// adopting (`tau = infinity`).
#[derive(Debug, Clone, PartialEq)]
pub struct AdoptionCdf {
    values: Vec<f64>,
}

impl AdoptionCdf {
    /// Validates a nondecreasing table with entries in `[0, 1]`.
    pub fn from_table(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("adoption table is empty".into()));
        }
        let mut prev = 0.0;
        for (idx, &v) in values.iter().enumerate() {
            if !(0.0..=1.0).contains(&v) || v < prev {
                return Err(Error::InvalidInput(format!(
                    "adoption table must be nondecreasing in [0, 1]; entry {idx} is {v}"
                )));
            }
            prev = v;
        }
        Ok(Self { values })
    }

    /// Everyone adopts at the first time point.
    pub fn immediate() -> Self {
        Self { values: vec![1.0] }
    }

    /// Adoption times uniform over `1..=t_max`.
    pub fn uniform(t_max: usize) -> Self {
        let values = (1..=t_max).map(|t| t as f64 / t_max as f64).collect();
        Self { values }
    }

    /// `P(tau <= t)` for 1-based `t`.
    pub fn at(&self, t: usize) -> f64 {
        debug_assert!(t >= 1);
        let idx = (t - 1).min(self.values.len() - 1);
        self.values[idx]
    }

    /// The underlying table.
    pub fn table(&self) -> &[f64] {
        &self.values
    }
}

/// Group shares and cutover points for the simultaneous adoption design.
///
/// Units are split into two groups by the sign of a per-unit auxiliary
/// value. Within each group a fixed fraction of randomly selected units
/// has all entries masked from a cutover time onward; everyone else is
/// fully observed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimultaneousParams {
    /// Fraction of nonnegative-auxiliary units that go missing.
    pub masked_share_pos: f64,
    /// Cutover for that group, as a fraction of `T` (1-based, ceiling).
    pub cutover_share_pos: f64,
    /// Fraction of negative-auxiliary units that go missing.
    pub masked_share_neg: f64,
    /// Cutover for that group, as a fraction of `T`.
    pub cutover_share_neg: f64,
}

impl Default for SimultaneousParams {
    fn default() -> Self {
        Self {
            masked_share_pos: 0.25,
            cutover_share_pos: 0.75,
            masked_share_neg: 0.625,
            cutover_share_neg: 0.375,
        }
    }
}

/// Which observation mechanism to draw from.
#[derive(Debug, Clone, PartialEq)]
pub enum PatternKind {
    /// Every entry observed.
    FullyObserved,
    /// Entries observed i.i.d. with probability `p` in `(0, 1]`.
    Mcar { p: f64 },
    /// Monotone rows: unit `i` observed from its adoption time onward.
    Staggered { adoption: AdoptionCdf },
    /// Two-group design keyed on per-unit auxiliary values.
    Simultaneous { params: SimultaneousParams },
}

/// A fully specified observation mechanism, reproducible from its seed.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternConfig {
    pub kind: PatternKind,
    pub seed: u64,
}

impl PatternConfig {
    pub fn fully_observed() -> Self {
        Self {
            kind: PatternKind::FullyObserved,
            seed: 0,
        }
    }

    pub fn mcar(p: f64, seed: u64) -> Self {
        Self {
            kind: PatternKind::Mcar { p },
            seed,
        }
    }

    pub fn staggered(adoption: AdoptionCdf, seed: u64) -> Self {
        Self {
            kind: PatternKind::Staggered { adoption },
            seed,
        }
    }

    pub fn simultaneous(seed: u64) -> Self {
        Self {
            kind: PatternKind::Simultaneous {
                params: SimultaneousParams::default(),
            },
            seed,
        }
    }

    /// Same mechanism with a different seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            kind: self.kind.clone(),
            seed,
        }
    }
}

/// Rounds to the nearest integer, ties to even, clamped to `0..=len`.
fn group_count(share: f64, len: usize) -> usize {
    let raw = (share * len as f64).round_ties_even();
    (raw.max(0.0) as usize).min(len)
}

/// Draws an `N x T` observation mask. Deterministic given the config seed.
///
/// The simultaneous design needs `aux` (one real per unit, typically the
/// unit loadings); other designs ignore it.
pub fn generate_mask(
    config: &PatternConfig,
    n_units: usize,
    n_times: usize,
    aux: Option<&[f64]>,
) -> Result<DMatrix<u8>> {
    if n_units == 0 || n_times == 0 {
        return Err(Error::InvalidInput(
            "mask dimensions must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    match &config.kind {
        PatternKind::FullyObserved => Ok(DMatrix::from_element(n_units, n_times, 1)),
        PatternKind::Mcar { p } => {
            if !(*p > 0.0 && *p <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "MCAR probability must be in (0, 1], got {p}"
                )));
            }
            let mut mask = DMatrix::from_element(n_units, n_times, 0u8);
            for i in 0..n_units {
                for t in 0..n_times {
                    mask[(i, t)] = u8::from(rng.random::<f64>() < *p);
                }
            }
            Ok(mask)
        }
        PatternKind::Staggered { adoption } => {
            let mut mask = DMatrix::from_element(n_units, n_times, 0u8);
            for i in 0..n_units {
                let u: f64 = rng.random();
                // tau = first t with u < G(t); no such t means never adopt.
                let tau = (1..=n_times).find(|&t| u < adoption.at(t));
                if let Some(tau) = tau {
                    for t in tau..=n_times {
                        mask[(i, t - 1)] = 1;
                    }
                }
            }
            Ok(mask)
        }
        PatternKind::Simultaneous { params } => {
            let aux = aux.ok_or(Error::MissingAux)?;
            if aux.len() != n_units {
                return Err(Error::DimensionMismatch {
                    expected: format!("{n_units} auxiliary values"),
                    actual: format!("{}", aux.len()),
                });
            }
            let mut mask = DMatrix::from_element(n_units, n_times, 1u8);
            let pos: Vec<usize> = (0..n_units).filter(|&i| aux[i] >= 0.0).collect();
            let neg: Vec<usize> = (0..n_units).filter(|&i| aux[i] < 0.0).collect();
            let mut apply = |group: &[usize], masked_share: f64, cutover_share: f64,
                             rng: &mut ChaCha8Rng| {
                if group.is_empty() {
                    return;
                }
                let k = group_count(masked_share, group.len());
                // 1-based cutover time; entries at t >= cutover are masked.
                let cutover = (cutover_share * n_times as f64).ceil().max(1.0) as usize;
                for idx in sample(rng, group.len(), k) {
                    let unit = group[idx];
                    for t in cutover..=n_times {
                        mask[(unit, t - 1)] = 0;
                    }
                }
            };
            apply(&pos, params.masked_share_pos, params.cutover_share_pos, &mut rng);
            apply(&neg, params.masked_share_neg, params.cutover_share_neg, &mut rng);
            Ok(mask)
        }
    }
}

//! Partially observed panel data and overlap-index machinery.
//!
//! A [`Panel`] couples an `N x T` outcome matrix with a binary observation
//! mask. Missing entries are represented by the mask rather than sentinel
//! values; whatever was stored at a masked position is zeroed on
//! construction so that no estimator can ever read it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// An `N x T` outcome panel with a 0/1 observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    values: DMatrix<f64>,
    mask: DMatrix<u8>,
}

impl Panel {
    /// Builds a panel from outcomes and a binary mask of identical shape.
    ///
    /// Entries with `mask == 0` are treated as unknown: their stored values
    /// are discarded (zeroed) so downstream estimates cannot depend on them.
    /// Observed entries must be finite.
    pub fn new(values: DMatrix<f64>, mask: DMatrix<u8>) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}", values.nrows(), values.ncols()),
                actual: format!("{}x{}", mask.nrows(), mask.ncols()),
            });
        }
        let (n, t) = values.shape();
        if n < 1 || t < 2 {
            return Err(Error::InvalidInput(format!(
                "panel must have N >= 1 and T >= 2, got {n}x{t}"
            )));
        }
        let mut values = values;
        for i in 0..n {
            for s in 0..t {
                match mask[(i, s)] {
                    0 => values[(i, s)] = 0.0,
                    1 => {
                        if !values[(i, s)].is_finite() {
                            return Err(Error::InvalidInput(format!(
                                "non-finite value at observed entry ({i}, {s})"
                            )));
                        }
                    }
                    other => {
                        return Err(Error::InvalidInput(format!(
                            "mask entry ({i}, {s}) must be 0 or 1, got {other}"
                        )));
                    }
                }
            }
        }
        Ok(Self { values, mask })
    }

    /// Builds a fully observed panel.
    pub fn fully_observed(values: DMatrix<f64>) -> Result<Self> {
        let mask = DMatrix::from_element(values.nrows(), values.ncols(), 1u8);
        Self::new(values, mask)
    }

    /// Number of units (rows).
    pub fn n_units(&self) -> usize {
        self.values.nrows()
    }

    /// Number of time points (columns).
    pub fn n_times(&self) -> usize {
        self.values.ncols()
    }

    /// Outcome matrix with masked entries zeroed.
    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Binary observation mask.
    pub fn mask(&self) -> &DMatrix<u8> {
        &self.mask
    }

    /// Whether entry `(unit, time)` is observed.
    pub fn observed(&self, unit: usize, time: usize) -> bool {
        self.mask[(unit, time)] == 1
    }

    /// Observed value at `(unit, time)`, or `None` when masked.
    pub fn value(&self, unit: usize, time: usize) -> Option<f64> {
        self.observed(unit, time).then(|| self.values[(unit, time)])
    }

    /// Number of observed entries for the given unit.
    pub fn observed_count(&self, unit: usize) -> usize {
        (0..self.n_times()).filter(|&s| self.observed(unit, s)).count()
    }

    /// The panel with unit and time roles interchanged.
    pub fn transposed(&self) -> Panel {
        Panel {
            values: self.values.transpose(),
            mask: self.mask.transpose(),
        }
    }

    /// Mask as a 0/1 float matrix, for use in matrix products.
    pub(crate) fn mask_f64(&self) -> DMatrix<f64> {
        self.mask.map(|m| f64::from(m))
    }
}

/// Pairwise overlap counts `|Q(s, t)|`: the number of units observed at
/// both time `s` and time `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapIndex {
    counts: DMatrix<u32>,
}

impl OverlapIndex {
    /// The full `T x T` count matrix.
    pub fn counts(&self) -> &DMatrix<u32> {
        &self.counts
    }

    /// Overlap count for the column pair `(s, t)`.
    pub fn count(&self, s: usize, t: usize) -> u32 {
        self.counts[(s, t)]
    }

    /// Smallest pairwise overlap across all column pairs.
    pub fn min_count(&self) -> u32 {
        self.counts.iter().copied().min().unwrap_or(0)
    }
}

/// Counts, for every pair of columns, the units observed at both.
///
/// Empty overlaps are legal here; estimators that divide by overlap
/// fractions reject them downstream.
pub fn build_overlap_index(panel: &Panel) -> OverlapIndex {
    let w = panel.mask_f64();
    let prod = w.transpose() * &w;
    let counts = prod.map(|x| x.round() as u32);
    OverlapIndex { counts }
}

/// Plug-in overlap statistics: empirical observation fractions and the
/// three scalar weights entering the asymptotic variance.
#[derive(Debug, Clone)]
pub struct OverlapStats {
    /// Empirical pairwise fractions `alpha[s][t] = |Q(s, t)| / N`.
    pub alpha: DMatrix<f64>,
    /// Weight from pairs anchored at the last column.
    pub omega1: f64,
    /// Weight from triples anchored at the last column.
    pub omega2: f64,
    /// Weight from free quadruples of columns.
    pub omega3: f64,
    /// Fractions involving the final column, `alpha[s][T-1]`.
    pub nu: DVector<f64>,
}

/// Computes the overlap fractions and the plug-in weights.
///
/// The three weights are normalized sums of quadruple-overlap fractions
/// over pairwise ones. Rather than enumerating `O(T^4)` quadruples, the
/// sums factor through per-unit quantities, so all three weights are
/// computed exactly in `O(N T^2)` time.
///
/// Errors with [`Error::ZeroOverlap`] if any column pair is never jointly
/// observed, since every pairwise fraction appears in a denominator.
pub fn compute_overlap_stats(panel: &Panel, index: &OverlapIndex) -> Result<OverlapStats> {
    let n = panel.n_units();
    let t = panel.n_times();
    let nf = n as f64;
    let counts = index.counts();
    for s in 0..t {
        for u in 0..t {
            if counts[(s, u)] == 0 {
                return Err(Error::ZeroOverlap { s, t: u });
            }
        }
    }
    let alpha = counts.map(|c| f64::from(c) / nf);
    let nu = DVector::from_fn(t, |s, _| alpha[(s, t - 1)]);

    // Per-unit sums: e_i over columns anchored at T, c_i over all pairs
    // of the unit's observed columns.
    let mut sum1 = 0.0; // omega1: sum_i W[i,T] * e_i^2
    let mut sum2 = 0.0; // omega2: sum_i W[i,T] * c_i * e_i
    let mut sum3 = 0.0; // omega3: sum_i c_i^2
    for i in 0..n {
        let obs: Vec<usize> = (0..t).filter(|&s| panel.observed(i, s)).collect();
        let e_i: f64 = obs.iter().map(|&s| 1.0 / alpha[(s, t - 1)]).sum();
        let mut c_i = 0.0;
        for &s in &obs {
            for &u in &obs {
                c_i += 1.0 / alpha[(s, u)];
            }
        }
        if panel.observed(i, t - 1) {
            sum1 += e_i * e_i;
            sum2 += c_i * e_i;
        }
        sum3 += c_i * c_i;
    }
    let t2 = (t * t) as f64;
    let omega1 = sum1 / (nf * t2);
    let omega2 = sum2 / (nf * t2 * t as f64);
    let omega3 = sum3 / (nf * t2 * t2);

    Ok(OverlapStats {
        alpha,
        omega1,
        omega2,
        omega3,
        nu,
    })
}

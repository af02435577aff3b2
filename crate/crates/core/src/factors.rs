//! Factor estimation from a partially observed panel.
//!
//! The estimation runs in three steps: a pairwise-complete second-moment
//! matrix over column pairs, eigenvectors of that matrix scaled to
//! orthonormal factors, and per-unit least-squares loadings over each
//! unit's observed times. A transpose option interchanges the unit and
//! time roles, which helps when `T` is large relative to `N` and column
//! pairs would otherwise share few units.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::condition_number;
use crate::panel::{build_overlap_index, OverlapIndex, Panel};

/// Dimension above which the full symmetric eigendecomposition gives way
/// to iterative subspace iteration.
const FULL_EIGEN_MAX: usize = 2048;

/// Units whose observed-time Gram matrix exceeds this condition number
/// are flagged degenerate.
const LOADING_COND_MAX: f64 = 1e12;

/// Pairwise-complete second-moment matrix over column pairs.
#[derive(Debug, Clone)]
pub struct PairwiseCovariance {
    /// `T x T` symmetric matrix; entries with empty overlap are zero.
    pub sigma_hat: DMatrix<f64>,
    /// Column pairs `(s, t)`, `s <= t`, whose overlap set was empty.
    pub zero_filled: Vec<(usize, usize)>,
}

/// How to pick the number of factors from the spectrum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankMethod {
    /// Use exactly this rank.
    Fixed(usize),
    /// Smallest rank whose cumulative eigenvalue share reaches the
    /// threshold.
    ExplainedVariance(f64),
    /// Rank maximizing the ratio of consecutive eigenvalues.
    EigenRatio,
}

/// Fitted factor model: orthonormal factors, per-unit loadings, and the
/// spectrum they came from.
#[derive(Debug, Clone)]
pub struct FactorModelFit {
    /// `T x r` factor matrix, rows indexed by time.
    pub factors: DMatrix<f64>,
    /// `N x r` loading matrix, rows indexed by unit.
    pub loadings: DMatrix<f64>,
    /// Number of factors.
    pub rank: usize,
    /// Leading `min(N, T)` eigenvalues (nonincreasing) of the scaled
    /// covariance the factors were extracted from. For transposed fits this
    /// is the spectrum of the unit-by-unit covariance.
    pub eigenvalues: DVector<f64>,
    /// Per-unit flag: false when the unit's loading regression was
    /// degenerate (loadings zeroed).
    pub loading_ok: Vec<bool>,
    /// Whether unit and time roles were interchanged during fitting.
    pub transposed: bool,
}

impl FactorModelFit {
    /// Fitted common component `loading(i) . factor(t)`.
    pub fn common_component(&self, unit: usize, time: usize) -> f64 {
        self.loadings.row(unit).dot(&self.factors.row(time))
    }

    /// Factor vector at a time point.
    pub fn factor_at(&self, time: usize) -> DVector<f64> {
        self.factors.row(time).transpose()
    }

    /// Loading vector of a unit.
    pub fn loading_of(&self, unit: usize) -> DVector<f64> {
        self.loadings.row(unit).transpose()
    }
}

/// Averages cross products over each column pair's overlap set.
///
/// Pairs with empty overlap get a zero entry and are recorded in
/// `zero_filled`; the matrix is exactly symmetric by construction.
pub fn pairwise_covariance(panel: &Panel, index: &OverlapIndex) -> Result<PairwiseCovariance> {
    let t = panel.n_times();
    if index.counts().nrows() != t {
        return Err(Error::DimensionMismatch {
            expected: format!("{t}x{t} overlap index"),
            actual: format!("{}x{}", index.counts().nrows(), index.counts().ncols()),
        });
    }
    // Masked entries are stored as zero, so the plain cross product already
    // sums over each pair's overlap set.
    let cross = panel.values().transpose() * panel.values();
    let mut sigma = DMatrix::zeros(t, t);
    let mut zero_filled = Vec::new();
    for s in 0..t {
        for u in s..t {
            let c = index.count(s, u);
            if c == 0 {
                zero_filled.push((s, u));
            } else {
                let v = cross[(s, u)] / f64::from(c);
                sigma[(s, u)] = v;
                sigma[(u, s)] = v;
            }
        }
    }
    Ok(PairwiseCovariance {
        sigma_hat: sigma,
        zero_filled,
    })
}

/// Top-`k` eigenpairs of a symmetric matrix, eigenvalues nonincreasing.
fn eigen_desc_full(m: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let dim = m.nrows();
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order.iter().take(k).map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(dim, k);
    for (j, &i) in order.iter().take(k).enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// Top-`k` eigenpairs by shifted subspace iteration with Rayleigh-Ritz
/// refinement. Deterministic: the start block comes from a fixed seed.
fn eigen_desc_iterative(m: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let dim = m.nrows();
    let k = k.min(dim);
    // Gershgorin shift makes the target eigenvalues the largest in
    // magnitude, so plain power steps converge to them.
    let shift = (0..dim)
        .map(|s| m.row(s).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let block = (k + 8).min(dim);
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0C5_EED5);
    let mut q = DMatrix::from_fn(dim, block, |_, _| StandardNormal.sample(&mut rng));
    orthonormalize(&mut q);
    let mut prev = vec![f64::INFINITY; k];
    let scale = shift.max(1.0);
    for _ in 0..1000 {
        let mut z = m * &q;
        z += &q * shift;
        orthonormalize(&mut z);
        let small = z.transpose() * m * &z;
        let small = (&small + small.transpose()) * 0.5;
        let (vals, vecs) = eigen_desc_full(&small, block);
        q = &z * &vecs;
        let converged = vals
            .iter()
            .take(k)
            .zip(prev.iter())
            .all(|(a, b)| (a - b).abs() <= 1e-14 * scale);
        prev.copy_from_slice(&vals[..k]);
        if converged {
            break;
        }
    }
    let small = q.transpose() * m * &q;
    let small = (&small + small.transpose()) * 0.5;
    let (vals, vecs) = eigen_desc_full(&small, k);
    let vectors = &q * &vecs;
    (vals, vectors)
}

/// Gram-Schmidt with renormalization; replaces the columns of `q` with an
/// orthonormal basis of their span.
fn orthonormalize(q: &mut DMatrix<f64>) {
    let cols = q.ncols();
    for j in 0..cols {
        for _ in 0..2 {
            for i in 0..j {
                let proj = q.column(i).dot(&q.column(j));
                let col_i = q.column(i).into_owned();
                let mut col_j = q.column_mut(j);
                col_j.axpy(-proj, &col_i, 1.0);
            }
        }
        let norm = q.column(j).norm();
        if norm > 1e-300 {
            q.column_mut(j).scale_mut(1.0 / norm);
        }
    }
}

fn eigen_desc(m: &DMatrix<f64>, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    if m.nrows() <= FULL_EIGEN_MAX {
        eigen_desc_full(m, k)
    } else {
        eigen_desc_iterative(m, k)
    }
}

/// Flips each column so its largest-magnitude entry is positive, ties
/// broken by the earliest index.
fn fix_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = f64::NEG_INFINITY;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            m.column_mut(j).neg_mut();
        }
    }
}

/// Scaled leading eigenvectors of the pairwise covariance: a `T x r`
/// matrix whose columns are orthonormal after division by `sqrt(T)`.
pub fn estimate_factors(cov: &PairwiseCovariance, rank: usize) -> Result<DMatrix<f64>> {
    let t = cov.sigma_hat.nrows();
    if rank < 1 || rank > t {
        return Err(Error::RankTooLarge { rank, max: t });
    }
    let scaled = &cov.sigma_hat / t as f64;
    let (_, mut vectors) = eigen_desc(&scaled, rank);
    vectors.scale_mut((t as f64).sqrt());
    fix_column_signs(&mut vectors);
    Ok(vectors)
}

/// Per-unit weighted least squares of outcomes on the factors over each
/// unit's observed times.
///
/// Units with fewer observations than factors, or with an
/// ill-conditioned observed-time Gram matrix, get zero loadings and a
/// false flag instead of an error.
pub fn estimate_loadings(panel: &Panel, factors: &DMatrix<f64>) -> (DMatrix<f64>, Vec<bool>) {
    let n = panel.n_units();
    let t = panel.n_times();
    let r = factors.ncols();
    debug_assert_eq!(factors.nrows(), t);
    let rows: Vec<(DVector<f64>, bool)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let obs: Vec<usize> = (0..t).filter(|&s| panel.observed(i, s)).collect();
            if obs.len() < r {
                return (DVector::zeros(r), false);
            }
            let mut gram = DMatrix::zeros(r, r);
            let mut rhs = DVector::zeros(r);
            for &s in &obs {
                let f = factors.row(s).transpose();
                gram += &f * f.transpose();
                rhs += &f * panel.values()[(i, s)];
            }
            if condition_number(&gram) > LOADING_COND_MAX {
                return (DVector::zeros(r), false);
            }
            match gram.clone().cholesky() {
                Some(chol) => (chol.solve(&rhs), true),
                None => match gram.lu().solve(&rhs) {
                    Some(x) => (x, true),
                    None => (DVector::zeros(r), false),
                },
            }
        })
        .collect();
    let mut loadings = DMatrix::zeros(n, r);
    let mut ok = Vec::with_capacity(n);
    for (i, (row, flag)) in rows.into_iter().enumerate() {
        loadings.set_row(i, &row.transpose());
        ok.push(flag);
    }
    (loadings, ok)
}

/// Picks the number of factors from a nonincreasing eigenvalue list.
pub fn select_rank(eigenvalues: &[f64], method: RankMethod) -> Result<usize> {
    let len = eigenvalues.len();
    if !eigenvalues.iter().any(|&v| v > 0.0) {
        return Err(Error::AllZeroSpectrum);
    }
    match method {
        RankMethod::Fixed(r) => {
            if r < 1 || r > len {
                Err(Error::RankTooLarge { rank: r, max: len })
            } else {
                Ok(r)
            }
        }
        RankMethod::ExplainedVariance(threshold) => {
            if !(threshold > 0.0 && threshold <= 1.0) {
                return Err(Error::InvalidInput(format!(
                    "explained-variance threshold must be in (0, 1], got {threshold}"
                )));
            }
            let total: f64 = eigenvalues.iter().map(|&v| v.max(0.0)).sum();
            let mut cum = 0.0;
            for (idx, &v) in eigenvalues.iter().enumerate() {
                cum += v.max(0.0);
                if cum / total >= threshold - 1e-12 {
                    return Ok(idx + 1);
                }
            }
            Ok(len)
        }
        RankMethod::EigenRatio => {
            let k_max = len / 2;
            if k_max < 1 {
                return Ok(1);
            }
            let mut best_k = 1;
            let mut best_ratio = f64::NEG_INFINITY;
            for k in 1..=k_max {
                let top = eigenvalues[k - 1];
                let bottom = eigenvalues[k];
                let ratio = if top <= 0.0 {
                    f64::NEG_INFINITY
                } else if bottom <= 0.0 {
                    f64::INFINITY
                } else {
                    top / bottom
                };
                if ratio > best_ratio {
                    best_ratio = ratio;
                    best_k = k;
                }
            }
            Ok(best_k)
        }
    }
}

/// Runs the full pipeline: overlap index, pairwise covariance, rank
/// selection, factors, and loadings.
///
/// With `transpose = true` the pipeline runs on the role-swapped panel
/// and the outputs are mapped back, so factors are always indexed by
/// time. In that orientation the loadings come from the eigenvector side;
/// `loading_ok[i]` then only requires the unit to have been observed at
/// all, and it is the loadings rather than the factors that are
/// orthonormal.
pub fn fit_factor_model(
    panel: &Panel,
    rank_method: RankMethod,
    transpose: bool,
) -> Result<FactorModelFit> {
    let work = if transpose {
        panel.transposed()
    } else {
        panel.clone()
    };
    let index = build_overlap_index(&work);
    let cov = pairwise_covariance(&work, &index)?;
    let dim = work.n_times();
    let spectrum_len = panel.n_units().min(panel.n_times()).min(FULL_EIGEN_MAX);
    let scaled = &cov.sigma_hat / dim as f64;
    let (values, mut vectors) = eigen_desc(&scaled, spectrum_len);
    let eigenvalues = DVector::from_vec(values.clone());
    let rank = select_rank(&values, rank_method)?;
    let mut factor_block = vectors.columns_mut(0, rank).into_owned();
    factor_block.scale_mut((dim as f64).sqrt());
    fix_column_signs(&mut factor_block);
    let (regressed, reg_ok) = estimate_loadings(&work, &factor_block);
    if transpose {
        let loading_ok = (0..panel.n_units())
            .map(|i| panel.observed_count(i) >= 1)
            .collect();
        Ok(FactorModelFit {
            factors: regressed,
            loadings: factor_block,
            rank,
            eigenvalues,
            loading_ok,
            transposed: true,
        })
    } else {
        Ok(FactorModelFit {
            factors: factor_block,
            loadings: regressed,
            rank,
            eigenvalues,
            loading_ok: reg_ok,
            transposed: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn orthonormality_defect(factors: &DMatrix<f64>) -> f64 {
        let t = factors.nrows() as f64;
        let gram = factors.transpose() * factors / t;
        let r = factors.ncols();
        (gram - DMatrix::identity(r, r)).abs().max()
    }

    #[test]
    fn fully_observed_matches_plain_cross_moment() {
        let y = DMatrix::from_row_slice(3, 4, &[1., 2., 3., 4., 2., 1., 0., 1., 5., 3., 2., 2.]);
        let panel = Panel::fully_observed(y.clone()).unwrap();
        let index = build_overlap_index(&panel);
        let cov = pairwise_covariance(&panel, &index).unwrap();
        let expected = y.transpose() * &y / 3.0;
        assert_abs_diff_eq!(cov.sigma_hat, expected, epsilon = 1e-12);
        assert!(cov.zero_filled.is_empty());
    }

    #[test]
    fn hand_enumerated_two_by_two() {
        let y = DMatrix::from_row_slice(2, 2, &[1., 2., 3., 4.]);
        let mask = DMatrix::from_row_slice(2, 2, &[1u8, 1, 1, 0]);
        let panel = Panel::new(y, mask).unwrap();
        let index = build_overlap_index(&panel);
        let cov = pairwise_covariance(&panel, &index).unwrap();
        assert_abs_diff_eq!(cov.sigma_hat[(0, 0)], 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov.sigma_hat[(0, 1)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov.sigma_hat[(1, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov.sigma_hat[(1, 1)], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn disjoint_columns_zero_filled() {
        let y = DMatrix::from_row_slice(2, 2, &[1., 0., 0., 2.]);
        let mask = DMatrix::from_row_slice(2, 2, &[1u8, 0, 0, 1]);
        let panel = Panel::new(y, mask).unwrap();
        let index = build_overlap_index(&panel);
        let cov = pairwise_covariance(&panel, &index).unwrap();
        assert_eq!(cov.zero_filled, vec![(0, 1)]);
        assert_eq!(cov.sigma_hat[(0, 1)], 0.0);
        assert_abs_diff_eq!(cov.sigma_hat[(0, 0)], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cov.sigma_hat[(1, 1)], 4.0, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_spectrum_still_orthonormal() {
        let t = 12;
        let cov = PairwiseCovariance {
            sigma_hat: DMatrix::identity(t, t) * (3.0 * t as f64),
            zero_filled: vec![],
        };
        let factors = estimate_factors(&cov, 4).unwrap();
        assert!(orthonormality_defect(&factors) < 1e-10);
    }

    #[test]
    fn noiseless_rank_one_recovery() {
        let t = 30;
        let n = 20;
        let f: DVector<f64> = DVector::from_fn(t, |s, _| (0.3 * s as f64).sin() + 0.5);
        let lam: DVector<f64> = DVector::from_fn(n, |i, _| 0.1 * i as f64 - 0.7);
        let y = &lam * f.transpose();
        let panel = Panel::fully_observed(y).unwrap();
        let index = build_overlap_index(&panel);
        let cov = pairwise_covariance(&panel, &index).unwrap();
        let factors = estimate_factors(&cov, 1).unwrap();
        let est = factors.column(0);
        let cosine = est.dot(&f).abs() / (est.norm() * f.norm());
        let angle = cosine.min(1.0).acos();
        assert!(angle < 1e-8, "principal angle {angle}");
    }

    #[test]
    fn rank_too_large_rejected() {
        let cov = PairwiseCovariance {
            sigma_hat: DMatrix::identity(3, 3),
            zero_filled: vec![],
        };
        assert!(matches!(
            estimate_factors(&cov, 4),
            Err(Error::RankTooLarge { .. })
        ));
        assert!(matches!(
            estimate_factors(&cov, 0),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn loadings_interpolate_noiseless_panel() {
        let t = 24;
        let n = 10;
        let f: DVector<f64> = DVector::from_fn(t, |s, _| (0.4 * s as f64).cos() + 0.2);
        let lam: DVector<f64> = DVector::from_fn(n, |i, _| 0.25 * i as f64 - 1.0);
        let y = &lam * f.transpose();
        let panel = Panel::fully_observed(y.clone()).unwrap();
        let index = build_overlap_index(&panel);
        let cov = pairwise_covariance(&panel, &index).unwrap();
        let factors = estimate_factors(&cov, 1).unwrap();
        let (loadings, ok) = estimate_loadings(&panel, &factors);
        assert!(ok.iter().all(|&b| b));
        for i in 0..n {
            for s in 0..t {
                let fitted = loadings.row(i).dot(&factors.row(s));
                assert_abs_diff_eq!(fitted, y[(i, s)], epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn empty_unit_flagged_not_fatal() {
        let y = DMatrix::from_row_slice(2, 3, &[1., 2., 3., 0., 0., 0.]);
        let mask = DMatrix::from_row_slice(2, 3, &[1u8, 1, 1, 0, 0, 0]);
        let panel = Panel::new(y, mask).unwrap();
        let factors = DMatrix::from_column_slice(3, 1, &[1.0, 1.0, 1.0]);
        let (loadings, ok) = estimate_loadings(&panel, &factors);
        assert!(ok[0]);
        assert!(!ok[1]);
        assert_eq!(loadings[(1, 0)], 0.0);
    }

    #[test]
    fn exactly_r_observations_solve_exactly() {
        // Unit observed at exactly two linearly independent factor times.
        let factors =
            DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, -1.0]);
        let truth = DVector::from_column_slice(&[1.5, -2.0]);
        let mut values = DMatrix::zeros(1, 4);
        let mut mask = DMatrix::from_element(1, 4, 0u8);
        for &s in &[0usize, 1] {
            values[(0, s)] = factors.row(s).transpose().dot(&truth);
            mask[(0, s)] = 1;
        }
        let panel = Panel::new(values, mask).unwrap();
        let (loadings, ok) = estimate_loadings(&panel, &factors);
        assert!(ok[0]);
        assert_abs_diff_eq!(loadings[(0, 0)], 1.5, epsilon = 1e-10);
        assert_abs_diff_eq!(loadings[(0, 1)], -2.0, epsilon = 1e-10);
    }

    #[test]
    fn rank_selection_examples() {
        assert_eq!(
            select_rank(&[4.0, 0.0, 0.0], RankMethod::ExplainedVariance(0.8)).unwrap(),
            1
        );
        assert_eq!(
            select_rank(&[5.0, 3.0, 2.0], RankMethod::ExplainedVariance(0.8)).unwrap(),
            2
        );
        assert_eq!(
            select_rank(&[10.0, 5.0, 0.1, 0.05], RankMethod::EigenRatio).unwrap(),
            2
        );
        assert_eq!(select_rank(&[3.0, 1.0], RankMethod::Fixed(2)).unwrap(), 2);
        assert!(matches!(
            select_rank(&[0.0, 0.0], RankMethod::Fixed(1)),
            Err(Error::AllZeroSpectrum)
        ));
        assert!(matches!(
            select_rank(&[1.0], RankMethod::Fixed(2)),
            Err(Error::RankTooLarge { .. })
        ));
    }

    #[test]
    fn scale_equivariance() {
        let y = DMatrix::from_fn(8, 12, |i, s| ((i * 7 + s * 3) % 11) as f64 - 5.0);
        let mask = DMatrix::from_fn(8, 12, |i, s| u8::from((i + s) % 5 != 0));
        let c = 2.5;
        let a = Panel::new(y.clone(), mask.clone()).unwrap();
        let b = Panel::new(y * c, mask).unwrap();
        let fit_a = fit_factor_model(&a, RankMethod::Fixed(2), false).unwrap();
        let fit_b = fit_factor_model(&b, RankMethod::Fixed(2), false).unwrap();
        assert_abs_diff_eq!(fit_a.factors, fit_b.factors, epsilon = 1e-8);
        assert_abs_diff_eq!(&fit_a.loadings * c, fit_b.loadings, epsilon = 1e-8);
    }

    #[test]
    fn iterative_matches_full_eigen() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for &dim in &[40usize, 150] {
            let a = DMatrix::from_fn(dim, dim, |_, _| rng.random::<f64>() - 0.5);
            let sym = (&a + a.transpose()) * 0.5;
            let k = 5;
            let (vals_full, vecs_full) = eigen_desc_full(&sym, k);
            let (vals_iter, vecs_iter) = eigen_desc_iterative(&sym, k);
            for j in 0..k {
                assert!(
                    (vals_full[j] - vals_iter[j]).abs() < 1e-8,
                    "eigenvalue {j}: {} vs {}",
                    vals_full[j],
                    vals_iter[j]
                );
                let dot = vecs_full.column(j).dot(&vecs_iter.column(j)).abs();
                assert!(dot > 1.0 - 1e-8, "eigenvector {j} alignment {dot}");
            }
        }
    }

    #[test]
    fn transposed_fit_maps_back() {
        let y = DMatrix::from_fn(6, 10, |i, s| (i as f64 + 1.0) * (0.2 * s as f64).sin());
        let panel = Panel::fully_observed(y).unwrap();
        let fit = fit_factor_model(&panel, RankMethod::Fixed(1), true).unwrap();
        assert!(fit.transposed);
        assert_eq!(fit.factors.nrows(), 10);
        assert_eq!(fit.loadings.nrows(), 6);
        // Eigenvector side is orthonormal in the transposed orientation.
        let n = fit.loadings.nrows() as f64;
        let gram = fit.loadings.transpose() * &fit.loadings / n;
        assert_abs_diff_eq!(gram[(0, 0)], 1.0, epsilon = 1e-10);
        // The fit still reproduces the noiseless panel.
        for i in 0..6 {
            for s in 0..10 {
                assert_abs_diff_eq!(
                    fit.common_component(i, s),
                    (i as f64 + 1.0) * (0.2 * s as f64).sin(),
                    epsilon = 1e-8
                );
            }
        }
    }

    #[test]
    fn single_unit_panel_rank_bound() {
        let y = DMatrix::from_row_slice(1, 5, &[1., 2., 3., 2., 1.]);
        let panel = Panel::fully_observed(y).unwrap();
        match fit_factor_model(&panel, RankMethod::Fixed(2), false) {
            Err(Error::RankTooLarge { .. }) => {}
            other => panic!("expected RankTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn orthonormality_holds_on_noisy_masked_panel() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let y = DMatrix::from_fn(30, 40, |_, _| rng.random::<f64>() - 0.5);
        let mask = DMatrix::from_fn(30, 40, |_, _| u8::from(rng.random::<f64>() < 0.8));
        let panel = Panel::new(y, mask).unwrap();
        let fit = fit_factor_model(&panel, RankMethod::Fixed(3), false).unwrap();
        assert!(orthonormality_defect(&fit.factors) < 1e-10);
    }
}

//! Penalized-spline removal of deterministic factor components.
//!
//! Each factor column is smoothed with a cubic B-spline basis on equally
//! spaced knots and a second-order difference penalty on the spline
//! coefficients. The penalty leaves linear series untouched, so constants
//! and trends in the penalty null space are reproduced exactly at any
//! penalty level. The penalty itself is tuned by forward-chaining block
//! cross validation: contiguous time blocks are grouped into
//! chronological folds and each fold is predicted from the folds before
//! it.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Knot count and penalty-grid settings.
#[derive(Debug, Clone)]
pub struct SplineOptions {
    /// Interior knot count; `None` picks `ceil(T / 4)`.
    pub n_interior_knots: Option<usize>,
    /// Number of penalty-grid points for cross validation.
    pub grid_points: usize,
    /// Grid spans `[grid_min_factor, grid_max_factor]` times a data-scale
    /// normalizer.
    pub grid_min_factor: f64,
    pub grid_max_factor: f64,
}

impl Default for SplineOptions {
    fn default() -> Self {
        Self {
            n_interior_knots: None,
            grid_points: 25,
            grid_min_factor: 1e-4,
            grid_max_factor: 1e4,
        }
    }
}

/// A fitted penalized spline for one series.
#[derive(Debug, Clone)]
pub struct SplineFit {
    /// Smoothed values at the input positions.
    pub fitted: DVector<f64>,
    /// `input - fitted`, entrywise.
    pub residuals: DVector<f64>,
    /// Penalty weight the fit used.
    pub penalty: f64,
    /// Number of basis functions.
    pub basis_dim: usize,
    /// `(penalty, mean held-out squared error)` pairs when the penalty
    /// was chosen by cross validation; empty otherwise.
    pub cv_scores: Vec<(f64, f64)>,
}

impl SplineFit {
    /// Continues the trend past the end of the series: linear
    /// continuation with the slope of the last fitted segment.
    pub fn extrapolate(&self, steps: usize) -> f64 {
        let t = self.fitted.len();
        let last = self.fitted[t - 1];
        let slope = last - self.fitted[t - 2];
        last + steps as f64 * slope
    }
}

/// Cross-validation outcome: the chosen penalty and the score curve.
#[derive(Debug, Clone)]
pub struct PenaltyChoice {
    pub lambda: f64,
    /// `(penalty, mean held-out squared error)` along the grid.
    pub cv_scores: Vec<(f64, f64)>,
}

/// Per-column decomposition of a factor matrix into trend and residual.
#[derive(Debug, Clone)]
pub struct DetrendResult {
    pub trend: DMatrix<f64>,
    pub residual: DMatrix<f64>,
    pub fits: Vec<SplineFit>,
}

/// Uniform cubic B-spline basis on `[1, T]` in the unclamped (equally
/// spaced knots beyond both boundaries) parameterization, where the
/// second-difference coefficient penalty has exactly the linear functions
/// as its null space.
struct SplineBasis {
    n_segments: usize,
    step: f64,
    x_min: f64,
}

impl SplineBasis {
    fn new(t: usize, n_interior: usize) -> Self {
        let n_segments = n_interior + 1;
        let span = (t - 1).max(1) as f64;
        SplineBasis {
            n_segments,
            step: span / n_segments as f64,
            x_min: 1.0,
        }
    }

    fn dim(&self) -> usize {
        self.n_segments + 3
    }

    /// Row of basis values at position `x`; only four entries are
    /// nonzero for a cubic basis.
    fn row(&self, x: f64, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = 0.0;
        }
        let pos = (x - self.x_min) / self.step;
        let seg = (pos.floor() as isize).clamp(0, self.n_segments as isize - 1) as usize;
        let u = pos - seg as f64;
        let b0 = (1.0 - u).powi(3) / 6.0;
        let b1 = (3.0 * u.powi(3) - 6.0 * u * u + 4.0) / 6.0;
        let b2 = (-3.0 * u.powi(3) + 3.0 * u * u + 3.0 * u + 1.0) / 6.0;
        let b3 = u.powi(3) / 6.0;
        out[seg] = b0;
        out[seg + 1] = b1;
        out[seg + 2] = b2;
        out[seg + 3] = b3;
    }

    fn design(&self, positions: &[f64]) -> DMatrix<f64> {
        let k = self.dim();
        let mut design = DMatrix::zeros(positions.len(), k);
        let mut row = vec![0.0; k];
        for (i, &x) in positions.iter().enumerate() {
            self.row(x, &mut row);
            for (j, &v) in row.iter().enumerate() {
                design[(i, j)] = v;
            }
        }
        design
    }

    /// Second-difference penalty `D' D` on the coefficients.
    fn penalty(&self) -> DMatrix<f64> {
        let k = self.dim();
        let mut d = DMatrix::zeros(k - 2, k);
        for i in 0..k - 2 {
            d[(i, i)] = 1.0;
            d[(i, i + 1)] = -2.0;
            d[(i, i + 2)] = 1.0;
        }
        d.transpose() * d
    }
}

fn default_interior(t: usize) -> usize {
    t.div_ceil(4)
}

fn solve_penalized(
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    lambda: f64,
    y: &DVector<f64>,
) -> Result<DVector<f64>> {
    let system = design.transpose() * design + penalty * lambda;
    let rhs = design.transpose() * y;
    match system.clone().cholesky() {
        Some(chol) => Ok(chol.solve(&rhs)),
        None => system.lu().solve(&rhs).ok_or(Error::SingularSystem),
    }
}

/// Scale balance between the fit and penalty blocks, used to anchor the
/// cross-validation grid. Invariant to the response scale.
fn grid_normalizer(design: &DMatrix<f64>, penalty: &DMatrix<f64>) -> f64 {
    let tr_fit: f64 = (0..design.ncols())
        .map(|j| design.column(j).norm_squared())
        .sum();
    let tr_pen = penalty.diagonal().sum();
    (tr_fit / tr_pen).max(f64::MIN_POSITIVE)
}

fn penalty_grid(normalizer: f64, opts: &SplineOptions) -> Vec<f64> {
    let n = opts.grid_points.max(2);
    let log_min = opts.grid_min_factor.log10();
    let log_max = opts.grid_max_factor.log10();
    (0..n)
        .map(|j| {
            let frac = j as f64 / (n - 1) as f64;
            normalizer * 10f64.powf(log_min + frac * (log_max - log_min))
        })
        .collect()
}

/// Fits a penalized smoothing spline at a fixed penalty.
pub fn fit_penalized_spline(series: &DVector<f64>, lambda: f64) -> Result<SplineFit> {
    fit_penalized_spline_with(series, lambda, &SplineOptions::default())
}

/// As [`fit_penalized_spline`] with explicit knot and grid settings.
pub fn fit_penalized_spline_with(
    series: &DVector<f64>,
    lambda: f64,
    opts: &SplineOptions,
) -> Result<SplineFit> {
    let t = series.len();
    if t < 4 {
        return Err(Error::TooShort(format!("spline needs T >= 4, got {t}")));
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "penalty must be nonnegative, got {lambda}"
        )));
    }
    let basis = SplineBasis::new(t, opts.n_interior_knots.unwrap_or_else(|| default_interior(t)));
    let positions: Vec<f64> = (1..=t).map(|x| x as f64).collect();
    let design = basis.design(&positions);
    let penalty = basis.penalty();
    let coef = solve_penalized(&design, &penalty, lambda, series)?;
    let fitted = &design * &coef;
    let residuals = series - &fitted;
    Ok(SplineFit {
        fitted,
        residuals,
        penalty: lambda,
        basis_dim: basis.dim(),
        cv_scores: Vec::new(),
    })
}

/// Chooses the penalty by forward-chaining block cross validation.
///
/// Time is cut into contiguous blocks of `block` points which are grouped
/// chronologically into `folds` folds; every fold after the first is
/// scored using a fit on all earlier folds, and the penalty minimizing
/// the mean held-out squared error wins (ties to the smallest penalty).
pub fn tune_penalty_blockcv(
    series: &DVector<f64>,
    folds: usize,
    block: usize,
) -> Result<PenaltyChoice> {
    tune_penalty_blockcv_with(series, folds, block, &SplineOptions::default())
}

/// As [`tune_penalty_blockcv`] with explicit knot and grid settings.
pub fn tune_penalty_blockcv_with(
    series: &DVector<f64>,
    folds: usize,
    block: usize,
    opts: &SplineOptions,
) -> Result<PenaltyChoice> {
    let t = series.len();
    if folds < 2 || block == 0 {
        return Err(Error::InvalidInput(
            "need at least two folds and a positive block size".into(),
        ));
    }
    if t < 2 * folds {
        return Err(Error::TooShort(format!(
            "need T >= 2 * folds = {}, got {t}",
            2 * folds
        )));
    }
    let n_blocks = t.div_ceil(block);
    if n_blocks < folds {
        return Err(Error::TooShort(format!(
            "only {n_blocks} blocks of size {block} exist for {folds} folds"
        )));
    }
    // Chronological fold boundaries in units of blocks, sizes as even as
    // possible with earlier folds taking the remainder.
    let base = n_blocks / folds;
    let rem = n_blocks % folds;
    let mut fold_times: Vec<Vec<usize>> = Vec::with_capacity(folds);
    let mut next_block = 0;
    for fold in 0..folds {
        let take = base + usize::from(fold < rem);
        let start = next_block * block;
        let end = ((next_block + take) * block).min(t);
        fold_times.push((start..end).collect());
        next_block += take;
    }

    let basis = SplineBasis::new(t, opts.n_interior_knots.unwrap_or_else(|| default_interior(t)));
    let positions: Vec<f64> = (1..=t).map(|x| x as f64).collect();
    let design = basis.design(&positions);
    let penalty = basis.penalty();
    let grid = penalty_grid(grid_normalizer(&design, &penalty), opts);

    let mut scores = vec![0.0f64; grid.len()];
    let mut scored_folds = 0usize;
    let mut train: Vec<usize> = Vec::new();
    for fold in 0..folds {
        if fold > 0 && !fold_times[fold].is_empty() && !train.is_empty() {
            let test = &fold_times[fold];
            let train_design = select_rows(&design, &train);
            let train_y = DVector::from_iterator(train.len(), train.iter().map(|&i| series[i]));
            for (g, &lambda) in grid.iter().enumerate() {
                let coef = solve_penalized(&train_design, &penalty, lambda, &train_y)?;
                let mut sse = 0.0;
                for &time in test {
                    let fitted = design.row(time) * &coef;
                    let err = series[time] - fitted[(0, 0)];
                    sse += err * err;
                }
                scores[g] += sse / test.len() as f64;
            }
            scored_folds += 1;
        }
        train.extend_from_slice(&fold_times[fold]);
    }
    if scored_folds == 0 {
        return Err(Error::TooShort("no fold could be scored".into()));
    }
    for s in scores.iter_mut() {
        *s /= scored_folds as f64;
    }
    let mut best = 0;
    for (g, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = g;
        }
    }
    Ok(PenaltyChoice {
        lambda: grid[best],
        cv_scores: grid.into_iter().zip(scores).collect(),
    })
}

fn select_rows(m: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows.len(), m.ncols());
    for (i, &row) in rows.iter().enumerate() {
        out.row_mut(i).copy_from(&m.row(row));
    }
    out
}

/// Detrends each factor column with its own cross-validated penalty.
pub fn detrend_factors(factors: &DMatrix<f64>) -> Result<DetrendResult> {
    detrend_factors_with(factors, &SplineOptions::default())
}

/// As [`detrend_factors`] with explicit knot and grid settings.
pub fn detrend_factors_with(
    factors: &DMatrix<f64>,
    opts: &SplineOptions,
) -> Result<DetrendResult> {
    let t = factors.nrows();
    let block = (t as f64).sqrt().ceil() as usize;
    let mut trend = DMatrix::zeros(t, factors.ncols());
    let mut residual = DMatrix::zeros(t, factors.ncols());
    let mut fits = Vec::with_capacity(factors.ncols());
    for j in 0..factors.ncols() {
        let col = factors.column(j).into_owned();
        let choice = tune_penalty_blockcv_with(&col, 10, block, opts)?;
        let mut fit = fit_penalized_spline_with(&col, choice.lambda, opts)?;
        fit.cv_scores = choice.cv_scores;
        trend.set_column(j, &fit.fitted);
        residual.set_column(j, &fit.residuals);
        fits.push(fit);
    }
    Ok(DetrendResult {
        trend,
        residual,
        fits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn linear_series_reproduced_for_any_penalty() {
        let t = 40;
        let series = DVector::from_fn(t, |i, _| 3.0 - 0.25 * i as f64);
        for &lambda in &[0.0, 1e-3, 1.0, 1e4, 1e9] {
            let fit = fit_penalized_spline(&series, lambda).unwrap();
            assert!(
                fit.residuals.abs().max() < 1e-8,
                "lambda {lambda}: max residual {}",
                fit.residuals.abs().max()
            );
        }
    }

    #[test]
    fn constant_series_exact() {
        let series = DVector::from_element(25, 4.2);
        let fit = fit_penalized_spline(&series, 10.0).unwrap();
        assert!(fit.residuals.abs().max() < 1e-10);
    }

    #[test]
    fn decomposition_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let series = DVector::from_fn(50, |_, _| normal.sample(&mut rng));
        let fit = fit_penalized_spline(&series, 2.0).unwrap();
        let back = &fit.fitted + &fit.residuals;
        assert_eq!(back, series);
    }

    #[test]
    fn quadratic_trend_residuals_small_at_moderate_penalty() {
        let t = 256;
        let series = DVector::from_fn(t, |i, _| {
            let x = (i + 1) as f64;
            2.0 * x * x / (t as f64 * t as f64)
        });
        // Mid-grid penalty: the normalizer times one.
        let basis = SplineBasis::new(t, default_interior(t));
        let positions: Vec<f64> = (1..=t).map(|x| x as f64).collect();
        let normalizer = grid_normalizer(&basis.design(&positions), &basis.penalty());
        let fit = fit_penalized_spline(&series, normalizer).unwrap();
        assert!(
            fit.residuals.abs().max() < 0.05,
            "max residual {}",
            fit.residuals.abs().max()
        );
    }

    #[test]
    fn infinite_penalty_limit_is_linear_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let t = 60;
        let series = DVector::from_fn(t, |i, _| 1.0 + 0.1 * i as f64 + normal.sample(&mut rng));
        let fit = fit_penalized_spline(&series, 1e13).unwrap();
        // Ordinary least-squares line.
        let xbar = (t as f64 + 1.0) / 2.0;
        let ybar = series.mean();
        let mut sxy = 0.0;
        let mut sxx = 0.0;
        for i in 0..t {
            let x = (i + 1) as f64;
            sxy += (x - xbar) * (series[i] - ybar);
            sxx += (x - xbar) * (x - xbar);
        }
        let slope = sxy / sxx;
        for i in 0..t {
            let x = (i + 1) as f64;
            let line = ybar + slope * (x - xbar);
            assert!(
                (fit.fitted[i] - line).abs() < 1e-4,
                "index {i}: {} vs {line}",
                fit.fitted[i]
            );
        }
    }

    #[test]
    fn interpolation_at_zero_penalty_with_full_basis() {
        // basis_dim = T: n_interior = T - 4 gives dim = T.
        let t = 16;
        let series = DVector::from_fn(t, |i, _| ((i * i) % 7) as f64);
        let opts = SplineOptions {
            n_interior_knots: Some(t - 4),
            ..SplineOptions::default()
        };
        let fit = fit_penalized_spline_with(&series, 0.0, &opts).unwrap();
        assert_eq!(fit.basis_dim, t);
        assert!(
            fit.residuals.abs().max() < 1e-7,
            "max residual {}",
            fit.residuals.abs().max()
        );
    }

    #[test]
    fn rss_nondecreasing_in_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let series = DVector::from_fn(80, |i, _| (0.1 * i as f64).sin() + normal.sample(&mut rng));
        let mut prev = -1.0;
        for &lambda in &[0.0, 0.01, 0.1, 1.0, 10.0, 100.0, 1e4] {
            let fit = fit_penalized_spline(&series, lambda).unwrap();
            let rss = fit.residuals.norm_squared();
            assert!(rss >= prev - 1e-9, "rss fell from {prev} to {rss} at {lambda}");
            prev = rss;
        }
    }

    #[test]
    fn too_short_for_requested_blocks() {
        let series = DVector::from_fn(20, |i, _| i as f64);
        match tune_penalty_blockcv(&series, 10, 5) {
            Err(Error::TooShort(_)) => {}
            other => panic!("expected TooShort, got {other:?}"),
        }
    }

    #[test]
    fn white_noise_selects_strong_smoothing() {
        let mut top_hits = 0;
        let trials = 50;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let series = DVector::from_fn(128, |_, _| normal.sample(&mut rng));
            let block = (128f64).sqrt().ceil() as usize;
            let choice = tune_penalty_blockcv(&series, 10, block).unwrap();
            let grid_max = choice.cv_scores.last().unwrap().0;
            // "near the grid maximum": within two decades of the top.
            if choice.lambda >= grid_max * 1e-2 {
                top_hits += 1;
            }
        }
        assert!(top_hits * 2 > trials, "strong smoothing in {top_hits}/{trials}");
    }

    #[test]
    fn noiseless_quadratic_cv_fit_is_tight() {
        let t = 64;
        let series = DVector::from_fn(t, |i, _| {
            let x = (i + 1) as f64 / t as f64;
            2.0 * x * x
        });
        let block = (t as f64).sqrt().ceil() as usize;
        let choice = tune_penalty_blockcv(&series, 10, block).unwrap();
        let fit = fit_penalized_spline(&series, choice.lambda).unwrap();
        let mse = fit.residuals.norm_squared() / t as f64;
        assert!(mse < 1e-4, "in-sample mse {mse}");
    }

    #[test]
    fn detrend_factors_shapes_and_exactness() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let t = 100;
        let factors = DMatrix::from_fn(t, 2, |i, j| {
            let x = (i + 1) as f64 / t as f64;
            (j as f64 + 1.0) * x * x + normal.sample(&mut rng)
        });
        let result = detrend_factors(&factors).unwrap();
        assert_eq!(result.trend.shape(), (t, 2));
        assert_eq!(result.fits.len(), 2);
        let back = &result.trend + &result.residual;
        assert_eq!(back, factors);
        assert!(!result.fits[0].cv_scores.is_empty());
    }

    #[test]
    fn residual_mean_small_for_trending_factor() {
        // Trend plus AR(1): the residual column should pass a mean-zero
        // check at the 3-sigma level.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let t = 256;
        let mut ar = 0.0;
        let factors = DMatrix::from_fn(t, 1, |i, _| {
            ar = 0.5 * ar + normal.sample(&mut rng);
            let x = (i + 1) as f64;
            2.0 * x * x / (t as f64 * t as f64) + ar
        });
        let result = detrend_factors(&factors).unwrap();
        let col = result.residual.column(0);
        let mean = col.mean();
        let sd = (col.norm_squared() / t as f64 - mean * mean).sqrt();
        assert!(
            mean.abs() < 3.0 * sd / (t as f64).sqrt(),
            "residual mean {mean}, sd {sd}"
        );
    }

    #[test]
    fn constant_factor_residual_is_zero() {
        let factors = DMatrix::from_element(64, 1, 2.5);
        let result = detrend_factors(&factors).unwrap();
        assert!(result.residual.abs().max() < 1e-8);
    }

    #[test]
    fn extrapolation_continues_last_slope() {
        let series = DVector::from_fn(30, |i, _| 1.0 + 2.0 * i as f64);
        let fit = fit_penalized_spline(&series, 1.0).unwrap();
        let last = fit.fitted[29];
        let slope = fit.fitted[29] - fit.fitted[28];
        assert!((fit.extrapolate(3) - (last + 3.0 * slope)).abs() < 1e-12);
        // For an exactly linear series this continues the line.
        assert!((fit.extrapolate(2) - (1.0 + 2.0 * 31.0)).abs() < 1e-6);
    }
}

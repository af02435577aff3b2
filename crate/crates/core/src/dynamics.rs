//! Autoregressive dynamics on estimated factors and point forecasting.
//!
//! A VAR(p) is fitted to the factor rows by stacked least squares without
//! an intercept (the factors are mean zero under the model). Order one
//! reproduces the closed-form coefficient estimator
//! `(sum F(t+1) F(t)') (sum F(t) F(t)')^{-1}`; higher orders go through
//! the companion form for stability diagnostics and multi-step
//! forecasting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::factors::FactorModelFit;
use crate::linalg::{condition_number, spectral_norm, spectral_radius};

/// Regressor Gram matrices with condition numbers past this bound are
/// treated as singular.
const GRAM_COND_MAX: f64 = 1e12;

/// Fitted VAR(p) dynamics on `r` factors.
#[derive(Debug, Clone)]
pub struct VarDynamics {
    /// Lag coefficient matrices `A_1 .. A_p`, each `r x r`.
    pub coef: Vec<DMatrix<f64>>,
    /// Residual covariance with divisor `T - p`; symmetric PSD.
    pub innovation_cov: DMatrix<f64>,
    /// Lag order `p`.
    pub order: usize,
    /// Largest eigenvalue modulus of the companion matrix.
    pub spectral_radius: f64,
    /// Effective sample size `T - p`.
    pub n_obs: usize,
}

impl VarDynamics {
    /// Number of factors.
    pub fn rank(&self) -> usize {
        self.coef[0].nrows()
    }

    /// Whether the fitted dynamics are stable.
    pub fn is_stable(&self) -> bool {
        self.spectral_radius < 1.0
    }

    /// The `rp x rp` companion matrix: lag blocks on the first block row,
    /// identity on the subdiagonal.
    pub fn companion_matrix(&self) -> DMatrix<f64> {
        companion(&self.coef)
    }
}

/// Point forecast for one unit and horizon, with its asymptotic interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastResult {
    pub unit: usize,
    pub horizon: usize,
    pub point: f64,
    pub std_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    /// The rate scale `min(sqrt(N), sqrt(T))` the interval was built with.
    pub delta_nt: f64,
}

fn companion(coef: &[DMatrix<f64>]) -> DMatrix<f64> {
    let r = coef[0].nrows();
    let p = coef.len();
    let dim = r * p;
    let mut c = DMatrix::zeros(dim, dim);
    for (j, a) in coef.iter().enumerate() {
        c.view_mut((0, j * r), (r, r)).copy_from(a);
    }
    for j in 0..p.saturating_sub(1) {
        c.view_mut(((j + 1) * r, j * r), (r, r))
            .copy_from(&DMatrix::identity(r, r));
    }
    c
}

/// Fits a VAR(p) to the factor rows by least squares.
pub fn fit_var(factors: &DMatrix<f64>, order: usize) -> Result<VarDynamics> {
    let t = factors.nrows();
    let r = factors.ncols();
    if order < 1 {
        return Err(Error::InvalidInput("VAR order must be at least 1".into()));
    }
    if t <= order * r + 1 {
        return Err(Error::TooShort(format!(
            "need T > p*r + 1 = {} observations, got {t}",
            order * r + 1
        )));
    }
    let rows = t - order;
    let cols = r * order;
    let mut x = DMatrix::zeros(rows, cols);
    let mut y = DMatrix::zeros(rows, r);
    for row in 0..rows {
        let target = row + order;
        y.row_mut(row).copy_from(&factors.row(target));
        for lag in 1..=order {
            x.view_mut((row, (lag - 1) * r), (1, r))
                .copy_from(&factors.row(target - lag));
        }
    }
    let gram = x.transpose() * &x;
    let cond = condition_number(&gram);
    if cond > GRAM_COND_MAX {
        return Err(Error::SingularGram { cond });
    }
    let rhs = x.transpose() * &y;
    let beta = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularGram { cond })?,
    };
    let coef: Vec<DMatrix<f64>> = (0..order)
        .map(|lag| beta.rows(lag * r, r).transpose())
        .collect();
    let resid = &y - &x * &beta;
    let cov = resid.transpose() * &resid / (t - order) as f64;
    let innovation_cov = (&cov + cov.transpose()) * 0.5;
    let rho = spectral_radius(&companion(&coef));
    Ok(VarDynamics {
        coef,
        innovation_cov,
        order,
        spectral_radius: rho,
        n_obs: rows,
    })
}

/// Picks the lag order minimizing `log det(innovation cov) + 2 p r^2 / T`
/// over `1..=max_order`, ties to the smallest order.
///
/// Candidate orders are compared on the common sample that conditions on
/// the first `max_order` rows, so every candidate predicts the same
/// targets; the residual covariance is degrees-of-freedom adjusted.
/// Comparing per-order windows instead makes the criterion noticeably
/// noisier.
pub fn select_order(factors: &DMatrix<f64>, max_order: usize) -> Result<usize> {
    let t = factors.nrows();
    let r = factors.ncols();
    if max_order < 1 {
        return Err(Error::InvalidInput("max_order must be at least 1".into()));
    }
    if max_order * r + 1 >= t {
        return Err(Error::TooShort(format!(
            "need max_order*r + 1 < T, got {max_order}*{r} + 1 vs T = {t}"
        )));
    }
    let rows = t - max_order;
    if rows <= max_order * r {
        return Err(Error::TooShort(format!(
            "need T - max_order > max_order*r, got {rows} common rows for {} regressors",
            max_order * r
        )));
    }
    let mut best_order = 1;
    let mut best_aic = f64::INFINITY;
    for p in 1..=max_order {
        let cols = p * r;
        let mut x = DMatrix::zeros(rows, cols);
        let mut y = DMatrix::zeros(rows, r);
        for row in 0..rows {
            let target = row + max_order;
            y.row_mut(row).copy_from(&factors.row(target));
            for lag in 1..=p {
                x.view_mut((row, (lag - 1) * r), (1, r))
                    .copy_from(&factors.row(target - lag));
            }
        }
        let gram = x.transpose() * &x;
        let cond = condition_number(&gram);
        if cond > GRAM_COND_MAX {
            return Err(Error::SingularGram { cond });
        }
        let rhs = x.transpose() * &y;
        let beta = match gram.clone().cholesky() {
            Some(chol) => chol.solve(&rhs),
            None => gram
                .lu()
                .solve(&rhs)
                .ok_or(Error::SingularGram { cond })?,
        };
        let resid = &y - &x * &beta;
        let cov = resid.transpose() * &resid / (rows - cols) as f64;
        let aic = cov.determinant().max(1e-300).ln() + 2.0 * (p * r * r) as f64 / t as f64;
        if aic < best_aic {
            best_aic = aic;
            best_order = p;
        }
    }
    Ok(best_order)
}

/// Multi-step factor prediction from the last `p` factor rows.
pub(crate) fn predict_factor(
    factors: &DMatrix<f64>,
    dynamics: &VarDynamics,
    horizon: usize,
) -> DVector<f64> {
    let r = dynamics.rank();
    let p = dynamics.order;
    let t = factors.nrows();
    // State holds [F(t), F(t-1), .., F(t-p+1)].
    let mut state: Vec<DVector<f64>> = (0..p)
        .map(|lag| factors.row(t - 1 - lag).transpose())
        .collect();
    for _ in 0..horizon {
        let mut next = DVector::zeros(r);
        for (lag, a) in dynamics.coef.iter().enumerate() {
            next += a * &state[lag];
        }
        state.rotate_right(1);
        state[0] = next;
    }
    state[0].clone()
}

/// Point forecast `loading(i) . predicted factor at T + h`.
///
/// Unstable fitted dynamics still forecast; callers can consult
/// [`VarDynamics::is_stable`] for the warning flag.
pub fn forecast(
    fit: &FactorModelFit,
    dynamics: &VarDynamics,
    unit: usize,
    horizon: usize,
) -> Result<f64> {
    if horizon < 1 {
        return Err(Error::InvalidInput("horizon must be at least 1".into()));
    }
    if unit >= fit.loadings.nrows() {
        return Err(Error::InvalidInput(format!(
            "unit {unit} out of range for {} units",
            fit.loadings.nrows()
        )));
    }
    if !fit.loading_ok[unit] {
        return Err(Error::DegenerateUnit { unit });
    }
    Ok(forecast_from(&fit.factors, dynamics, &fit.loading_of(unit), horizon))
}

/// Point forecast from an explicit factor matrix, used when the dynamics
/// were fitted to something other than the model's stored factors (for
/// example detrended residuals).
pub fn forecast_from(
    factors: &DMatrix<f64>,
    dynamics: &VarDynamics,
    loading: &DVector<f64>,
    horizon: usize,
) -> f64 {
    let predicted = predict_factor(factors, dynamics, horizon);
    loading.dot(&predicted)
}

/// Spectral norms of successive matrix powers `||A^1||, .., ||A^n_max||`.
pub fn matrix_power_norms(a: &DMatrix<f64>, n_max: usize) -> Vec<f64> {
    let mut norms = Vec::with_capacity(n_max);
    let mut power = a.clone();
    for n in 1..=n_max {
        norms.push(spectral_norm(&power));
        if n < n_max {
            power = &power * a;
        }
    }
    norms
}

/// Least-squares map sending factor rows at `source_slots` to the rows at
/// `target_slots`: regresses targets on sources across the slot pairs.
pub fn fit_cross_slot_map(
    factors: &DMatrix<f64>,
    source_slots: &[usize],
    target_slots: &[usize],
) -> Result<DMatrix<f64>> {
    let t = factors.nrows();
    let r = factors.ncols();
    if source_slots.len() != target_slots.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} target slots", source_slots.len()),
            actual: format!("{}", target_slots.len()),
        });
    }
    let k = source_slots.len();
    if k < r + 1 {
        return Err(Error::TooShort(format!(
            "need at least r + 1 = {} slot pairs, got {k}",
            r + 1
        )));
    }
    for &s in source_slots.iter().chain(target_slots.iter()) {
        if s >= t {
            return Err(Error::InvalidInput(format!(
                "slot index {s} out of range for T = {t}"
            )));
        }
    }
    let mut x = DMatrix::zeros(k, r);
    let mut y = DMatrix::zeros(k, r);
    for (row, (&s, &u)) in source_slots.iter().zip(target_slots.iter()).enumerate() {
        x.row_mut(row).copy_from(&factors.row(s));
        y.row_mut(row).copy_from(&factors.row(u));
    }
    let gram = x.transpose() * &x;
    let cond = condition_number(&gram);
    if cond > GRAM_COND_MAX {
        return Err(Error::SingularGram { cond });
    }
    let rhs = x.transpose() * &y;
    let solved = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or(Error::SingularGram { cond })?,
    };
    Ok(solved.transpose())
}

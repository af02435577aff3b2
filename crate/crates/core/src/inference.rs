//! Asymptotic variance estimation and confidence intervals for the
//! point forecasts.
//!
//! The forecast error has two asymptotically independent sources: factor
//! and loading estimation from the partially observed panel (`xi^2`) and
//! coefficient estimation in the factor dynamics (`tau^2`). Both are
//! evaluated by plugging estimated pieces into the population formulas;
//! the one-factor closed forms double as an independent oracle for the
//! general evaluation. Inference is restricted to first-order dynamics.
//!
//! The normalization convention: with `delta^2 = min(N, T)`, the interval
//! half-width is `z * sigma_hat / delta`.

use std::io::Write as IoWrite;

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{self, ForecastResult, VarDynamics};
use crate::error::{Error, Result};
use crate::factors::FactorModelFit;
use crate::linalg::matrix_power;
use crate::panel::{OverlapStats, Panel};
use crate::stats::normal_quantile;

/// Normalized fourth moment `E[(L^2/var(L) - 1)^2]` of a Gaussian
/// loading, used by the one-factor closed forms.
const GAUSSIAN_LOADING_KURTOSIS: f64 = 2.0;

/// Options for the plug-in variance estimation.
#[derive(Debug, Clone, Default)]
pub struct VarianceOptions {
    /// Bartlett-kernel long-run correction of the time-indexed residual
    /// moment entering the loading-side variance. Off by default; the
    /// bandwidth is `floor(4 (T/100)^{2/9})`.
    pub hac: bool,
}

/// Estimated inputs to the variance formulas for one unit, together with
/// the derived covariance blocks.
#[derive(Debug, Clone)]
pub struct VariancePieces {
    /// Idiosyncratic noise variance, pooled over observed entries.
    pub sigma_eps_sq: f64,
    /// Loading second moment, `r x r`.
    pub sigma_lambda: DMatrix<f64>,
    /// Factor second moment, `r x r`.
    pub sigma_f: DMatrix<f64>,
    /// Factor second moment over the unit's observed times, `r x r`.
    pub sigma_f_i: DMatrix<f64>,
    /// Innovation covariance of the fitted dynamics, `r x r`.
    pub sigma_eta: DMatrix<f64>,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    /// Fourth-moment matrix of `vec(L L' - sigma_lambda)`, `r^2 x r^2`.
    pub v_lambda: DMatrix<f64>,
    /// Noise-driven factor-side block.
    pub sigma_f_obs: DMatrix<f64>,
    /// Missingness-driven factor-side block at the final time.
    pub sigma_f_t_miss: DMatrix<f64>,
    /// Noise-driven loading-side block for the unit.
    pub sigma_lambda_i_obs: DMatrix<f64>,
    /// Missingness-driven loading-side block for the unit.
    pub sigma_lambda_i_miss: DMatrix<f64>,
    /// Cross block between the two missingness-driven terms.
    pub sigma_f_lambda_miss_cov: DMatrix<f64>,
}

/// Variance decomposition for one unit and horizon.
#[derive(Debug, Clone)]
pub struct VarianceComponents {
    pub xi_sq: f64,
    pub tau_sq: f64,
    pub sigma_sq: f64,
    pub pieces: VariancePieces,
}

/// True parameters of a one-factor model with autoregressive factor.
#[derive(Debug, Clone, Copy)]
pub struct OneFactorParams {
    pub phi: f64,
    pub sigma_eta: f64,
    pub sigma_f: f64,
    pub sigma_lambda: f64,
    pub sigma_eps: f64,
}

impl OneFactorParams {
    /// Stationary parameterization: the factor variance is derived from
    /// the innovation variance as `sigma_eta^2 / (1 - phi^2)`.
    pub fn stationary(phi: f64, sigma_eta: f64, sigma_lambda: f64, sigma_eps: f64) -> Result<Self> {
        if phi.abs() >= 1.0 {
            return Err(Error::InvalidInput(format!(
                "autoregressive coefficient must satisfy |phi| < 1, got {phi}"
            )));
        }
        Ok(Self {
            phi,
            sigma_eta,
            sigma_f: sigma_eta / (1.0 - phi * phi).sqrt(),
            sigma_lambda,
            sigma_eps,
        })
    }
}

/// Observation design for the one-factor closed forms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OneFactorPattern {
    Mcar { p: f64 },
    Staggered,
}

impl VariancePieces {
    /// Builds the derived covariance blocks from the primitive pieces.
    ///
    /// `sigma_lambda_i_obs_override` substitutes a long-run (HAC)
    /// estimate for the loading-side noise block when present.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        sigma_eps_sq: f64,
        sigma_lambda: DMatrix<f64>,
        sigma_f: DMatrix<f64>,
        sigma_f_i: DMatrix<f64>,
        sigma_eta: DMatrix<f64>,
        v_lambda: DMatrix<f64>,
        omega: (f64, f64, f64),
        f_t: &DVector<f64>,
        lambda_i: &DVector<f64>,
        sigma_lambda_i_obs_override: Option<DMatrix<f64>>,
    ) -> Result<Self> {
        let r = sigma_lambda.nrows();
        let inv = |m: &DMatrix<f64>, name: &str| -> Result<DMatrix<f64>> {
            m.clone().try_inverse().ok_or_else(|| {
                Error::InvalidInput(format!("{name} is singular in variance assembly"))
            })
        };
        let sigma_lambda_inv = inv(&sigma_lambda, "loading second moment")?;
        let sigma_f_inv = inv(&sigma_f, "factor second moment")?;
        let sigma_f_i_inv = inv(&sigma_f_i, "observed-time factor moment")?;

        let sigma_f_obs = &sigma_lambda_inv * sigma_eps_sq;
        let f_t_mat = DMatrix::from_column_slice(r, 1, f_t.as_slice());
        let lam_mat = DMatrix::from_column_slice(r, 1, lambda_i.as_slice());
        let psi = f_t_mat.kronecker(&sigma_f) * (&sigma_f_inv * &sigma_lambda_inv);
        let upsilon = sigma_f_i.kronecker(&(&sigma_lambda_inv * &lam_mat)) * &sigma_f_i_inv;
        let sigma_f_t_miss = psi.transpose() * &v_lambda * &psi;
        let sigma_lambda_i_miss = upsilon.transpose() * &v_lambda * &upsilon;
        let sigma_f_lambda_miss_cov = psi.transpose() * &v_lambda * &upsilon;
        let sigma_lambda_i_obs = match sigma_lambda_i_obs_override {
            Some(block) => block,
            None => &sigma_f_i_inv * sigma_eps_sq,
        };
        Ok(Self {
            sigma_eps_sq,
            sigma_lambda,
            sigma_f,
            sigma_f_i,
            sigma_eta,
            omega1: omega.0,
            omega2: omega.1,
            omega3: omega.2,
            v_lambda,
            sigma_f_obs,
            sigma_f_t_miss,
            sigma_lambda_i_obs,
            sigma_lambda_i_miss,
            sigma_f_lambda_miss_cov,
        })
    }

    /// One row per named piece, values flattened row-major.
    pub fn write_diagnostic_csv<W: IoWrite>(&self, mut out: W) -> Result<()> {
        writeln!(out, "piece,rows,cols,values")?;
        let scalar = |name: &str, v: f64| format!("{name},1,1,{v}");
        writeln!(out, "{}", scalar("sigma_eps_sq", self.sigma_eps_sq))?;
        writeln!(out, "{}", scalar("omega1", self.omega1))?;
        writeln!(out, "{}", scalar("omega2", self.omega2))?;
        writeln!(out, "{}", scalar("omega3", self.omega3))?;
        let mut matrix = |name: &str, m: &DMatrix<f64>| -> std::io::Result<()> {
            let values: Vec<String> = m
                .row_iter()
                .flat_map(|row| row.iter().map(|v| format!("{v}")).collect::<Vec<_>>())
                .collect();
            writeln!(out, "{name},{},{},{}", m.nrows(), m.ncols(), values.join(";"))
        };
        matrix("sigma_lambda", &self.sigma_lambda)?;
        matrix("sigma_f", &self.sigma_f)?;
        matrix("sigma_f_i", &self.sigma_f_i)?;
        matrix("sigma_eta", &self.sigma_eta)?;
        matrix("v_lambda", &self.v_lambda)?;
        matrix("sigma_f_obs", &self.sigma_f_obs)?;
        matrix("sigma_f_t_miss", &self.sigma_f_t_miss)?;
        matrix("sigma_lambda_i_obs", &self.sigma_lambda_i_obs)?;
        matrix("sigma_lambda_i_miss", &self.sigma_lambda_i_miss)?;
        matrix("sigma_f_lambda_miss_cov", &self.sigma_f_lambda_miss_cov)?;
        Ok(())
    }
}

/// Bartlett long-run covariance of a vector series with the plug-in
/// bandwidth `floor(4 (T/100)^{2/9})`.
fn bartlett_long_run(series: &[DVector<f64>]) -> DMatrix<f64> {
    let t = series.len();
    let r = series[0].len();
    let bandwidth = (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize;
    let mut total = DMatrix::zeros(r, r);
    for s in series {
        total += s * s.transpose();
    }
    total /= t as f64;
    for k in 1..=bandwidth.min(t.saturating_sub(1)) {
        let w = 1.0 - k as f64 / (bandwidth + 1) as f64;
        let mut gamma = DMatrix::zeros(r, r);
        for idx in k..t {
            gamma += &series[idx] * series[idx - k].transpose();
        }
        gamma /= t as f64;
        total += (&gamma + gamma.transpose()) * w;
    }
    total
}

/// Estimates every piece of the asymptotic variance for one unit.
///
/// The noise variance pools squared residuals over the observed entries
/// of every unit with a valid loading fit; the loading moments average
/// over the same units. Requires first-order dynamics.
pub fn estimate_variance_pieces(
    panel: &Panel,
    fit: &FactorModelFit,
    dynamics: &VarDynamics,
    stats: &OverlapStats,
    unit: usize,
    opts: &VarianceOptions,
) -> Result<VariancePieces> {
    if dynamics.order != 1 {
        return Err(Error::UnsupportedOrder {
            order: dynamics.order,
        });
    }
    if unit >= panel.n_units() {
        return Err(Error::InvalidInput(format!(
            "unit {unit} out of range for {} units",
            panel.n_units()
        )));
    }
    if !fit.loading_ok[unit] {
        return Err(Error::DegenerateUnit { unit });
    }
    let n = panel.n_units();
    let t = panel.n_times();
    let r = fit.rank;

    let mut resid_sq_sum = 0.0;
    let mut resid_count = 0usize;
    for i in 0..n {
        if !fit.loading_ok[i] {
            continue;
        }
        for s in 0..t {
            if panel.observed(i, s) {
                let e = panel.values()[(i, s)] - fit.common_component(i, s);
                resid_sq_sum += e * e;
                resid_count += 1;
            }
        }
    }
    if resid_count == 0 {
        return Err(Error::InvalidInput("no observed entries".into()));
    }
    let sigma_eps_sq = resid_sq_sum / resid_count as f64;

    let ok_units: Vec<usize> = (0..n).filter(|&i| fit.loading_ok[i]).collect();
    let n_ok = ok_units.len() as f64;
    let mut sigma_lambda = DMatrix::zeros(r, r);
    for &i in &ok_units {
        let lam = fit.loading_of(i);
        sigma_lambda += &lam * lam.transpose();
    }
    sigma_lambda /= n_ok;
    let mut v_lambda = DMatrix::zeros(r * r, r * r);
    for &i in &ok_units {
        let lam = fit.loading_of(i);
        let centered = &lam * lam.transpose() - &sigma_lambda;
        let vec = DVector::from_iterator(r * r, centered.iter().copied());
        v_lambda += &vec * vec.transpose();
    }
    v_lambda /= n_ok;

    let sigma_f = fit.factors.transpose() * &fit.factors / t as f64;
    let mut sigma_f_i = DMatrix::zeros(r, r);
    for s in 0..t {
        if panel.observed(unit, s) {
            let f = fit.factor_at(s);
            sigma_f_i += &f * f.transpose();
        }
    }
    sigma_f_i /= t as f64;

    let hac_override = if opts.hac {
        let scores: Vec<DVector<f64>> = (0..t)
            .map(|s| {
                if panel.observed(unit, s) {
                    let e = panel.values()[(unit, s)] - fit.common_component(unit, s);
                    fit.factor_at(s) * e
                } else {
                    DVector::zeros(r)
                }
            })
            .collect();
        let phi = bartlett_long_run(&scores);
        let sigma_f_i_inv = sigma_f_i
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::InvalidInput("observed-time factor moment singular".into()))?;
        Some(&sigma_f_i_inv * &phi * &sigma_f_i_inv)
    } else {
        None
    };

    VariancePieces::assemble(
        sigma_eps_sq,
        sigma_lambda,
        sigma_f,
        sigma_f_i,
        dynamics.innovation_cov.clone(),
        v_lambda,
        (stats.omega1, stats.omega2, stats.omega3),
        &fit.factor_at(t - 1),
        &fit.loading_of(unit),
        hac_override,
    )
}

/// Factor-estimation variance component at horizon `h`.
pub fn xi_squared(
    pieces: &VariancePieces,
    horizon: usize,
    f_t: &DVector<f64>,
    lambda_i: &DVector<f64>,
    a: &DMatrix<f64>,
    n: usize,
    t: usize,
) -> f64 {
    let delta_sq = n.min(t) as f64;
    let ah = matrix_power(a, horizon);
    let aht = ah.transpose();
    let factor_block = &pieces.sigma_f_obs * pieces.omega1
        + &pieces.sigma_f_t_miss * (pieces.omega1 - 1.0);
    let term_factor = (lambda_i.transpose() * &ah * factor_block * &aht * lambda_i)[(0, 0)];
    let term_cross = -2.0
        * (pieces.omega2 - 1.0)
        * (f_t.transpose() * &aht * &pieces.sigma_f_lambda_miss_cov * &aht * lambda_i)[(0, 0)];
    let term_loading_miss = (pieces.omega3 - 1.0)
        * (f_t.transpose() * &aht * &pieces.sigma_lambda_i_miss * &ah * f_t)[(0, 0)];
    let term_loading_obs =
        (f_t.transpose() * &aht * &pieces.sigma_lambda_i_obs * &ah * f_t)[(0, 0)];
    delta_sq / n as f64 * (term_factor + term_cross + term_loading_miss)
        + delta_sq / t as f64 * term_loading_obs
}

/// Forecasting variance component at horizon `h`: the double sum over
/// `k, l < h` of dynamics-coefficient uncertainty propagated through the
/// loading and final factor.
pub fn tau_squared(
    pieces: &VariancePieces,
    horizon: usize,
    f_t: &DVector<f64>,
    lambda_i: &DVector<f64>,
    a: &DMatrix<f64>,
    n: usize,
    t: usize,
) -> f64 {
    let delta_sq = n.min(t) as f64;
    let sigma_f_inv = pieces
        .sigma_f
        .clone()
        .try_inverse()
        .expect("factor second moment invertible");
    let powers: Vec<DMatrix<f64>> = (0..horizon).map(|k| matrix_power(a, k)).collect();
    let mut total = 0.0;
    for k in 0..horizon {
        for l in 0..horizon {
            let left = (lambda_i.transpose()
                * powers[horizon - 1 - k].transpose()
                * &sigma_f_inv
                * &powers[horizon - 1 - l]
                * lambda_i)[(0, 0)];
            let right = (f_t.transpose()
                * &powers[k]
                * &pieces.sigma_eta
                * powers[l].transpose()
                * f_t)[(0, 0)];
            total += left * right;
        }
    }
    delta_sq / t as f64 * total
}

/// Full variance decomposition for one unit and horizon.
pub fn variance_components(
    pieces: VariancePieces,
    horizon: usize,
    f_t: &DVector<f64>,
    lambda_i: &DVector<f64>,
    a: &DMatrix<f64>,
    n: usize,
    t: usize,
) -> VarianceComponents {
    let xi_sq = xi_squared(&pieces, horizon, f_t, lambda_i, a, n, t);
    let tau_sq = tau_squared(&pieces, horizon, f_t, lambda_i, a, n, t);
    VarianceComponents {
        xi_sq,
        tau_sq,
        sigma_sq: (xi_sq + tau_sq).max(0.0),
        pieces,
    }
}

/// Closed-form variance components of the one-factor model under the
/// two benchmark observation designs. Loadings are taken Gaussian, so
/// the normalized fourth moment in the missingness term is 2.
///
/// Serves as the independent oracle for [`xi_squared`] and
/// [`tau_squared`].
#[allow(clippy::too_many_arguments)]
pub fn one_factor_variance(
    params: &OneFactorParams,
    pattern: OneFactorPattern,
    unit_loading: f64,
    f_t: f64,
    n: usize,
    t: usize,
    horizon: usize,
) -> (f64, f64) {
    let delta_sq = n.min(t) as f64;
    let phi2h = params.phi.powi(2 * horizon as i32);
    let lam_sq = unit_loading * unit_loading;
    let f_sq = f_t * f_t;
    let sig_lam_sq = params.sigma_lambda * params.sigma_lambda;
    let sig_f_sq = params.sigma_f * params.sigma_f;
    let sig_eps_sq = params.sigma_eps * params.sigma_eps;
    let common = delta_sq
        * phi2h
        * sig_eps_sq
        * (lam_sq / (n as f64 * sig_lam_sq) + f_sq / (t as f64 * sig_f_sq));
    let xi_sq = match pattern {
        OneFactorPattern::Staggered => common,
        OneFactorPattern::Mcar { p } => {
            common / p
                + delta_sq * phi2h * (lam_sq * f_sq / n as f64) * (1.0 / p - 1.0)
                    * GAUSSIAN_LOADING_KURTOSIS
        }
    };
    // Scalar reduction of the double sum; phi^(2h-2) follows the 0^0 = 1
    // convention at h = 1.
    let tau_sq = delta_sq / t as f64
        * (horizon * horizon) as f64
        * params.phi.powi(2 * horizon as i32 - 2)
        * (params.sigma_eta * params.sigma_eta / sig_f_sq)
        * lam_sq
        * f_sq;
    (xi_sq, tau_sq)
}

/// Two-sided interval `point -+ z_{1-alpha/2} sqrt(sigma_sq) / delta_NT`.
pub fn confidence_interval(
    point: f64,
    sigma_sq: f64,
    n: usize,
    t: usize,
    alpha: f64,
) -> Result<(f64, f64)> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!(
            "significance level must be in (0, 1), got {alpha}"
        )));
    }
    if sigma_sq < 0.0 {
        return Err(Error::InvalidInput(format!(
            "variance must be nonnegative, got {sigma_sq}"
        )));
    }
    let delta = (n.min(t) as f64).sqrt();
    let z = normal_quantile(1.0 - alpha / 2.0);
    let half = z * sigma_sq.sqrt() / delta;
    Ok((point - half, point + half))
}

/// Point forecast with its plug-in interval for one unit and horizon.
#[allow(clippy::too_many_arguments)]
pub fn forecast_with_interval(
    panel: &Panel,
    fit: &FactorModelFit,
    dynamics: &VarDynamics,
    stats: &OverlapStats,
    unit: usize,
    horizon: usize,
    alpha: f64,
    opts: &VarianceOptions,
) -> Result<ForecastResult> {
    let point = dynamics::forecast(fit, dynamics, unit, horizon)?;
    let pieces = estimate_variance_pieces(panel, fit, dynamics, stats, unit, opts)?;
    let n = panel.n_units();
    let t = panel.n_times();
    let f_t = fit.factor_at(t - 1);
    let lambda_i = fit.loading_of(unit);
    let comps = variance_components(pieces, horizon, &f_t, &lambda_i, &dynamics.coef[0], n, t);
    let delta = (n.min(t) as f64).sqrt();
    let (lower, upper) = confidence_interval(point, comps.sigma_sq, n, t, alpha)?;
    Ok(ForecastResult {
        unit,
        horizon,
        point,
        std_error: comps.sigma_sq.sqrt() / delta,
        ci_lower: lower,
        ci_upper: upper,
        delta_nt: delta,
    })
}

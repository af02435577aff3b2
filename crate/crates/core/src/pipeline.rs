//! End-to-end forecasting pipeline: factor fit, optional detrending,
//! dynamics, and per-unit forecasts with intervals where the theory
//! applies.

use nalgebra::DVector;

use crate::detrend::{detrend_factors, DetrendResult};
use crate::dynamics::{self, fit_var, select_order, VarDynamics};
use crate::error::Result;
use crate::factors::{fit_factor_model, FactorModelFit, RankMethod};
use crate::inference::{
    confidence_interval, estimate_variance_pieces, variance_components, VarianceOptions,
};
use crate::panel::{build_overlap_index, compute_overlap_stats, Panel};

/// How to pick the lag order of the factor dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarOrder {
    Fixed(usize),
    /// Akaike selection over `1..=max_order`.
    Aic { max_order: usize },
}

/// Pipeline configuration.
#[derive(Debug, Clone)]
pub struct PipelineOptions {
    pub rank: RankMethod,
    pub transpose: bool,
    pub detrend: bool,
    pub order: VarOrder,
    /// Two-sided significance level for the intervals.
    pub alpha: f64,
    /// Compute confidence intervals. Intervals require first-order
    /// dynamics and no detrending; outside that regime forecasts carry
    /// empty interval fields.
    pub intervals: bool,
    pub variance: VarianceOptions,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            rank: RankMethod::Fixed(1),
            transpose: false,
            detrend: false,
            order: VarOrder::Aic { max_order: 5 },
            alpha: 0.05,
            intervals: true,
            variance: VarianceOptions::default(),
        }
    }
}

/// One forecast row. Degenerate units carry no point or interval and are
/// flagged instead.
#[derive(Debug, Clone)]
pub struct ForecastRow {
    pub unit: usize,
    pub horizon: usize,
    pub point: Option<f64>,
    pub std_error: Option<f64>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub degenerate: bool,
    /// Fitted dynamics had spectral radius at or above one.
    pub unstable: bool,
}

/// Everything the pipeline produced.
#[derive(Debug)]
pub struct PipelineOutput {
    pub fit: FactorModelFit,
    pub dynamics: VarDynamics,
    pub detrend: Option<DetrendResult>,
    pub forecasts: Vec<ForecastRow>,
}

/// Runs the pipeline on a panel for the given horizons.
pub fn run_pipeline(
    panel: &Panel,
    horizons: &[usize],
    opts: &PipelineOptions,
) -> Result<PipelineOutput> {
    let fit = fit_factor_model(panel, opts.rank, opts.transpose)?;
    let detrend = if opts.detrend {
        Some(detrend_factors(&fit.factors)?)
    } else {
        None
    };
    let dyn_input = match &detrend {
        Some(d) => d.residual.clone(),
        None => fit.factors.clone(),
    };
    let order = match opts.order {
        VarOrder::Fixed(p) => p,
        VarOrder::Aic { max_order } => select_order(&dyn_input, max_order)?,
    };
    let dynamics = fit_var(&dyn_input, order)?;
    let unstable = !dynamics.is_stable();

    let with_intervals = opts.intervals && order == 1 && detrend.is_none();
    let stats = if with_intervals {
        let index = build_overlap_index(panel);
        Some(compute_overlap_stats(panel, &index)?)
    } else {
        None
    };

    let n = panel.n_units();
    let t = panel.n_times();
    let mut forecasts = Vec::with_capacity(n * horizons.len());
    for unit in 0..n {
        if !fit.loading_ok[unit] {
            for &h in horizons {
                forecasts.push(ForecastRow {
                    unit,
                    horizon: h,
                    point: None,
                    std_error: None,
                    ci_lower: None,
                    ci_upper: None,
                    degenerate: true,
                    unstable,
                });
            }
            continue;
        }
        let pieces = match &stats {
            Some(stats) => Some(estimate_variance_pieces(
                panel,
                &fit,
                &dynamics,
                stats,
                unit,
                &opts.variance,
            )?),
            None => None,
        };
        for &h in horizons {
            let lam = fit.loading_of(unit);
            let stochastic = dynamics::forecast_from(&dyn_input, &dynamics, &lam, h);
            let point = match &detrend {
                Some(d) => {
                    // Add back the extrapolated deterministic part of
                    // every factor column.
                    let trend_part: f64 = (0..fit.rank)
                        .map(|j| lam[j] * d.fits[j].extrapolate(h))
                        .sum();
                    stochastic + trend_part
                }
                None => stochastic,
            };
            let row = match &pieces {
                Some(pieces) => {
                    let f_t = fit.factor_at(t - 1);
                    let comps = variance_components(
                        pieces.clone(),
                        h,
                        &f_t,
                        &lam,
                        &dynamics.coef[0],
                        n,
                        t,
                    );
                    let (lo, hi) = confidence_interval(point, comps.sigma_sq, n, t, opts.alpha)?;
                    let delta = (n.min(t) as f64).sqrt();
                    ForecastRow {
                        unit,
                        horizon: h,
                        point: Some(point),
                        std_error: Some(comps.sigma_sq.sqrt() / delta),
                        ci_lower: Some(lo),
                        ci_upper: Some(hi),
                        degenerate: false,
                        unstable,
                    }
                }
                None => ForecastRow {
                    unit,
                    horizon: h,
                    point: Some(point),
                    std_error: None,
                    ci_lower: None,
                    ci_upper: None,
                    degenerate: false,
                    unstable,
                },
            };
            forecasts.push(row);
        }
    }
    Ok(PipelineOutput {
        fit,
        dynamics,
        detrend,
        forecasts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn ar1_panel(n: usize, t: usize, seed: u64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.5).unwrap();
        let lam_dist = Normal::new(0.0, 0.5).unwrap();
        let noise = Normal::new(0.0, 0.1).unwrap();
        let lam = DVector::from_fn(n, |_, _| lam_dist.sample(&mut rng));
        let mut f = 0.0;
        for _ in 0..200 {
            f = 0.5 * f + normal.sample(&mut rng);
        }
        let fac = DVector::from_fn(t, |_, _| {
            f = 0.5 * f + normal.sample(&mut rng);
            f
        });
        let y = &lam * fac.transpose() + DMatrix::from_fn(n, t, |_, _| noise.sample(&mut rng));
        Panel::fully_observed(y).unwrap()
    }

    #[test]
    fn pipeline_produces_rows_with_intervals() {
        let panel = ar1_panel(20, 80, 1);
        let opts = PipelineOptions {
            order: VarOrder::Fixed(1),
            ..PipelineOptions::default()
        };
        let out = run_pipeline(&panel, &[1, 2, 3], &opts).unwrap();
        assert_eq!(out.forecasts.len(), 60);
        for row in &out.forecasts {
            assert!(!row.degenerate);
            let (lo, hi, point) = (
                row.ci_lower.unwrap(),
                row.ci_upper.unwrap(),
                row.point.unwrap(),
            );
            assert!(lo <= point && point <= hi);
            // Interval symmetric about the point.
            assert!(((point - lo) - (hi - point)).abs() < 1e-12);
        }
    }

    #[test]
    fn detrended_pipeline_skips_intervals() {
        let panel = ar1_panel(20, 100, 2);
        let opts = PipelineOptions {
            detrend: true,
            order: VarOrder::Fixed(1),
            ..PipelineOptions::default()
        };
        let out = run_pipeline(&panel, &[1], &opts).unwrap();
        assert!(out.detrend.is_some());
        assert!(out.forecasts.iter().all(|r| r.ci_lower.is_none()));
        assert!(out.forecasts.iter().all(|r| r.point.is_some()));
    }

    #[test]
    fn tighter_alpha_gives_wider_intervals_rowwise() {
        let panel = ar1_panel(24, 64, 3);
        let mut opts = PipelineOptions {
            order: VarOrder::Fixed(1),
            ..PipelineOptions::default()
        };
        opts.alpha = 0.05;
        let out05 = run_pipeline(&panel, &[1, 2], &opts).unwrap();
        opts.alpha = 0.10;
        let out10 = run_pipeline(&panel, &[1, 2], &opts).unwrap();
        for (a, b) in out05.forecasts.iter().zip(out10.forecasts.iter()) {
            let (lo05, hi05) = (a.ci_lower.unwrap(), a.ci_upper.unwrap());
            let (lo10, hi10) = (b.ci_lower.unwrap(), b.ci_upper.unwrap());
            assert!(lo05 <= lo10 && hi10 <= hi05);
        }
    }
}

//! Sample and closed-form CRPS, pinball loss, and ensemble evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::sampler::ForecastEnsemble;

pub const DEFAULT_QUANTILES: [f64; 2] = [0.5, 0.9];
pub const HORIZON_STEPS: [usize; 3] = [3, 6, 12];

const FRAC_1_SQRT_PI: f64 = 0.564_189_583_547_756_3;

/// `mean|X - y| - ½ mean|X - X'|` over all ordered sample pairs.
pub fn crps_samples(samples: &[f64], y: f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::InvalidParameter(format!(
            "CRPS needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if !y.is_finite() || samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("CRPS inputs".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    Ok(crps_sorted(&x, y))
}

fn crps_sorted(x: &[f64], y: f64) -> f64 {
    let s = x.len() as f64;
    let mut abs_err = 0.0;
    let mut spread = 0.0;
    // the pair weights sum to zero, so centring on the minimum changes
    // nothing except making a point mass score exactly zero
    let x0 = x[0];
    for (i, v) in x.iter().enumerate() {
        abs_err += (v - y).abs();
        spread += (2.0 * i as f64 - s + 1.0) * (v - x0);
    }
    (abs_err / s - spread / (s * s)).max(0.0)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form CRPS of `N(mu, sigma²)` at `y`.
pub fn crps_gaussian(mu: f64, sigma: f64, y: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    let z = (y - mu) / sigma;
    Ok(sigma * (z * (2.0 * normal_cdf(z) - 1.0) + 2.0 * normal_pdf(z) - FRAC_1_SQRT_PI))
}

/// `max(q (y - ŷ), (q - 1)(y - ŷ))`.
pub fn pinball(y: f64, y_hat: f64, q: f64) -> f64 {
    let e = y - y_hat;
    (q * e).max((q - 1.0) * e)
}

/// Empirical quantile of sorted samples, linear between order statistics.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(samples: &[f64], q: f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("quantile of no samples".into()));
    }
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&x, q))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub step: usize,
    pub crps_mean: f64,
    pub crps_sum: f64,
    pub mae: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub crps_mean: f64,
    pub crps_sum: f64,
    pub mae: f64,
    /// Normalised pinball loss keyed by quantile level (`"0.5"`, `"0.9"`).
    pub ql: BTreeMap<String, f64>,
    pub horizons: Vec<HorizonReport>,
    pub cells: usize,
    pub forecasts: usize,
}

impl EvalReport {
    pub fn is_finite(&self) -> bool {
        self.crps_mean.is_finite()
            && self.crps_sum.is_finite()
            && self.mae.is_finite()
            && self.ql.values().all(|v| v.is_finite())
            && self
                .horizons
                .iter()
                .all(|h| h.crps_mean.is_finite() && h.crps_sum.is_finite() && h.mae.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>12}", "metric", "value");
        let _ = writeln!(s, "{:<12} {:>12.6}", "CRPS_sum", self.crps_sum);
        let _ = writeln!(s, "{:<12} {:>12.6}", "CRPS_mean", self.crps_mean);
        let _ = writeln!(s, "{:<12} {:>12.6}", "MAE", self.mae);
        for (q, v) in &self.ql {
            let _ = writeln!(s, "{:<12} {:>12.6}", format!("QL{q}"), v);
        }
        for h in &self.horizons {
            let _ = writeln!(
                s,
                "{:<12} {:>12.6}  (CRPS_mean {:.6}, MAE {:.6})",
                format!("step {}", h.step),
                h.crps_sum,
                h.crps_mean,
                h.mae
            );
        }
        s
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct CellSums {
    crps: f64,
    abs_y: f64,
    abs_err: f64,
}

/// Pools several forecasts (e.g. rolling origins) into one report.
#[derive(Debug, Clone)]
pub struct Evaluator {
    quantiles: Vec<f64>,
    horizon: Option<usize>,
    per_step: Vec<CellSums>,
    pinball: Vec<f64>,
    cells: usize,
    forecasts: usize,
}

impl Evaluator {
    pub fn new(quantiles: &[f64]) -> Result<Self> {
        if quantiles.iter().any(|q| !(0.0..=1.0).contains(q)) {
            return Err(Error::InvalidParameter("quantile levels must lie in [0, 1]".into()));
        }
        Ok(Self {
            quantiles: quantiles.to_vec(),
            horizon: None,
            per_step: Vec::new(),
            pinball: vec![0.0; quantiles.len()],
            cells: 0,
            forecasts: 0,
        })
    }

    pub fn add(&mut self, ensemble: &ForecastEnsemble, actuals: &DMatrix<f64>) -> Result<()> {
        let (q_len, n) = (ensemble.horizon(), ensemble.nodes());
        if actuals.nrows() != q_len || actuals.ncols() != n {
            return Err(Error::ShapeMismatch(format!(
                "actuals are {}x{}, ensemble is {q_len}x{n}",
                actuals.nrows(),
                actuals.ncols()
            )));
        }
        if let Some(h) = self.horizon {
            if h != q_len {
                return Err(Error::ShapeMismatch(format!(
                    "horizon {q_len} differs from earlier forecasts ({h})"
                )));
            }
        }
        if actuals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("actuals".into()));
        }
        self.horizon = Some(q_len);
        if self.per_step.is_empty() {
            self.per_step = vec![CellSums::default(); q_len];
        }
        let quantiles = &self.quantiles;
        let cells: Vec<(usize, CellSums, Vec<f64>)> = (0..q_len * n)
            .into_par_iter()
            .map(|k| {
                let (q, i) = (k / n, k % n);
                let mut x = ensemble.cell(q, i);
                x.sort_by(f64::total_cmp);
                let y = actuals[(q, i)];
                let mean = x.iter().sum::<f64>() / x.len() as f64;
                let crps = if x.len() >= 2 { crps_sorted(&x, y) } else { (x[0] - y).abs() };
                let pin = quantiles
                    .iter()
                    .map(|&lvl| pinball(y, quantile_sorted(&x, lvl), lvl))
                    .collect();
                (
                    q,
                    CellSums {
                        crps,
                        abs_y: y.abs(),
                        abs_err: (mean - y).abs(),
                    },
                    pin,
                )
            })
            .collect();
        for (q, c, pin) in cells {
            let acc = &mut self.per_step[q];
            acc.crps += c.crps;
            acc.abs_y += c.abs_y;
            acc.abs_err += c.abs_err;
            for (t, p) in self.pinball.iter_mut().zip(pin) {
                *t += p;
            }
        }
        self.cells += q_len * n;
        self.forecasts += 1;
        Ok(())
    }

    pub fn report(&self) -> Result<EvalReport> {
        let q_len = self.horizon.ok_or(Error::EmptyBatch)?;
        let n_per_step = self.cells / q_len;
        let total = self.per_step.iter().fold(CellSums::default(), |a, c| CellSums {
            crps: a.crps + c.crps,
            abs_y: a.abs_y + c.abs_y,
            abs_err: a.abs_err + c.abs_err,
        });
        let normalise = |v: f64, denom: f64| if denom > 0.0 { v / denom } else { v };
        let ql = self
            .quantiles
            .iter()
            .zip(&self.pinball)
            .map(|(q, p)| (format!("{q}"), normalise(*p, total.abs_y)))
            .collect();
        let horizons = HORIZON_STEPS
            .iter()
            .filter(|&&s| s <= q_len)
            .map(|&s| {
                let c = self.per_step[s - 1];
                HorizonReport {
                    step: s,
                    crps_mean: c.crps / n_per_step as f64,
                    crps_sum: normalise(c.crps, c.abs_y),
                    mae: c.abs_err / n_per_step as f64,
                }
            })
            .collect();
        let report = EvalReport {
            crps_mean: total.crps / self.cells as f64,
            crps_sum: normalise(total.crps, total.abs_y),
            mae: total.abs_err / self.cells as f64,
            ql,
            horizons,
            cells: self.cells,
            forecasts: self.forecasts,
        };
        if !report.is_finite() {
            return Err(Error::NonFinite("evaluation metrics".into()));
        }
        Ok(report)
    }
}

/// Scores one ensemble against its `Q x N` actuals.
pub fn evaluate(ensemble: &ForecastEnsemble, actuals: &DMatrix<f64>) -> Result<EvalReport> {
    let mut ev = Evaluator::new(&DEFAULT_QUANTILES)?;
    ev.add(ensemble, actuals)?;
    ev.report()
}

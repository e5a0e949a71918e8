//! Conditional next-step sampling with node-wise volatility scaling and
//! multi-step rollout into sample ensembles.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{assemble, conditional_next_step, mixture_correlation};
use crate::dataio::GraphSnapshots;
use crate::error::{Error, Result};
use crate::forecaster::{
    heads, encode, spatial_covariance, CovarianceHead, CurvatureCache, HeadOutput, ModelParams,
};
use crate::linalg::chol_lower;
use crate::rngs::indexed_substream;

pub const DEFAULT_RHO: f64 = 0.94;

/// EWMA of squared one-step residuals per node.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityTracker {
    s2: DVector<f64>,
    rho: f64,
}

impl VolatilityTracker {
    pub fn new(s2: DVector<f64>, rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidParameter(format!("decay {rho} outside [0, 1)")));
        }
        if s2.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidParameter(
                "volatility estimates must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { s2, rho })
    }

    pub fn s2(&self) -> &DVector<f64> {
        &self.s2
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn scale(&self) -> DVector<f64> {
        self.s2.map(f64::sqrt)
    }

    pub fn update(&mut self, residual: &DVector<f64>) -> Result<()> {
        if residual.len() != self.s2.len() {
            return Err(Error::ShapeMismatch(format!(
                "residual has {} nodes, tracker has {}",
                residual.len(),
                self.s2.len()
            )));
        }
        let rho = self.rho;
        for (s, r) in self.s2.iter_mut().zip(residual.iter()) {
            *s = rho * *s + (1.0 - rho) * r * r;
        }
        Ok(())
    }

    pub fn updated(&self, residual: &DVector<f64>) -> Result<Self> {
        let mut t = self.clone();
        t.update(residual)?;
        Ok(t)
    }
}

/// Tracker seeded with the per-node mean squared one-step residual over
/// rows `P..end`.
pub fn init_tracker(
    params: &ModelParams,
    values: &DMatrix<f64>,
    end: usize,
    rho: f64,
) -> Result<VolatilityTracker> {
    let p = params.dims.lags;
    if end <= p || end > values.nrows() {
        return Err(Error::InvalidParameter(format!(
            "need more than {p} rows to estimate residual variance"
        )));
    }
    let means = crate::forecaster::one_step_means(params, values, p, end)?;
    let n = values.ncols();
    let count = (end - p) as f64;
    let s2 = DVector::from_fn(n, |i, _| {
        (p..end)
            .map(|s| (values[(s, i)] - means[(s - p, i)]).powi(2))
            .sum::<f64>()
            / count
    });
    VolatilityTracker::new(s2, rho)
}

/// Splits a covariance into marginal scales and a correlation matrix.
pub fn correlation_decompose(cov: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !cov.is_square() {
        return Err(Error::ShapeMismatch("covariance must be square".into()));
    }
    let n = cov.nrows();
    let mut s = DVector::zeros(n);
    for i in 0..n {
        let v = cov[(i, i)];
        if !(v > 0.0) {
            return Err(Error::NotPositiveDefinite(format!(
                "conditional covariance diagonal entry {i} is {v}"
            )));
        }
        s[i] = v.sqrt();
    }
    let mut r = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            (cov[(i, j)] / (s[i] * s[j])).clamp(-1.0, 1.0)
        }
    });
    crate::linalg::symmetrize_in_place(&mut r);
    Ok((s, r))
}

/// `mu + diag(scale) chol(R) xi`.
pub fn refined_sample(
    mu: &DVector<f64>,
    correlation: &DMatrix<f64>,
    scale: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<DVector<f64>> {
    let chol = chol_lower(correlation, "conditional correlation")?;
    Ok(refined_sample_with_factor(mu, &chol, scale, xi))
}

fn refined_sample_with_factor(
    mu: &DVector<f64>,
    chol: &DMatrix<f64>,
    scale: &DVector<f64>,
    xi: &DVector<f64>,
) -> DVector<f64> {
    mu + (chol * xi).component_mul(scale)
}

/// `S x Q x N` sample paths starting at absolute step `produced_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastEnsemble {
    samples: Vec<f64>,
    num_samples: usize,
    horizon: usize,
    nodes: usize,
    produced_at: u64,
}

pub const ENSEMBLE_MAGIC: &[u8; 8] = b"CCENS001";

impl ForecastEnsemble {
    pub fn new(
        samples: Vec<f64>,
        num_samples: usize,
        horizon: usize,
        nodes: usize,
        produced_at: u64,
    ) -> Result<Self> {
        if num_samples == 0 || horizon == 0 || nodes == 0 {
            return Err(Error::InvalidParameter("empty ensemble".into()));
        }
        if samples.len() != num_samples * horizon * nodes {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {num_samples}x{horizon}x{nodes} ensemble",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ensemble values".into()));
        }
        Ok(Self {
            samples,
            num_samples,
            horizon,
            nodes,
            produced_at,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn produced_at(&self) -> u64 {
        self.produced_at
    }

    pub fn get(&self, sample: usize, step: usize, node: usize) -> f64 {
        self.samples[(sample * self.horizon + step) * self.nodes + node]
    }

    pub fn values(&self) -> &[f64] {
        &self.samples
    }

    /// All samples of one cell.
    pub fn cell(&self, step: usize, node: usize) -> Vec<f64> {
        (0..self.num_samples).map(|s| self.get(s, step, node)).collect()
    }

    /// Sample path `s` as a `Q x N` matrix.
    pub fn path(&self, sample: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.horizon, self.nodes, |q, i| self.get(sample, q, i))
    }

    /// Long CSV: `sample,step,node,value`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["sample", "step", "node", "value"])?;
        for s in 0..self.num_samples {
            for q in 0..self.horizon {
                for i in 0..self.nodes {
                    wtr.write_record([
                        s.to_string(),
                        q.to_string(),
                        i.to_string(),
                        format!("{}", self.get(s, q, i)),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, produced_at: u64) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse_err = |m: String| Error::Parse { row: k + 1, message: m };
            if rec.len() != 4 {
                return Err(parse_err(format!("expected 4 fields, found {}", rec.len())));
            }
            let idx = |f: usize| -> Result<usize> {
                rec[f].trim().parse().map_err(|e| parse_err(format!("{e}")))
            };
            let value: f64 = rec[3].trim().parse().map_err(|e| parse_err(format!("{e}")))?;
            rows.push((idx(0)?, idx(1)?, idx(2)?, value));
        }
        let dim = |f: fn(&(usize, usize, usize, f64)) -> usize| rows.iter().map(f).max().map_or(0, |m| m + 1);
        let (s, q, n) = (dim(|r| r.0), dim(|r| r.1), dim(|r| r.2));
        if rows.len() != s * q * n {
            return Err(Error::ShapeMismatch(format!(
                "{} rows do not fill a {s}x{q}x{n} ensemble",
                rows.len()
            )));
        }
        let mut samples = vec![f64::NAN; s * q * n];
        for (a, b, c, v) in rows {
            samples[(a * q + b) * n + c] = v;
        }
        Self::new(samples, s, q, n, produced_at)
    }

    /// Binary layout: magic `CCENS001`, `u32` S, Q, N, `u64` produced-at,
    /// then `f64` values in sample, step, node order; all little-endian.
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(ENSEMBLE_MAGIC)?;
        for d in [self.num_samples, self.horizon, self.nodes] {
            let d = u32::try_from(d).map_err(|_| Error::TooLarge(d))?;
            out.write_all(&d.to_le_bytes())?;
        }
        out.write_all(&self.produced_at.to_le_bytes())?;
        for v in &self.samples {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::Parse {
                row: 0,
                message: "not an ensemble file".into(),
            });
        }
        let mut u32b = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in dims.iter_mut() {
            input.read_exact(&mut u32b)?;
            *d = u32::from_le_bytes(u32b) as usize;
        }
        let mut u64b = [0u8; 8];
        input.read_exact(&mut u64b)?;
        let produced_at = u64::from_le_bytes(u64b);
        let total = dims[0] * dims[1] * dims[2];
        let mut samples = Vec::with_capacity(total);
        for _ in 0..total {
            input.read_exact(&mut u64b)?;
            samples.push(f64::from_le_bytes(u64b));
        }
        Self::new(samples, dims[0], dims[1], dims[2], produced_at)
    }
}

/// Source of the standard normal draws driving each sample path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Seeded(u64),
    /// All draws zero: paths follow the conditional mean.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub samples: usize,
    pub volatility_scaling: bool,
}

/// Samples `horizon` future steps after `history` (rows oldest first).
///
/// `origin` is the absolute index of the first forecast step and selects the
/// graph snapshots. Observed history residuals update `tracker`; it is frozen
/// inside the horizon. The conditioning window uses the most recent
/// available residuals, up to `D - 1`, observed or sampled.
pub fn rollout(
    params: &ModelParams,
    history: &DMatrix<f64>,
    origin: usize,
    graphs: &GraphSnapshots,
    tracker: &VolatilityTracker,
    config: &RolloutConfig,
    noise: Noise,
) -> Result<ForecastEnsemble> {
    let dims = params.dims;
    let (n, p, w) = (dims.nodes, dims.lags, dims.window);
    if config.horizon == 0 || config.samples == 0 {
        return Err(Error::InvalidParameter("horizon and sample count must be positive".into()));
    }
    if history.ncols() != n || graphs.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "model has {n} nodes; history has {}, graph has {}",
            history.ncols(),
            graphs.n()
        )));
    }
    if history.nrows() < p.max(w - 1) {
        return Err(Error::InvalidParameter(format!(
            "history of {} steps is shorter than max(P, D - 1) = {}",
            history.nrows(),
            p.max(w - 1)
        )));
    }
    if tracker.s2().len() != n {
        return Err(Error::ShapeMismatch("tracker size".into()));
    }

    let rows: Vec<DVector<f64>> = history.row_iter().map(|r| r.transpose()).collect();
    let h = rows.len();
    let mut tracker = tracker.clone();
    let mut observed: Vec<(HeadOutput, DVector<f64>)> = Vec::new();
    for s in p..h {
        let out = heads(params, &encode(params, &rows[s - p..s])?);
        let resid = &rows[s] - &out.mu;
        tracker.update(&resid)?;
        observed.push((out, resid));
    }
    let keep = observed.len().saturating_sub(w - 1);
    observed.drain(..keep);
    let scale_vol = tracker.scale();

    let structured = params.head == CovarianceHead::Structured;
    let (bank, gs) = if structured {
        let cache = CurvatureCache::new(graphs.base());
        let gs = (0..config.horizon)
            .map(|q| spatial_covariance(&cache.context(graphs.at(origin + q).into_owned()), &params.spatial))
            .collect::<Result<Vec<_>>>()?;
        (Some(params.kernel_bank()?), gs)
    } else {
        (None, Vec::new())
    };

    let path = |sample: usize| -> Result<Vec<f64>> {
        let mut rng = match noise {
            Noise::Seeded(seed) => Some(indexed_substream(seed, "sampling", sample as u64)),
            Noise::Zero => None,
        };
        let mut xs: Vec<DVector<f64>> = rows[h - p..].to_vec();
        let mut recent: Vec<(HeadOutput, DVector<f64>)> = observed.clone();
        let mut out = Vec::with_capacity(config.horizon * n);
        for q in 0..config.horizon {
            let cur = heads(params, &encode(params, &xs[xs.len() - p..])?);
            let xi = match rng.as_mut() {
                Some(r) => DVector::from_fn(n, |_, _| StandardNormal.sample(r)),
                None => DVector::zeros(n),
            };
            let eta = if let Some(bank) = &bank {
                let k = recent.len().min(w - 1);
                let past = &recent[recent.len() - k..];
                let full_c = mixture_correlation(bank, &cur.logits)?;
                let c = full_c.view((0, 0), (k + 1, k + 1)).into_owned();
                let mut blocks: Vec<DMatrix<f64>> = past.iter().map(|(o, _)| o.l.clone()).collect();
                blocks.push(cur.l.clone());
                let mut d = DVector::zeros((k + 1) * n);
                let mut eta_obs = DVector::zeros(k * n);
                for (j, (o, r)) in past.iter().enumerate() {
                    d.rows_mut(j * n, n).copy_from(&o.d);
                    eta_obs.rows_mut(j * n, n).copy_from(r);
                }
                d.rows_mut(k * n, n).copy_from(&cur.d);
                let cov = assemble(blocks, c, gs[q].clone(), d)?;
                let cond = conditional_next_step(&cov, &eta_obs)?;
                let (s_cond, r_cond) = correlation_decompose(&cond.cov)?;
                let scale = if config.volatility_scaling { &scale_vol } else { &s_cond };
                refined_sample(&cond.mean, &r_cond, scale, &xi)?
            } else {
                let scale = if config.volatility_scaling {
                    scale_vol.clone()
                } else {
                    cur.d.map(f64::sqrt)
                };
                xi.component_mul(&scale)
            };
            let x = &cur.mu + &eta;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "sample {sample} at horizon step {}",
                    q + 1
                )));
            }
            out.extend(x.iter());
            xs.push(x);
            recent.push((cur, eta));
            if recent.len() > w - 1 {
                recent.remove(0);
            }
        }
        Ok(out)
    };

    let paths: Vec<Result<Vec<f64>>> = (0..config.samples).into_par_iter().map(path).collect();
    let mut samples = Vec::with_capacity(config.samples * config.horizon * n);
    for p in paths {
        samples.extend(p?);
    }
    ForecastEnsemble::new(samples, config.samples, config.horizon, n, origin as u64)
}

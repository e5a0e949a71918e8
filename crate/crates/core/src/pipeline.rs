//! End-to-end helpers shared by the command-line tool and experiments:
//! synthetic setup, ablation variants and rolling-origin evaluation.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataio::{split_indices, synth_generate, GraphSnapshots, SynthConfig, SynthOutput};
use crate::error::{Error, Result};
use crate::graph::{
    bottleneck_scores, cheeger_brute, diagnostics, reweight, CurvatureReport, DiagnosticsReport,
    WeightedGraph,
};
use crate::rngs::substream;
use crate::forecaster::{fit, Ablation, CovarianceHead, FitData, FitResult, ModelParams, TrainConfig};
use crate::metrics::{EvalReport, Evaluator, DEFAULT_QUANTILES};
use crate::sampler::{init_tracker, rollout, Noise, RolloutConfig, DEFAULT_RHO};

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// A dataset with graph snapshots and chronological split boundaries.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub values: DMatrix<f64>,
    pub graphs: GraphSnapshots,
    pub train_end: usize,
    pub val_end: usize,
}

impl Prepared {
    pub fn new(values: DMatrix<f64>, graphs: GraphSnapshots) -> Result<Self> {
        let (train_end, val_end) = split_indices(values.nrows(), DEFAULT_SPLIT)?;
        Ok(Self {
            values,
            graphs,
            train_end,
            val_end,
        })
    }

    pub fn fit_data(&self) -> FitData<'_> {
        FitData {
            values: &self.values,
            train_end: self.train_end,
            val_end: self.val_end,
            graphs: &self.graphs,
        }
    }
}

/// Generates synthetic data and perturbed graph snapshots from one seed.
pub fn synthetic(config: &SynthConfig) -> Result<(SynthOutput, Prepared)> {
    let out = synth_generate(config)?;
    let graphs = GraphSnapshots::perturbed(out.graph.clone(), config.seed);
    let prepared = Prepared::new(out.dataset.values.clone(), graphs)?;
    Ok((out, prepared))
}

/// Training configuration of an ablation variant.
pub fn variant_config(base: &TrainConfig, ablation: Ablation) -> TrainConfig {
    TrainConfig {
        ablation,
        head: CovarianceHead::Structured,
        ..base.clone()
    }
}

/// Diagonal-only head: no spatial or temporal residual structure.
pub fn naive_config(base: &TrainConfig) -> TrainConfig {
    TrainConfig {
        ablation: Ablation::NoRewiring,
        head: CovarianceHead::DiagonalOnly,
        ..base.clone()
    }
}

pub fn train(prepared: &Prepared, config: &TrainConfig) -> Result<FitResult> {
    fit(prepared.fit_data(), config)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForecastPlan {
    pub horizon: usize,
    pub samples: usize,
    /// Steps between consecutive forecast origins.
    pub stride: usize,
    pub seed: u64,
    pub rho: f64,
}

impl Default for ForecastPlan {
    fn default() -> Self {
        Self {
            horizon: 12,
            samples: 100,
            stride: 12,
            seed: 42,
            rho: DEFAULT_RHO,
        }
    }
}

/// Origins `from, from + stride, ...` whose horizon ends by `to`.
pub fn origins(from: usize, to: usize, plan: &ForecastPlan) -> Vec<usize> {
    let mut out = Vec::new();
    let mut t = from;
    while t + plan.horizon <= to {
        out.push(t);
        t += plan.stride.max(1);
    }
    out
}

/// Rolling-origin evaluation over rows `from..to`.
///
/// The volatility tracker starts from the training residual variance and
/// follows observed residuals from the end of training to each origin.
pub fn rolling_evaluation(
    params: &ModelParams,
    prepared: &Prepared,
    from: usize,
    to: usize,
    plan: &ForecastPlan,
    volatility_scaling: bool,
) -> Result<EvalReport> {
    let p = params.dims.lags;
    let tracker = init_tracker(params, &prepared.values, prepared.train_end, plan.rho)?;
    let history_start = prepared.train_end.saturating_sub(p + params.dims.window);
    let starts = origins(from, to, plan);
    if starts.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "no forecast origin fits rows {from}..{to} with horizon {}",
            plan.horizon
        )));
    }
    let cfg = RolloutConfig {
        horizon: plan.horizon,
        samples: plan.samples,
        volatility_scaling,
    };
    let mut ev = Evaluator::new(&DEFAULT_QUANTILES)?;
    for (k, &t0) in starts.iter().enumerate() {
        let lo = history_start.min(t0.saturating_sub(p + params.dims.window));
        let history = prepared.values.rows(lo, t0 - lo).into_owned();
        let ens = rollout(
            params,
            &history,
            t0,
            &prepared.graphs,
            &tracker,
            &cfg,
            Noise::Seeded(crate::rngs::substream_seed(plan.seed, &format!("origin-{k}"))),
        )?;
        let actuals = prepared.values.rows(t0, plan.horizon).into_owned();
        ev.add(&ens, &actuals)?;
    }
    ev.report()
}

/// Before/after connectivity diagnostics for one curvature reweighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewireReport {
    pub nodes: usize,
    pub edges: usize,
    pub kappa0: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Edges with curvature strictly below `kappa0`.
    pub edges_below_kappa0: usize,
    /// `"cheeger"`, `"random-bisections"` or `"supplied"`.
    pub cut_source: String,
    pub cuts: Vec<Vec<usize>>,
    pub diagnostics: DiagnosticsReport,
    pub curvature: CurvatureReport,
}

/// Largest node count for which the exact Cheeger cut is enumerated.
pub const CHEEGER_MAX_NODES: usize = 20;
pub const RANDOM_BISECTIONS: usize = 10;

/// Reweights `graph` and compares connectivity measures before and after.
///
/// Without supplied cuts, the conductance ratio uses the exact Cheeger cut
/// for small graphs and random balanced bisections otherwise.
pub fn rewire_report(
    graph: &WeightedGraph,
    kappa0: f64,
    tau: f64,
    lambda: f64,
    cuts: Option<Vec<Vec<usize>>>,
    seed: u64,
) -> Result<RewireReport> {
    let n = graph.n();
    let curvature = bottleneck_scores(graph, kappa0, tau)?;
    let rewired = reweight(graph, &curvature, lambda)?;
    let (cut_source, cuts) = match cuts {
        Some(c) => ("supplied".to_string(), c),
        None if n <= CHEEGER_MAX_NODES => {
            let (_, s) = cheeger_brute(graph)?;
            ("cheeger".to_string(), vec![s])
        }
        None => {
            let mut rng = substream(seed, "cuts");
            let mut nodes: Vec<usize> = (0..n).collect();
            let cuts = (0..RANDOM_BISECTIONS)
                .map(|_| {
                    nodes.shuffle(&mut rng);
                    let mut s = nodes[..n / 2].to_vec();
                    s.sort_unstable();
                    s
                })
                .collect();
            ("random-bisections".to_string(), cuts)
        }
    };
    let diagnostics = diagnostics(graph, &rewired, &cuts)?;
    Ok(RewireReport {
        nodes: n,
        edges: curvature.edges.len(),
        kappa0,
        tau,
        lambda,
        edges_below_kappa0: curvature.count_below_threshold(),
        cut_source,
        cuts,
        diagnostics,
        curvature,
    })
}

impl RewireReport {
    pub fn table(&self) -> String {
        let r = &self.diagnostics.ratios;
        let mut s = String::new();
        let _ = writeln!(s, "nodes {}  edges {}  below kappa0 {}", self.nodes, self.edges, self.edges_below_kappa0);
        let _ = writeln!(s, "kappa0 {}  tau {}  lambda {}", self.kappa0, self.tau, self.lambda);
        let _ = writeln!(s, "{:<24} {:>12} {:>12} {:>10}", "measure", "before", "after", "ratio %");
        let d = &self.diagnostics;
        let _ = writeln!(
            s,
            "{:<24} {:>12.6} {:>12.6} {:>10.3}",
            "Kirchhoff index", d.kirchhoff_before, d.kirchhoff_after, r.kirchhoff_pct
        );
        let _ = writeln!(
            s,
            "{:<24} {:>12.6} {:>12.6} {:>10.3}",
            "spectral lambda_{n-1}", d.lambda_top_before, d.lambda_top_after, r.spectral_pct
        );
        if let (Some(pct), Some(c)) = (
            r.conductance_pct,
            d.conductance_pairs
                .iter()
                .min_by(|a, b| a.phi_before.total_cmp(&b.phi_before)),
        ) {
            let _ = writeln!(
                s,
                "{:<24} {:>12.6} {:>12.6} {:>10.3}",
                format!("conductance ({})", self.cut_source),
                c.phi_before,
                c.phi_after,
                pct
            );
        }
        s
    }
}

/// Scores of one trained variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub name: String,
    pub best_val_nll: f64,
    pub test: EvalReport,
}

/// Trains every rung of the ablation ladder plus the diagonal-only head and
/// scores each on the test split. Variants that differ only in inference
/// (volatility scaling) share one training run.
pub fn ablation_study(
    prepared: &Prepared,
    base: &TrainConfig,
    plan: &ForecastPlan,
) -> Result<Vec<VariantResult>> {
    let test_start = prepared.val_end;
    let test_end = prepared.values.nrows();
    let mut results = Vec::new();
    let mut cache: Vec<(TrainConfig, FitResult)> = Vec::new();
    let mut runs: Vec<(String, TrainConfig, bool)> = Ablation::LADDER
        .iter()
        .map(|&a| (a.name().to_string(), variant_config(base, a), a.volatility_scaling()))
        .collect();
    runs.push(("naive".to_string(), naive_config(base), false));
    for (name, cfg, volatility) in runs {
        let training_key = TrainConfig {
            ablation: if cfg.ablation == Ablation::ReweightOnly {
                Ablation::NoVolatility
            } else {
                cfg.ablation
            },
            ..cfg.clone()
        };
        let fit = match cache.iter().find(|(k, _)| *k == training_key) {
            Some((_, f)) => f.clone(),
            None => {
                let f = train(prepared, &training_key)?;
                cache.push((training_key, f.clone()));
                f
            }
        };
        let test = rolling_evaluation(&fit.params, prepared, test_start, test_end, plan, volatility)?;
        results.push(VariantResult {
            name,
            best_val_nll: fit.best_val_nll,
            test,
        });
    }
    Ok(results)
}

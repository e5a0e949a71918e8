//! Autoregressive backbone with low-rank-plus-diagonal covariance heads.
//!
//! A single tanh layer encodes the flattened lag window into a latent state
//! `h`; affine heads map `h` to the mean, the `N x R` factor, log-variances
//! and temporal mixture logits. The spatial factor covariance is shared over
//! time and built from the curvature-reweighted graph. Training minimises the
//! windowed batch NLL with exact gradients.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    assemble, build_kernel_bank, mixture_correlation, mixture_correlation_backward,
    nll_with_gradient, spatial_factor, KernelBank, SpatialFactor, SpatialFactorParams,
};
use crate::dataio::GraphSnapshots;
use crate::error::{Error, Result};
use crate::graph::{
    batch_average, edge_curvatures, reweight, symmetrize, CurvatureReport, WeightedGraph,
    DEFAULT_SUPPORT_THRESHOLD,
};
use crate::rngs::substream;

/// Floor added to `exp(log d)` so every head variance is strictly positive.
pub const D_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceHead {
    /// `Σ = U (C ⊗ G) Uᵀ + diag(d)`.
    Structured,
    /// `Σ = diag(d)`: no temporal or spatial correlation.
    DiagonalOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub nodes: usize,
    pub lags: usize,
    pub hidden: usize,
    pub rank: usize,
    pub mixtures: usize,
    pub window: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0
            || self.lags == 0
            || self.hidden == 0
            || self.rank == 0
            || self.mixtures == 0
            || self.window == 0
        {
            return Err(Error::InvalidParameter(format!(
                "all model dimensions must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Affine {
    pub fn zeros(out: usize, input: usize) -> Self {
        Self {
            weight: DMatrix::zeros(out, input),
            bias: DVector::zeros(out),
        }
    }

    pub fn forward(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.weight * x + &self.bias
    }

    /// Accumulates `d_out ⊗ x` into this gradient and returns `Wᵀ d_out`.
    fn accumulate(&mut self, layer: &Affine, x: &DVector<f64>, d_out: &DVector<f64>) -> DVector<f64> {
        self.weight.ger(1.0, d_out, x, 1.0);
        self.bias += d_out;
        layer.weight.tr_mul(d_out)
    }
}

/// Trainable parameter groups, used for freezing and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Backbone,
    HeadMu,
    HeadL,
    HeadLogd,
    HeadLogits,
    Alpha,
    Beta,
    Lambda,
    Kappa0,
    Tau,
    Projection,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub head: CovarianceHead,
    pub length_scale_step: f64,
    pub backbone: Affine,
    pub head_mu: Affine,
    pub head_l: Affine,
    pub head_logd: Affine,
    pub head_logits: Affine,
    pub spatial: SpatialFactorParams,
}

/// Named view of one parameter tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn matrix_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut data = Vec::with_capacity(m.len());
    for row in m.row_iter() {
        data.extend(row.iter());
    }
    Tensor {
        shape: vec![m.nrows(), m.ncols()],
        data,
    }
}

fn vector_tensor(v: &DVector<f64>) -> Tensor {
    Tensor {
        shape: vec![v.len()],
        data: v.iter().copied().collect(),
    }
}

fn scalar_tensor(v: f64) -> Tensor {
    Tensor {
        shape: vec![],
        data: vec![v],
    }
}

impl ModelParams {
    /// Random initialisation. `node_mean` / `node_var` seed the mean and
    /// log-variance head biases.
    pub fn init(
        dims: ModelDims,
        head: CovarianceHead,
        length_scale_step: f64,
        node_mean: &DVector<f64>,
        node_var: &DVector<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        dims.validate()?;
        let (n, p, h, r, m) = (dims.nodes, dims.lags, dims.hidden, dims.rank, dims.mixtures);
        if node_mean.len() != n || node_var.len() != n {
            return Err(Error::ShapeMismatch("node statistics length".into()));
        }
        let mut uniform = |rows: usize, cols: usize, scale: f64| {
            DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
        };
        let backbone = Affine {
            weight: uniform(h, n * p, 1.0 / ((n * p) as f64).sqrt()),
            bias: DVector::zeros(h),
        };
        let head_scale = 0.1 / (h as f64).sqrt();
        let head_mu = Affine {
            weight: uniform(n, h, head_scale),
            bias: node_mean.clone(),
        };
        let head_logd = Affine {
            weight: uniform(n, h, head_scale),
            bias: node_var.map(|v| v.max(1e-4).ln()),
        };
        let head_logits = Affine {
            weight: uniform(m, h, head_scale),
            bias: DVector::zeros(m),
        };
        let mut head_l = Affine {
            weight: uniform(n * r, h, head_scale),
            bias: DVector::zeros(n * r),
        };
        for i in 0..n {
            let s = 0.3 * node_var[i].max(1e-4).sqrt();
            for k in 0..r {
                let z: f64 = StandardNormal.sample(rng);
                head_l.bias[i * r + k] = s * z;
            }
        }
        let projection = DMatrix::from_fn(n, r, |_, _| StandardNormal.sample(rng));
        let spatial = SpatialFactorParams::with_projection(projection);
        Ok(Self {
            dims,
            head,
            length_scale_step,
            backbone,
            head_mu,
            head_l,
            head_logd,
            head_logits,
            spatial,
        })
    }

    /// A same-shaped container with every entry zero (for gradients).
    pub fn zeros_like(&self) -> Self {
        let z = |a: &Affine| Affine::zeros(a.weight.nrows(), a.weight.ncols());
        Self {
            dims: self.dims,
            head: self.head,
            length_scale_step: self.length_scale_step,
            backbone: z(&self.backbone),
            head_mu: z(&self.head_mu),
            head_l: z(&self.head_l),
            head_logd: z(&self.head_logd),
            head_logits: z(&self.head_logits),
            spatial: SpatialFactorParams {
                alpha: 0.0,
                beta: 0.0,
                sigma_min: 0.0,
                projection: DMatrix::zeros(self.dims.nodes, self.dims.rank),
                kappa0: 0.0,
                tau: 0.0,
                lambda: 0.0,
            },
        }
    }

    /// Trainable tensors with their names and groups, in flat-vector order.
    pub fn tensors(&self) -> Vec<(&'static str, ParamGroup, Tensor)> {
        use ParamGroup::*;
        vec![
            ("backbone.weight", Backbone, matrix_tensor(&self.backbone.weight)),
            ("backbone.bias", Backbone, vector_tensor(&self.backbone.bias)),
            ("head_mu.weight", HeadMu, matrix_tensor(&self.head_mu.weight)),
            ("head_mu.bias", HeadMu, vector_tensor(&self.head_mu.bias)),
            ("head_l.weight", HeadL, matrix_tensor(&self.head_l.weight)),
            ("head_l.bias", HeadL, vector_tensor(&self.head_l.bias)),
            ("head_logd.weight", HeadLogd, matrix_tensor(&self.head_logd.weight)),
            ("head_logd.bias", HeadLogd, vector_tensor(&self.head_logd.bias)),
            ("head_logits.weight", HeadLogits, matrix_tensor(&self.head_logits.weight)),
            ("head_logits.bias", HeadLogits, vector_tensor(&self.head_logits.bias)),
            ("spatial.alpha", Alpha, scalar_tensor(self.spatial.alpha)),
            ("spatial.beta", Beta, scalar_tensor(self.spatial.beta)),
            ("spatial.lambda", Lambda, scalar_tensor(self.spatial.lambda)),
            ("spatial.kappa0", Kappa0, scalar_tensor(self.spatial.kappa0)),
            ("spatial.tau", Tau, scalar_tensor(self.spatial.tau)),
            ("spatial.projection", Projection, matrix_tensor(&self.spatial.projection)),
        ]
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors().iter().map(|t| t.2.data.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.2.data).collect()
    }

    /// Group of every flat coordinate.
    pub fn flat_groups(&self) -> Vec<ParamGroup> {
        self.tensors()
            .into_iter()
            .flat_map(|(_, g, t)| std::iter::repeat_n(g, t.data.len()))
            .collect()
    }

    /// `name[index]` label of every flat coordinate.
    pub fn flat_names(&self) -> Vec<String> {
        self.tensors()
            .into_iter()
            .flat_map(|(name, _, t)| (0..t.data.len()).map(move |k| format!("{name}[{k}]")))
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_trainable() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} entries, model has {}",
                flat.len(),
                self.num_trainable()
            )));
        }
        let mut it = flat.iter().copied();
        let fill_m = |m: &mut DMatrix<f64>, it: &mut dyn Iterator<Item = f64>| {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    m[(i, j)] = it.next().unwrap();
                }
            }
        };
        let fill_v = |v: &mut DVector<f64>, it: &mut dyn Iterator<Item = f64>| {
            for x in v.iter_mut() {
                *x = it.next().unwrap();
            }
        };
        for layer in [
            &mut self.backbone,
            &mut self.head_mu,
            &mut self.head_l,
            &mut self.head_logd,
            &mut self.head_logits,
        ] {
            fill_m(&mut layer.weight, &mut it);
            fill_v(&mut layer.bias, &mut it);
        }
        self.spatial.alpha = it.next().unwrap();
        self.spatial.beta = it.next().unwrap();
        self.spatial.lambda = it.next().unwrap();
        self.spatial.kappa0 = it.next().unwrap();
        self.spatial.tau = it.next().unwrap();
        fill_m(&mut self.spatial.projection, &mut it);
        Ok(())
    }

    pub fn kernel_bank(&self) -> Result<KernelBank> {
        build_kernel_bank(self.dims.window, self.dims.mixtures, self.length_scale_step)
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    /// Serialises every parameter under its named path.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            dims: self.dims,
            head: self.head,
            length_scale_step: self.length_scale_step,
            sigma_min: self.spatial.sigma_min,
            d_floor: D_FLOOR,
            tensors: self
                .tensors()
                .into_iter()
                .map(|(name, _, t)| (name.to_string(), t))
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::InvalidParameter(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        ck.dims.validate()?;
        let (n, r) = (ck.dims.nodes, ck.dims.rank);
        let mut params = ModelParams {
            dims: ck.dims,
            head: ck.head,
            length_scale_step: ck.length_scale_step,
            backbone: Affine::zeros(ck.dims.hidden, n * ck.dims.lags),
            head_mu: Affine::zeros(n, ck.dims.hidden),
            head_l: Affine::zeros(n * r, ck.dims.hidden),
            head_logd: Affine::zeros(n, ck.dims.hidden),
            head_logits: Affine::zeros(ck.dims.mixtures, ck.dims.hidden),
            spatial: SpatialFactorParams::with_projection(DMatrix::zeros(n, r)),
        };
        params.spatial.sigma_min = ck.sigma_min;
        let mut flat = Vec::with_capacity(params.num_trainable());
        for (name, _, expected) in params.tensors() {
            let t = ck
                .tensors
                .get(name)
                .ok_or_else(|| Error::InvalidParameter(format!("checkpoint lacks {name}")))?;
            if t.shape != expected.shape || t.data.len() != expected.data.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{name}: checkpoint shape {:?}, expected {:?}",
                    t.shape, expected.shape
                )));
            }
            flat.extend_from_slice(&t.data);
        }
        params.set_flat(&flat)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(f))?;
        Self::from_checkpoint(&ck)
    }
}

pub const CHECKPOINT_FORMAT: &str = "curvecov-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub dims: ModelDims,
    pub head: CovarianceHead,
    pub length_scale_step: f64,
    pub sigma_min: f64,
    pub d_floor: f64,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Latent state from the last `P` observations (oldest first).
pub fn encode(params: &ModelParams, history: &[DVector<f64>]) -> Result<DVector<f64>> {
    let (n, p) = (params.dims.nodes, params.dims.lags);
    if history.len() != p {
        return Err(Error::ShapeMismatch(format!(
            "history has {} steps, model uses {p} lags",
            history.len()
        )));
    }
    let mut x = DVector::zeros(n * p);
    for (k, obs) in history.iter().enumerate() {
        if obs.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "observation has {} nodes, model has {n}",
                obs.len()
            )));
        }
        x.rows_mut(k * n, n).copy_from(obs);
    }
    Ok(encode_flat(params, &x))
}

fn encode_flat(params: &ModelParams, lags: &DVector<f64>) -> DVector<f64> {
    params.backbone.forward(lags).map(f64::tanh)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub mu: DVector<f64>,
    /// `N x R` factor.
    pub l: DMatrix<f64>,
    pub d: DVector<f64>,
    pub logits: DVector<f64>,
}

pub fn heads(params: &ModelParams, h: &DVector<f64>) -> HeadOutput {
    let (n, r) = (params.dims.nodes, params.dims.rank);
    let mu = params.head_mu.forward(h);
    let lvec = params.head_l.forward(h);
    let l = DMatrix::from_fn(n, r, |i, k| lvec[i * r + k]);
    let d = params.head_logd.forward(h).map(|v| v.exp() + D_FLOOR);
    let logits = params.head_logits.forward(h);
    HeadOutput { mu, l, d, logits }
}

/// A graph together with its (parameter-independent) edge curvatures.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub graph: WeightedGraph,
    pub curvatures: Vec<(usize, usize, f64)>,
}

impl GraphContext {
    pub fn new(graph: WeightedGraph) -> Self {
        let curvatures = edge_curvatures(&graph, DEFAULT_SUPPORT_THRESHOLD);
        Self { graph, curvatures }
    }

    pub fn report(&self, spatial: &SpatialFactorParams) -> Result<CurvatureReport> {
        CurvatureReport::from_curvatures(
            &self.curvatures,
            spatial.kappa0,
            spatial.tau,
            DEFAULT_SUPPORT_THRESHOLD,
        )
    }
}

/// Reuses curvature values for graphs that share the base graph's support.
#[derive(Debug, Clone)]
pub struct CurvatureCache {
    base: GraphContext,
}

impl CurvatureCache {
    pub fn new(base: &WeightedGraph) -> Self {
        Self {
            base: GraphContext::new(base.clone()),
        }
    }

    pub fn context(&self, graph: WeightedGraph) -> GraphContext {
        let same_support = graph.n() == self.base.graph.n() && {
            let mut edges = self.base.curvatures.iter();
            let mut ok = true;
            let n = graph.n();
            'outer: for i in 0..n {
                for j in (i + 1)..n {
                    if graph.weight(i, j) > DEFAULT_SUPPORT_THRESHOLD {
                        match edges.next() {
                            Some(&(a, b, _)) if a == i && b == j => {}
                            _ => {
                                ok = false;
                                break 'outer;
                            }
                        }
                    }
                }
            }
            ok && edges.next().is_none()
        };
        if same_support {
            GraphContext {
                graph,
                curvatures: self.base.curvatures.clone(),
            }
        } else {
            GraphContext::new(graph)
        }
    }
}

struct SpatialForward {
    report: CurvatureReport,
    laplacian: DMatrix<f64>,
    factor: SpatialFactor,
}

fn spatial_forward(ctx: &GraphContext, spatial: &SpatialFactorParams) -> Result<SpatialForward> {
    let report = ctx.report(spatial)?;
    let rewired = reweight(&ctx.graph, &report, spatial.lambda)?;
    let laplacian = rewired.laplacian();
    let factor = spatial_factor(&laplacian, spatial)?;
    Ok(SpatialForward {
        report,
        laplacian,
        factor,
    })
}

/// Spatial factor covariance `G` for a graph (curvature reweighting, projection, inversion).
pub fn spatial_covariance(ctx: &GraphContext, spatial: &SpatialFactorParams) -> Result<DMatrix<f64>> {
    Ok(spatial_forward(ctx, spatial)?.factor.g)
}

/// Back-propagates `dG` to the spatial parameters; curvature values are constants.
fn spatial_backward(
    ctx: &GraphContext,
    spatial: &SpatialFactorParams,
    fwd: &SpatialForward,
    d_g: &DMatrix<f64>,
    out: &mut SpatialFactorParams,
) {
    let g = &fwd.factor.g;
    let mut d_q = -(g * d_g * g);
    crate::linalg::symmetrize_in_place(&mut d_q);
    out.alpha += d_q.trace();
    out.beta += d_q.dot(&fwd.factor.projected_laplacian);

    let p_hat = &fwd.factor.p_hat;
    let d_phat = (&fwd.laplacian * p_hat * &d_q) * (2.0 * spatial.beta);
    let d_lap = (p_hat * &d_q * p_hat.transpose()) * spatial.beta;

    for (e, edge) in fwd.report.edges.iter().enumerate() {
        let (i, j) = (edge.i, edge.j);
        let d_w = d_lap[(i, i)] + d_lap[(j, j)] - d_lap[(i, j)] - d_lap[(j, i)];
        let w = ctx.graph.weight(i, j);
        out.lambda += d_w * w * edge.score;
        let d_b = d_w * w * spatial.lambda;
        let x = spatial.tau * (spatial.kappa0 - ctx.curvatures[e].2);
        let sig = 1.0 / (1.0 + (-x).exp());
        let d_x = d_b * sig;
        out.tau += d_x * (spatial.kappa0 - edge.curvature);
        out.kappa0 += d_x * spatial.tau;
    }

    for (r, norm) in fwd.factor.column_norms.iter().enumerate() {
        let col = p_hat.column(r);
        let dcol = d_phat.column(r);
        let proj = col.dot(&dcol);
        let grad = (dcol - col * proj) / *norm;
        let mut target = out.projection.column_mut(r);
        target += grad;
    }
}

struct StepCache {
    lags: DVector<f64>,
    h: DVector<f64>,
    out: HeadOutput,
}

fn lag_vector(values: &DMatrix<f64>, end: usize, lags: usize) -> DVector<f64> {
    let n = values.ncols();
    let mut x = DVector::zeros(n * lags);
    for k in 0..lags {
        let row = values.row(end - lags + k);
        for i in 0..n {
            x[k * n + i] = row[i];
        }
    }
    x
}

fn check_window(params: &ModelParams, values: &DMatrix<f64>, end: usize) -> Result<()> {
    let dims = params.dims;
    if values.ncols() != dims.nodes {
        return Err(Error::ShapeMismatch(format!(
            "data has {} nodes, model has {}",
            values.ncols(),
            dims.nodes
        )));
    }
    if end >= values.nrows() || end + 1 < dims.lags + dims.window {
        return Err(Error::InvalidParameter(format!(
            "window ending at step {end} needs {} earlier steps of history and {} rows of data",
            dims.lags + dims.window - 1,
            end + 1
        )));
    }
    Ok(())
}

/// First step index at which a full window (with lags) fits.
pub fn first_window_end(dims: &ModelDims) -> usize {
    dims.lags + dims.window - 1
}

/// Means and latent states for the `D` steps ending at `end`.
fn window_steps(params: &ModelParams, values: &DMatrix<f64>, end: usize) -> Vec<StepCache> {
    let (p, w) = (params.dims.lags, params.dims.window);
    (0..w)
        .map(|k| {
            let s = end + 1 - w + k;
            let lags = lag_vector(values, s, p);
            let h = encode_flat(params, &lags);
            let out = heads(params, &h);
            StepCache { lags, h, out }
        })
        .collect()
}

fn residuals(values: &DMatrix<f64>, end: usize, steps: &[StepCache]) -> DVector<f64> {
    let n = values.ncols();
    let w = steps.len();
    let mut eta = DVector::zeros(w * n);
    for (k, st) in steps.iter().enumerate() {
        let s = end + 1 - w + k;
        for i in 0..n {
            eta[k * n + i] = values[(s, i)] - st.out.mu[i];
        }
    }
    eta
}

/// Batch covariance of the window from cached head outputs.
fn window_covariance(
    params: &ModelParams,
    bank: &KernelBank,
    steps: &[StepCache],
    g: DMatrix<f64>,
) -> Result<crate::covariance::BatchCovariance> {
    let n = params.dims.nodes;
    let logits = &steps.last().expect("nonempty window").out.logits;
    let c = mixture_correlation(bank, logits)?;
    let blocks = steps.iter().map(|s| s.out.l.clone()).collect();
    let mut d = DVector::zeros(steps.len() * n);
    for (k, s) in steps.iter().enumerate() {
        d.rows_mut(k * n, n).copy_from(&s.out.d);
    }
    assemble(blocks, c, g, d)
}

fn diagonal_nll(eta: &DVector<f64>, d: &DVector<f64>) -> f64 {
    eta.iter()
        .zip(d.iter())
        .map(|(e, v)| 0.5 * (LN_2PI + v.ln() + e * e / v))
        .sum()
}

/// Batch NLL of the window of `D` steps ending at `end` (inclusive).
pub fn window_nll(
    params: &ModelParams,
    values: &DMatrix<f64>,
    end: usize,
    ctx: &GraphContext,
) -> Result<f64> {
    check_window(params, values, end)?;
    let steps = window_steps(params, values, end);
    let eta = residuals(values, end, &steps);
    match params.head {
        CovarianceHead::DiagonalOnly => {
            let n = params.dims.nodes;
            let mut d = DVector::zeros(eta.len());
            for (k, s) in steps.iter().enumerate() {
                d.rows_mut(k * n, n).copy_from(&s.out.d);
            }
            Ok(diagonal_nll(&eta, &d))
        }
        CovarianceHead::Structured => {
            let bank = params.kernel_bank()?;
            let g = spatial_covariance(ctx, &params.spatial)?;
            let cov = window_covariance(params, &bank, &steps, g)?;
            crate::covariance::nll(&cov, &eta)
        }
    }
}

/// Window NLL and its exact gradient as a flat vector in [`ModelParams::flat`] order.
pub fn window_gradient(
    params: &ModelParams,
    values: &DMatrix<f64>,
    end: usize,
    ctx: &GraphContext,
) -> Result<(f64, Vec<f64>)> {
    check_window(params, values, end)?;
    let (n, r) = (params.dims.nodes, params.dims.rank);
    let steps = window_steps(params, values, end);
    let eta = residuals(values, end, &steps);
    let w = steps.len();
    let mut grad = params.zeros_like();

    let (value, d_eta, d_d, d_blocks, d_logits) = match params.head {
        CovarianceHead::DiagonalOnly => {
            let mut d = DVector::zeros(eta.len());
            for (k, s) in steps.iter().enumerate() {
                d.rows_mut(k * n, n).copy_from(&s.out.d);
            }
            let value = diagonal_nll(&eta, &d);
            let d_eta = eta.component_div(&d);
            let d_d = DVector::from_fn(eta.len(), |i, _| 0.5 * (1.0 / d[i] - eta[i] * eta[i] / (d[i] * d[i])));
            (value, d_eta, d_d, None, None)
        }
        CovarianceHead::Structured => {
            let bank = params.kernel_bank()?;
            let fwd = spatial_forward(ctx, &params.spatial)?;
            let cov = window_covariance(params, &bank, &steps, fwd.factor.g.clone())?;
            let (value, ng) = nll_with_gradient(&cov, &eta)?;
            let logits = &steps[w - 1].out.logits;
            let d_logits = mixture_correlation_backward(&bank, logits, &ng.c);
            spatial_backward(ctx, &params.spatial, &fwd, &ng.g, &mut grad.spatial);
            (value, ng.eta, ng.d, Some(ng.blocks), Some(d_logits))
        }
    };

    for (k, st) in steps.iter().enumerate() {
        let mut d_h = DVector::zeros(params.dims.hidden);
        let d_mu = -d_eta.rows(k * n, n).into_owned();
        d_h += grad.head_mu.accumulate(&params.head_mu, &st.h, &d_mu);

        let d_logd = DVector::from_fn(n, |i, _| d_d[k * n + i] * (st.out.d[i] - D_FLOOR));
        d_h += grad.head_logd.accumulate(&params.head_logd, &st.h, &d_logd);

        if let Some(blocks) = &d_blocks {
            let b = &blocks[k];
            let d_lvec = DVector::from_fn(n * r, |idx, _| b[(idx / r, idx % r)]);
            d_h += grad.head_l.accumulate(&params.head_l, &st.h, &d_lvec);
        }
        if k == w - 1 {
            if let Some(dl) = &d_logits {
                d_h += grad.head_logits.accumulate(&params.head_logits, &st.h, dl);
            }
        }
        let d_z = d_h.component_mul(&st.h.map(|v| 1.0 - v * v));
        grad.backbone.accumulate(&params.backbone, &st.lags, &d_z);
    }

    let flat = grad.flat();
    if let Some(bad) = flat.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of {}",
            params.flat_names()[bad]
        )));
    }
    Ok((value, flat))
}

/// Nested ablation ladder, weakest first: `NoRewiring`, `NoVolatility`,
/// `ReweightOnly`, `None` (full model).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Curvature reweighting, learned projection, volatility scaling.
    None,
    /// Reweighting with a frozen random projection, volatility scaling on.
    ReweightOnly,
    /// Reweighting with a frozen random projection, no volatility scaling.
    NoVolatility,
    /// Plain Laplacian (`lambda = 0`), frozen projection, no volatility scaling.
    NoRewiring,
}

impl Ablation {
    pub const LADDER: [Ablation; 4] = [
        Ablation::NoRewiring,
        Ablation::NoVolatility,
        Ablation::ReweightOnly,
        Ablation::None,
    ];

    pub fn rewiring(self) -> bool {
        !matches!(self, Ablation::NoRewiring)
    }

    pub fn learn_projection(self) -> bool {
        matches!(self, Ablation::None)
    }

    pub fn volatility_scaling(self) -> bool {
        matches!(self, Ablation::None | Ablation::ReweightOnly)
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::ReweightOnly => "reweight-only",
            Ablation::NoVolatility => "no-volatility",
            Ablation::NoRewiring => "no-rewiring",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full" => Ok(Ablation::None),
            "no-volatility" => Ok(Ablation::NoVolatility),
            "reweight-only" => Ok(Ablation::ReweightOnly),
            "no-rewiring" => Ok(Ablation::NoRewiring),
            other => Err(Error::InvalidParameter(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub max_steps: usize,
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub window: usize,
    pub rank: usize,
    pub mixtures: usize,
    pub lags: usize,
    pub hidden: usize,
    /// Windows per gradient step.
    pub batch_windows: usize,
    pub length_scale_step: f64,
    pub seed: u64,
    /// Validation is run every this many steps and after the last step.
    pub eval_every: usize,
    /// Cap on validation windows (evenly spaced); 0 means all.
    pub max_val_windows: usize,
    pub head: CovarianceHead,
    pub ablation: Ablation,
    /// Additional groups held fixed at their initial values.
    pub frozen: Vec<ParamGroup>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            max_epochs: 100,
            max_steps: 10_000,
            grad_clip: 10.0,
            weight_decay: 1e-8,
            window: 12,
            rank: 10,
            mixtures: 4,
            lags: 12,
            hidden: 40,
            batch_windows: 20,
            length_scale_step: 1.0,
            seed: 42,
            eval_every: 100,
            max_val_windows: 0,
            head: CovarianceHead::Structured,
            ablation: Ablation::None,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("learning_rate", self.learning_rate > 0.0),
            ("max_epochs", self.max_epochs > 0),
            ("max_steps", self.max_steps > 0),
            ("grad_clip", self.grad_clip > 0.0),
            ("weight_decay", self.weight_decay >= 0.0),
            ("window", self.window > 0),
            ("rank", self.rank > 0),
            ("mixtures", self.mixtures > 0),
            ("lags", self.lags > 0),
            ("hidden", self.hidden > 0),
            ("batch_windows", self.batch_windows > 0),
            ("length_scale_step", self.length_scale_step > 0.0),
            ("eval_every", self.eval_every > 0),
        ];
        for (name, ok) in pos {
            if !ok {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn dims(&self, nodes: usize) -> ModelDims {
        ModelDims {
            nodes,
            lags: self.lags,
            hidden: self.hidden,
            rank: self.rank,
            mixtures: self.mixtures,
            window: self.window,
        }
    }

    fn frozen_groups(&self) -> Vec<ParamGroup> {
        let mut g = self.frozen.clone();
        if !self.ablation.rewiring() {
            g.extend([ParamGroup::Lambda, ParamGroup::Kappa0, ParamGroup::Tau]);
        }
        if !self.ablation.learn_projection() {
            g.push(ParamGroup::Projection);
        }
        if self.head == CovarianceHead::DiagonalOnly {
            g.extend([
                ParamGroup::HeadL,
                ParamGroup::HeadLogits,
                ParamGroup::Alpha,
                ParamGroup::Beta,
                ParamGroup::Lambda,
                ParamGroup::Kappa0,
                ParamGroup::Tau,
                ParamGroup::Projection,
            ]);
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub step: usize,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_nll: Option<f64>,
    pub best_val_nll: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub trace: Vec<TraceEntry>,
    pub best_val_nll: f64,
    pub steps: usize,
}

/// Training input: the full series, split boundaries and graph snapshots.
#[derive(Debug, Clone, Copy)]
pub struct FitData<'a> {
    pub values: &'a DMatrix<f64>,
    pub train_end: usize,
    pub val_end: usize,
    pub graphs: &'a GraphSnapshots,
}

/// Per-node mean and variance of rows `0..end`.
pub fn node_statistics(values: &DMatrix<f64>, end: usize) -> (DVector<f64>, DVector<f64>) {
    let n = values.ncols();
    let t = end.max(1) as f64;
    let mean = DVector::from_fn(n, |i, _| (0..end).map(|s| values[(s, i)]).sum::<f64>() / t);
    let var = DVector::from_fn(n, |i, _| {
        (0..end).map(|s| (values[(s, i)] - mean[i]).powi(2)).sum::<f64>() / t
    });
    (mean, var)
}

/// Mean window NLL over `ends`, each window with its own graph snapshot.
pub fn mean_window_nll(
    params: &ModelParams,
    values: &DMatrix<f64>,
    ends: &[usize],
    graphs: &GraphSnapshots,
    cache: &CurvatureCache,
) -> Result<f64> {
    let parts: Vec<Result<f64>> = ends
        .par_iter()
        .map(|&t| {
            let ctx = cache.context(graphs.at(t).into_owned());
            window_nll(params, values, t, &ctx)
        })
        .collect();
    let mut total = 0.0;
    for p in parts {
        total += p?;
    }
    Ok(total / ends.len() as f64)
}

fn evenly_spaced(items: Vec<usize>, cap: usize) -> Vec<usize> {
    if cap == 0 || items.len() <= cap {
        return items;
    }
    (0..cap).map(|k| items[k * items.len() / cap]).collect()
}

fn project(params: &mut ModelParams) {
    let sp = &mut params.spatial;
    sp.alpha = sp.alpha.max(1e-6);
    sp.beta = sp.beta.max(0.0);
    sp.lambda = sp.lambda.max(0.0);
    sp.tau = sp.tau.max(1e-3);
}

/// Clipped, weight-decayed gradient descent over randomly ordered windows;
/// returns the parameters with the best validation NLL.
pub fn fit(data: FitData<'_>, config: &TrainConfig) -> Result<FitResult> {
    config.validate()?;
    let values = data.values;
    let n = values.ncols();
    let dims = config.dims(n);
    if data.graphs.n() != n {
        return Err(Error::ShapeMismatch(format!(
            "graph has {} nodes, data has {n}",
            data.graphs.n()
        )));
    }
    let first = first_window_end(&dims);
    if data.train_end > values.nrows() || data.val_end > values.nrows() || data.val_end < data.train_end {
        return Err(Error::InvalidParameter("split boundaries out of range".into()));
    }
    let train_ends: Vec<usize> = (first..data.train_end).collect();
    if train_ends.is_empty() {
        return Err(Error::InvalidParameter(format!(
            "training split of {} steps is too short for {} lags and a {}-step window",
            data.train_end, dims.lags, dims.window
        )));
    }
    let val_ends = evenly_spaced(
        (first.max(data.train_end)..data.val_end).collect(),
        config.max_val_windows,
    );

    let (mean, var) = node_statistics(values, data.train_end);
    let mut init_rng = substream(config.seed, "init");
    let mut params = ModelParams::init(dims, config.head, config.length_scale_step, &mean, &var, &mut init_rng)?;
    if !config.ablation.rewiring() {
        params.spatial.lambda = 0.0;
    }
    let frozen = config.frozen_groups();
    let mask: Vec<bool> = params
        .flat_groups()
        .iter()
        .map(|g| !frozen.contains(g))
        .collect();

    let cache = CurvatureCache::new(data.graphs.base());
    let mut rng = substream(config.seed, "training");
    let steps_per_epoch = train_ends.len().div_ceil(config.batch_windows);
    let total_steps = config.max_steps.min(config.max_epochs * steps_per_epoch);

    let evaluate = |p: &ModelParams| -> Result<f64> {
        if val_ends.is_empty() {
            Ok(f64::NAN)
        } else {
            mean_window_nll(p, values, &val_ends, data.graphs, &cache)
        }
    };

    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut trace = Vec::new();
    let mut order = train_ends.clone();
    let mut cursor = order.len();
    let mut epoch = 0;
    let mut last_loss = f64::NAN;

    for step in 1..=total_steps {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
            epoch += 1;
        }
        let batch: Vec<usize> = order[cursor..(cursor + config.batch_windows).min(order.len())].to_vec();
        cursor += batch.len();

        // one spatial graph per step: batch-averaged, symmetrised snapshots
        let snaps: Vec<DMatrix<f64>> = batch
            .iter()
            .map(|&t| data.graphs.at(t).weights().clone())
            .collect();
        let graph = symmetrize(&batch_average(&snaps)?)?;
        let ctx = cache.context(graph);

        let parts: Vec<Result<(f64, Vec<f64>)>> = batch
            .par_iter()
            .map(|&t| window_gradient(&params, values, t, &ctx))
            .collect();
        let mut loss = 0.0;
        let mut grad = vec![0.0; params.num_trainable()];
        let mut failure = None;
        for p in parts {
            match p {
                Ok((v, g)) => {
                    loss += v;
                    for (a, b) in grad.iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            }
        }
        let scale = 1.0 / batch.len() as f64;
        loss *= scale;
        if failure.is_some() || !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                last_good: Box::new(best),
            });
        }
        last_loss = loss;

        let mut theta = params.flat();
        for k in 0..grad.len() {
            grad[k] = if mask[k] {
                grad[k] * scale + config.weight_decay * theta[k]
            } else {
                0.0
            };
        }
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = if norm > config.grad_clip {
            config.grad_clip / norm
        } else {
            1.0
        };
        for k in 0..grad.len() {
            theta[k] -= config.learning_rate * clip * grad[k];
        }
        params.set_flat(&theta)?;
        project(&mut params);

        let val = if step % config.eval_every == 0 || step == total_steps {
            let v = evaluate(&params).map_err(|_| Error::Diverged {
                step,
                last_good: Box::new(best.clone()),
            })?;
            if !val_ends.is_empty() && !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    last_good: Box::new(best),
                });
            }
            if val_ends.is_empty() || v < best_val {
                best_val = if val_ends.is_empty() { loss } else { v };
                best = params.clone();
            }
            Some(v)
        } else {
            None
        };
        trace.push(TraceEntry {
            step,
            epoch,
            train_loss: loss,
            val_nll: val,
            best_val_nll: best_val,
        });
    }
    let _ = last_loss;
    Ok(FitResult {
        params: best,
        trace,
        best_val_nll: best_val,
        steps: total_steps,
    })
}

/// Writes the loss trace as CSV: `step,epoch,train_loss,val_nll,best_val_nll`.
pub fn write_trace_csv<W: std::io::Write>(trace: &[TraceEntry], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["step", "epoch", "train_loss", "val_nll", "best_val_nll"])?;
    for e in trace {
        wtr.write_record([
            e.step.to_string(),
            e.epoch.to_string(),
            format!("{}", e.train_loss),
            e.val_nll.map(|v| format!("{v}")).unwrap_or_default(),
            format!("{}", e.best_val_nll),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// One-step means for rows `from..to` (each needs `P` earlier rows).
pub fn one_step_means(params: &ModelParams, values: &DMatrix<f64>, from: usize, to: usize) -> Result<DMatrix<f64>> {
    let p = params.dims.lags;
    if from < p || to > values.nrows() || from > to {
        return Err(Error::InvalidParameter(format!(
            "one-step means need {p} lags before row {from}"
        )));
    }
    let n = params.dims.nodes;
    let mut out = DMatrix::zeros(to - from, n);
    for s in from..to {
        let h = encode_flat(params, &lag_vector(values, s, p));
        out.row_mut(s - from).copy_from(&params.head_mu.forward(&h).transpose());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::DEFAULT_SIGMA_MIN;
    use rand::SeedableRng;

    fn small_params(seed: u64, head: CovarianceHead) -> ModelParams {
        let dims = ModelDims {
            nodes: 3,
            lags: 2,
            hidden: 4,
            rank: 2,
            mixtures: 2,
            window: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(
            dims,
            head,
            1.0,
            &DVector::from_element(3, 0.1),
            &DVector::from_element(3, 1.0),
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn encode_zero_weights_gives_zero_state() {
        let mut p = small_params(1, CovarianceHead::Structured);
        p.backbone.weight.fill(0.0);
        p.backbone.bias.fill(0.0);
        let hist = vec![DVector::from_element(3, 2.0); 2];
        assert_eq!(encode(&p, &hist).unwrap(), DVector::zeros(4));
        assert!(encode(&p, &hist[..1]).is_err());
    }

    #[test]
    fn encode_scalar_is_tanh() {
        let dims = ModelDims {
            nodes: 1,
            lags: 1,
            hidden: 1,
            rank: 1,
            mixtures: 1,
            window: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ModelParams::init(
            dims,
            CovarianceHead::Structured,
            1.0,
            &DVector::zeros(1),
            &DVector::from_element(1, 1.0),
            &mut rng,
        )
        .unwrap();
        p.backbone.weight[(0, 0)] = 1.0;
        p.backbone.bias[0] = 0.0;
        let h = encode(&p, &[DVector::from_element(1, 0.7)]).unwrap();
        assert_eq!(h[0], 0.7f64.tanh());
    }

    #[test]
    fn encode_matches_manual_recomputation() {
        let p = small_params(2, CovarianceHead::Structured);
        let hist = vec![
            DVector::from_vec(vec![0.1, -0.2, 0.3]),
            DVector::from_vec(vec![1.0, 0.5, -0.7]),
        ];
        let h = encode(&p, &hist).unwrap();
        for k in 0..4 {
            let mut z = p.backbone.bias[k];
            for (lag, obs) in hist.iter().enumerate() {
                for i in 0..3 {
                    z += p.backbone.weight[(k, lag * 3 + i)] * obs[i];
                }
            }
            assert!((h[k] - z.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn heads_at_zero_state_are_biases() {
        let p = small_params(3, CovarianceHead::Structured);
        let out = heads(&p, &DVector::zeros(4));
        assert_eq!(out.mu, p.head_mu.bias);
        assert_eq!(out.d, p.head_logd.bias.map(|v| v.exp() + D_FLOOR));
        assert_eq!(out.logits, p.head_logits.bias);
        assert_eq!(out.l[(1, 0)], p.head_l.bias[2]);
    }

    #[test]
    fn flat_round_trip() {
        let p = small_params(4, CovarianceHead::Structured);
        let mut q = p.zeros_like();
        q.spatial.sigma_min = p.spatial.sigma_min;
        q.set_flat(&p.flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.flat_names().len(), p.num_trainable());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let p = small_params(5, CovarianceHead::Structured);
        let json = serde_json::to_string(&p.to_checkpoint()).unwrap();
        let ck: Checkpoint = serde_json::from_str(&json).unwrap();
        assert_eq!(ModelParams::from_checkpoint(&ck).unwrap(), p);
        assert!(json.contains("\"spatial.kappa0\""));
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("none".parse::<Ablation>().unwrap(), Ablation::None);
        assert_eq!("no-rewiring".parse::<Ablation>().unwrap(), Ablation::NoRewiring);
        assert!("bogus".parse::<Ablation>().is_err());
        assert!(!Ablation::NoRewiring.rewiring());
        assert!(!Ablation::ReweightOnly.learn_projection());
        assert!(!Ablation::NoVolatility.volatility_scaling());
        for a in Ablation::LADDER {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
    }

    #[test]
    fn config_defaults_match_reference_hyperparameters() {
        let c = TrainConfig::default();
        assert_eq!(c.weight_decay, 1e-8);
        assert_eq!(c.grad_clip, 10.0);
        assert_eq!((c.window, c.mixtures, c.rank, c.hidden), (12, 4, 10, 40));
        assert_eq!((c.max_epochs, c.max_steps, c.batch_windows), (100, 10_000, 20));
        assert_eq!(DEFAULT_SIGMA_MIN, 1e-4);
    }
}

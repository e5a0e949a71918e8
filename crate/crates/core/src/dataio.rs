//! Datasets: synthetic generation, wide-CSV IO, distance-kernel graphs,
//! dynamic graph snapshots and chronological splits.

use std::borrow::Cow;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{is_connected, WeightedGraph};
use crate::linalg::{chol_lower, sym_eigenvalues, symmetrize_in_place};
use crate::rngs::{indexed_substream, substream, substream_seed};

/// Kernel values below this are dropped when building distance graphs.
pub const KERNEL_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `T x N`, one row per time step.
    pub values: DMatrix<f64>,
    pub coords: Option<Vec<[f64; 2]>>,
    pub timestamps: Option<Vec<String>>,
    pub name: String,
    pub frequency: Option<String>,
}

impl Dataset {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::ShapeMismatch("dataset needs T >= 1 and N >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset values".into()));
        }
        Ok(Self {
            values,
            coords: None,
            timestamps: None,
            name: String::new(),
            frequency: None,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn nodes(&self) -> usize {
        self.values.ncols()
    }

    /// Rows `range` as a new dataset (coordinates and metadata carried over).
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            values: self.values.rows(range.start, range.len()).into_owned(),
            coords: self.coords.clone(),
            timestamps: self
                .timestamps
                .as_ref()
                .map(|ts| ts[range.clone()].to_vec()),
            name: self.name.clone(),
            frequency: self.frequency.clone(),
        }
    }

    /// Writes the wide format `t,node_0,...,node_{N-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.nodes()).map(|i| format!("node_{i}")));
        wtr.write_record(&header)?;
        for t in 0..self.steps() {
            let mut rec = Vec::with_capacity(self.nodes() + 1);
            rec.push(match &self.timestamps {
                Some(ts) => ts[t].clone(),
                None => t.to_string(),
            });
            rec.extend(self.values.row(t).iter().map(|v| format!("{v}")));
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parses the wide format. Rows are taken in file order.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.len() < 2 || &header[0] != "t" {
            return Err(Error::Parse {
                row: 0,
                message: "header must be `t,node_0,...`".into(),
            });
        }
        let n = header.len() - 1;
        let mut data = Vec::new();
        let mut stamps = Vec::new();
        for (idx, rec) in rdr.records().enumerate() {
            let row = idx + 1;
            let rec = rec.map_err(|e| Error::Parse {
                row,
                message: e.to_string(),
            })?;
            if rec.len() != n + 1 {
                return Err(Error::Parse {
                    row,
                    message: format!("expected {} fields, found {}", n + 1, rec.len()),
                });
            }
            stamps.push(rec[0].to_string());
            for (col, cell) in rec.iter().skip(1).enumerate() {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    row,
                    message: format!("non-numeric value {cell:?} in column node_{col}"),
                })?;
                data.push(v);
            }
        }
        let t = stamps.len();
        if t == 0 {
            return Err(Error::Parse {
                row: 1,
                message: "no data rows".into(),
            });
        }
        let mut ds = Dataset::new(DMatrix::from_row_slice(t, n, &data))?;
        ds.timestamps = Some(stamps);
        Ok(ds)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub fn load_csv(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    let mut ds = Dataset::read_csv(std::io::BufReader::new(f))?;
    ds.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(ds)
}

/// `exp(-d^2 / (2 sigma^2))`.
pub fn gaussian_kernel(distance: f64, sigma: f64) -> f64 {
    (-(distance * distance) / (2.0 * sigma * sigma)).exp()
}

/// Thresholded Gaussian kernel over a distance matrix; entries below
/// `threshold` are zeroed, entries equal to it are kept.
pub fn kernel_graph(distances: &DMatrix<f64>, sigma: f64, threshold: f64) -> Result<WeightedGraph> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::DegenerateCoordinates);
    }
    let n = distances.nrows();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = gaussian_kernel(distances[(i, j)], sigma);
            if a >= threshold {
                w[(i, j)] = a;
                w[(j, i)] = a;
            }
        }
    }
    WeightedGraph::new(w)
}

/// Graph from planar coordinates: thresholded Gaussian kernel with `sigma`
/// the (population) standard deviation of all pairwise distances.
pub fn build_graph_from_coords(coords: &[[f64; 2]]) -> Result<WeightedGraph> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::InvalidParameter("need at least two nodes".into()));
    }
    if coords.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("coordinates".into()));
    }
    let dist = DMatrix::from_fn(n, n, |i, j| {
        let dx = coords[i][0] - coords[j][0];
        let dy = coords[i][1] - coords[j][1];
        (dx * dx + dy * dy).sqrt()
    });
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            pairs.push(dist[(i, j)]);
        }
    }
    let mean = pairs.iter().sum::<f64>() / pairs.len() as f64;
    let var = pairs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / pairs.len() as f64;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::DegenerateCoordinates);
    }
    kernel_graph(&dist, sigma, KERNEL_THRESHOLD)
}

/// Per-step graphs. `Perturbed` multiplies every edge weight of the base graph
/// by an independent uniform factor in `[low, high]` drawn from stream `t`.
#[derive(Debug, Clone, PartialEq)]
pub enum GraphSnapshots {
    Static(WeightedGraph),
    Perturbed {
        base: WeightedGraph,
        seed: u64,
        low: f64,
        high: f64,
    },
}

impl GraphSnapshots {
    /// The default `[0.8, 1.2]` perturbation of `base`.
    pub fn perturbed(base: WeightedGraph, seed: u64) -> Self {
        GraphSnapshots::Perturbed {
            base,
            seed: substream_seed(seed, "graph-dynamics"),
            low: 0.8,
            high: 1.2,
        }
    }

    pub fn base(&self) -> &WeightedGraph {
        match self {
            GraphSnapshots::Static(g) => g,
            GraphSnapshots::Perturbed { base, .. } => base,
        }
    }

    pub fn n(&self) -> usize {
        self.base().n()
    }

    pub fn at(&self, t: usize) -> Cow<'_, WeightedGraph> {
        match self {
            GraphSnapshots::Static(g) => Cow::Borrowed(g),
            GraphSnapshots::Perturbed {
                base,
                seed,
                low,
                high,
            } => {
                let mut rng = indexed_substream(*seed, "snapshot", t as u64);
                let n = base.n();
                let mut w = base.weights().clone();
                for i in 0..n {
                    for j in (i + 1)..n {
                        if w[(i, j)] > 0.0 {
                            let f = rng.random_range(*low..=*high);
                            w[(i, j)] *= f;
                            w[(j, i)] = w[(i, j)];
                        }
                    }
                }
                Cow::Owned(WeightedGraph::new(w).expect("perturbation keeps graph valid"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    pub steps: usize,
    pub seed: u64,
    /// AR(1) coefficient of the deseasonalised process, `|phi| < 1`.
    pub ar_coef: f64,
    /// Noise precision `a I + b L`.
    pub precision_diag: f64,
    pub laplacian_weight: f64,
    pub seasonal_amplitude: f64,
    pub seasonal_period: f64,
    pub obs_noise: f64,
    pub max_graph_retries: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            steps: 2000,
            seed: 42,
            ar_coef: 0.7,
            precision_diag: 1.0,
            laplacian_weight: 2.0,
            seasonal_amplitude: 1.0,
            seasonal_period: 24.0,
            obs_noise: 0.1,
            max_graph_retries: 50,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidParameter(m.to_string()));
        if self.nodes < 2 || self.steps < 1 {
            return bad("synthetic data needs nodes >= 2 and steps >= 1");
        }
        if !(self.ar_coef.abs() < 1.0) {
            return bad("AR coefficient must satisfy |phi| < 1");
        }
        if !(self.precision_diag > 0.0) || !(self.laplacian_weight >= 0.0) {
            return bad("noise precision needs a > 0 and b >= 0");
        }
        if !(self.obs_noise >= 0.0) || !(self.seasonal_period > 0.0) {
            return bad("obs_noise must be >= 0 and seasonal_period > 0");
        }
        if !self.seasonal_amplitude.is_finite() {
            return bad("seasonal amplitude must be finite");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// Innovation covariance `(a I + b L)⁻¹ + obs_noise² I`.
    pub noise_covariance: DMatrix<f64>,
    pub graph: WeightedGraph,
    pub coords: Vec<[f64; 2]>,
    /// Per-node seasonal phase.
    pub phases: Vec<f64>,
}

impl SynthOutput {
    pub fn seasonal(&self, config: &SynthConfig, t: usize, node: usize) -> f64 {
        seasonal(config, t, self.phases[node])
    }
}

fn seasonal(config: &SynthConfig, t: usize, phase: f64) -> f64 {
    config.seasonal_amplitude
        * (2.0 * std::f64::consts::PI * t as f64 / config.seasonal_period + phase).sin()
}

/// Seasonal AR(1) field driven by graph-correlated Gaussian innovations.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let n = config.nodes;
    let mut rng = substream(config.seed, "data");

    let mut attempt = 0;
    let (coords, graph) = loop {
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|_| [rng.random::<f64>(), rng.random::<f64>()])
            .collect();
        if let Ok(graph) = build_graph_from_coords(&coords) {
            if is_connected(&sym_eigenvalues(&graph.laplacian())) {
                break (coords, graph);
            }
        }
        attempt += 1;
        if attempt > config.max_graph_retries {
            return Err(Error::Disconnected);
        }
    };

    let precision = DMatrix::identity(n, n) * config.precision_diag
        + graph.laplacian() * config.laplacian_weight;
    let mut noise_covariance = crate::linalg::cholesky(&precision, "noise precision")?.inverse();
    for i in 0..n {
        noise_covariance[(i, i)] += config.obs_noise * config.obs_noise;
    }
    symmetrize_in_place(&mut noise_covariance);
    let chol = chol_lower(&noise_covariance, "noise covariance")?;

    let phases: Vec<f64> = (0..n)
        .map(|_| rng.random_range(0.0..2.0 * std::f64::consts::PI))
        .collect();

    let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
        &chol * z
    };

    let phi = config.ar_coef;
    let mut values = DMatrix::zeros(config.steps, n);
    let mut dev = draw(&mut rng) / (1.0 - phi * phi).sqrt();
    for t in 0..config.steps {
        if t > 0 {
            dev = dev * phi + draw(&mut rng);
        }
        for i in 0..n {
            values[(t, i)] = seasonal(config, t, phases[i]) + dev[i];
        }
    }
    let mut dataset = Dataset::new(values)?;
    dataset.coords = Some(coords.clone());
    dataset.name = "synthetic".into();
    Ok(SynthOutput {
        dataset,
        noise_covariance,
        graph,
        coords,
        phases,
    })
}

/// Boundaries `(train_end, val_end)` from floor-cumulative fractions.
pub fn split_indices(steps: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize)> {
    let (a, b, c) = fractions;
    if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "split fractions must be positive and sum to 1, got ({a}, {b}, {c})"
        )));
    }
    let t = steps as f64;
    // the 1e-9 slack absorbs representation error in sums such as 0.7 + 0.1
    let train_end = (t * a + 1e-9).floor() as usize;
    let val_end = (t * (a + b) + 1e-9).floor() as usize;
    if train_end == 0 || val_end == train_end || val_end >= steps {
        return Err(Error::InvalidParameter(format!(
            "split of {steps} steps leaves an empty part"
        )));
    }
    Ok((train_end, val_end))
}

pub fn chronological_split(
    ds: &Dataset,
    fractions: (f64, f64, f64),
) -> Result<(Dataset, Dataset, Dataset)> {
    let (train_end, val_end) = split_indices(ds.steps(), fractions)?;
    Ok((
        ds.slice(0..train_end),
        ds.slice(train_end..val_end),
        ds.slice(val_end..ds.steps()),
    ))
}

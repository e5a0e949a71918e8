//! Weighted undirected graphs: construction, Laplacians, curvature-driven
//! reweighting and spectral / conductance diagnostics.

mod curvature;
mod spectral;

pub use curvature::{
    balanced_forman_curvature, bottleneck_scores, edge_curvatures, reweight, softplus, CurvatureReport,
    EdgeCurvature, Support, DEFAULT_SUPPORT_THRESHOLD,
};
pub use spectral::{
    cheeger_brute, cut_conductance, diagnostics, is_connected, lambda_second_largest,
    scaled_kirchhoff, spectrum, CutConductance, DiagnosticsReport, Ratios,
};

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::Deserialize;

use crate::error::{Error, Result};

/// Symmetric, entrywise nonnegative adjacency with an empty diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    weights: DMatrix<f64>,
}

impl WeightedGraph {
    /// Validates `weights` and wraps it. Symmetry is checked exactly.
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if !weights.is_square() || weights.nrows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "adjacency must be a nonempty square matrix, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        let n = weights.nrows();
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return Err(Error::InvalidGraph(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() {
                    return Err(Error::NonFinite("adjacency".into()));
                }
                if w < 0.0 {
                    return Err(Error::NegativeWeight { i, j, weight: w });
                }
                if w != weights[(j, i)] {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            weights: DMatrix::zeros(n, n),
        }
    }

    /// Builds a graph from undirected `(i, j, w)` triples. Repeated pairs are summed.
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut w = DMatrix::zeros(n, n);
        for &(i, j, weight) in edges {
            if i >= n || j >= n {
                return Err(Error::InvalidGraph(format!("edge ({i}, {j}) out of range for {n} nodes")));
            }
            if i == j {
                return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
            }
            if weight < 0.0 {
                return Err(Error::NegativeWeight { i, j, weight });
            }
            w[(i, j)] += weight;
            w[(j, i)] += weight;
        }
        Self::new(w)
    }

    pub fn n(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn into_weights(self) -> DMatrix<f64> {
        self.weights
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// Upper-triangle edges `(i, j, w)` with `i < j` and `w > 0`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let w = self.weights[(i, j)];
                if w > 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    /// Weighted degree (row sum) of every node.
    pub fn degrees(&self) -> Vec<f64> {
        self.weights.row_iter().map(|r| r.sum()).collect()
    }

    /// Unnormalised Laplacian `L = diag(W 1) - W`.
    pub fn laplacian(&self) -> DMatrix<f64> {
        laplacian(self)
    }

    /// Writes the edge list as CSV with header `i,j,w`.
    pub fn write_edge_list<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(out);
        wtr.write_record(["i", "j", "w"])?;
        for (i, j, w) in self.edges() {
            wtr.write_record([i.to_string(), j.to_string(), format!("{w}")])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads an `i,j,w` edge list. `n` defaults to the largest id plus one.
    pub fn read_edge_list<R: Read>(input: R, n: Option<usize>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            i: usize,
            j: usize,
            w: f64,
        }
        let mut rdr = csv::Reader::from_reader(input);
        let mut edges = Vec::new();
        for (idx, rec) in rdr.deserialize::<Row>().enumerate() {
            let row = rec.map_err(|e| Error::Parse {
                row: idx + 1,
                message: e.to_string(),
            })?;
            edges.push((row.i, row.j, row.w));
        }
        let max_id = edges.iter().map(|&(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
        let n = match n {
            Some(n) if n < max_id => {
                return Err(Error::InvalidGraph(format!(
                    "edge list references node {} but graph has {n} nodes",
                    max_id - 1
                )))
            }
            Some(n) => n,
            None => max_id,
        };
        Self::from_edges(n, &edges)
    }

    pub fn save_edge_list(&self, path: &std::path::Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_edge_list(std::io::BufWriter::new(f))
    }

    pub fn load_edge_list(path: &std::path::Path, n: Option<usize>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_edge_list(std::io::BufReader::new(f), n)
    }
}

/// Entrywise mean of a batch of equally shaped adjacency matrices.
pub fn batch_average(adjacencies: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = adjacencies.first().ok_or(Error::EmptyBatch)?;
    let shape = first.shape();
    let mut acc = DMatrix::zeros(shape.0, shape.1);
    for (b, a) in adjacencies.iter().enumerate() {
        if a.shape() != shape {
            return Err(Error::ShapeMismatch(format!(
                "adjacency {b} is {:?}, expected {:?}",
                a.shape(),
                shape
            )));
        }
        acc += a;
    }
    Ok(acc / adjacencies.len() as f64)
}

/// `W = (A + Aᵀ)/2` with the diagonal cleared.
pub fn symmetrize(a: &DMatrix<f64>) -> Result<WeightedGraph> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "adjacency must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in 0..n {
            let v = a[(i, j)];
            if !v.is_finite() {
                return Err(Error::NonFinite("adjacency".into()));
            }
            if v < 0.0 {
                return Err(Error::NegativeWeight { i, j, weight: v });
            }
        }
    }
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            w[(i, j)] = v;
            w[(j, i)] = v;
        }
    }
    WeightedGraph::new(w)
}

pub fn laplacian(g: &WeightedGraph) -> DMatrix<f64> {
    let w = g.weights();
    let mut l = -w.clone();
    for (i, d) in g.degrees().into_iter().enumerate() {
        l[(i, i)] = d;
    }
    l
}

use serde::{Deserialize, Serialize};

use super::WeightedGraph;
use crate::error::{Error, Result};

/// Weights at or below this value are treated as absent when building the
/// combinatorial support used for curvature.
pub const DEFAULT_SUPPORT_THRESHOLD: f64 = 1e-12;

/// Unweighted support of a graph: `adj[i][j]` iff `w_ij > threshold`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Support {
    adj: Vec<Vec<bool>>,
    neighbors: Vec<Vec<usize>>,
}

impl Support {
    pub fn new(g: &WeightedGraph, threshold: f64) -> Self {
        let n = g.n();
        let mut adj = vec![vec![false; n]; n];
        let mut neighbors = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i != j && g.weight(i, j) > threshold {
                    adj[i][j] = true;
                    neighbors[i].push(j);
                }
            }
        }
        Self { adj, neighbors }
    }

    pub fn n(&self) -> usize {
        self.adj.len()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i][j]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// Upper-triangle edge list `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, nb) in self.neighbors.iter().enumerate() {
            for &j in nb {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Balanced Forman curvature of the edge `(i, j)`.
    ///
    /// With `#tri` the triangles on the edge, `#sq_i` the neighbours `k` of `i`
    /// closing a 4-cycle `i-k-w-j` without diagonals (`k !~ j`, `w !~ i`), and
    /// `gamma` the largest number of such cycles passing through one node:
    ///
    /// `2/d_i + 2/d_j - 2 + 2#tri/max(d) + #tri/min(d) + (#sq_i + #sq_j)/(gamma * max(d))`
    ///
    /// The 4-cycle term is zero when there are no 4-cycles.
    pub fn curvature(&self, i: usize, j: usize) -> Result<f64> {
        let n = self.n();
        if i >= n || j >= n || i == j || !self.adj[i][j] {
            return Err(Error::NotAnEdge(i, j));
        }
        let di = self.degree(i) as f64;
        let dj = self.degree(j) as f64;
        let dmax = di.max(dj);
        let dmin = di.min(dj);

        let triangles = self.neighbors[i]
            .iter()
            .filter(|&&k| self.adj[j][k])
            .count() as f64;

        let (sq_i, gamma_i) = self.squares(i, j);
        let (sq_j, gamma_j) = self.squares(j, i);
        let gamma = gamma_i.max(gamma_j);

        let mut kappa = 2.0 / di + 2.0 / dj - 2.0 + 2.0 * triangles / dmax + triangles / dmin;
        if gamma > 0 {
            kappa += (sq_i + sq_j) as f64 / (gamma as f64 * dmax);
        }
        Ok(kappa)
    }

    /// Neighbours of `a` that start a diagonal-free 4-cycle `a-k-w-b`, and the
    /// largest number of such cycles through a single `k`.
    fn squares(&self, a: usize, b: usize) -> (usize, usize) {
        let mut count = 0;
        let mut gamma = 0;
        for &k in &self.neighbors[a] {
            if k == b || self.adj[k][b] {
                continue;
            }
            let through_k = self.neighbors[k]
                .iter()
                .filter(|&&w| w != a && self.adj[w][b] && !self.adj[w][a])
                .count();
            if through_k > 0 {
                count += 1;
                gamma = gamma.max(through_k);
            }
        }
        (count, gamma)
    }
}

/// Balanced Forman curvature of `(i, j)` on the support of `g` (threshold
/// [`DEFAULT_SUPPORT_THRESHOLD`]).
pub fn balanced_forman_curvature(g: &WeightedGraph, edge: (usize, usize)) -> Result<f64> {
    Support::new(g, DEFAULT_SUPPORT_THRESHOLD).curvature(edge.0, edge.1)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeCurvature {
    pub i: usize,
    pub j: usize,
    pub curvature: f64,
    pub score: f64,
}

/// Per-edge curvature and bottleneck score `b = softplus(tau (kappa0 - kappa))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureReport {
    pub edges: Vec<EdgeCurvature>,
    pub kappa0: f64,
    pub tau: f64,
    pub support_threshold: f64,
}

impl CurvatureReport {
    /// Scores precomputed `(i, j, kappa)` triples.
    pub fn from_curvatures(
        curvatures: &[(usize, usize, f64)],
        kappa0: f64,
        tau: f64,
        support_threshold: f64,
    ) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
        }
        if !kappa0.is_finite() {
            return Err(Error::InvalidParameter("kappa0 must be finite".into()));
        }
        let edges = curvatures
            .iter()
            .map(|&(i, j, curvature)| EdgeCurvature {
                i,
                j,
                curvature,
                score: softplus(tau * (kappa0 - curvature)),
            })
            .collect();
        Ok(Self {
            edges,
            kappa0,
            tau,
            support_threshold,
        })
    }

    pub fn count_below_threshold(&self) -> usize {
        self.edges.iter().filter(|e| e.curvature < self.kappa0).count()
    }
}

/// Curvature of every support edge, `i < j`.
pub fn edge_curvatures(g: &WeightedGraph, threshold: f64) -> Vec<(usize, usize, f64)> {
    let support = Support::new(g, threshold);
    support
        .edges()
        .into_iter()
        .map(|(i, j)| {
            let k = support.curvature(i, j).expect("support edge");
            (i, j, k)
        })
        .collect()
}

pub fn bottleneck_scores(g: &WeightedGraph, kappa0: f64, tau: f64) -> Result<CurvatureReport> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!("tau must be positive, got {tau}")));
    }
    let curv = edge_curvatures(g, DEFAULT_SUPPORT_THRESHOLD);
    CurvatureReport::from_curvatures(&curv, kappa0, tau, DEFAULT_SUPPORT_THRESHOLD)
}

/// `W'_ij = W_ij (1 + lambda b_ij)` on every scored edge; other entries are untouched.
pub fn reweight(g: &WeightedGraph, report: &CurvatureReport, lambda: f64) -> Result<WeightedGraph> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    let n = g.n();
    let support_edges = g
        .edges()
        .iter()
        .filter(|e| e.2 > report.support_threshold)
        .count();
    if support_edges != report.edges.len() {
        return Err(Error::ShapeMismatch(format!(
            "report has {} edges, graph has {support_edges}",
            report.edges.len()
        )));
    }
    let mut w = g.weights().clone();
    for e in &report.edges {
        if e.i >= n || e.j >= n || g.weight(e.i, e.j) <= report.support_threshold {
            return Err(Error::NotAnEdge(e.i, e.j));
        }
        let v = g.weight(e.i, e.j) * (1.0 + lambda * e.score);
        w[(e.i, e.j)] = v;
        w[(e.j, e.i)] = v;
    }
    WeightedGraph::new(w)
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::WeightedGraph;
use crate::error::{Error, Result};
use crate::linalg::{is_symmetric, sym_eigenvalues};

/// Relative gap below which the second-smallest Laplacian eigenvalue counts as zero.
const CONNECTIVITY_TOL: f64 = 1e-8;

/// Full ascending spectrum of a symmetric matrix.
pub fn spectrum(l: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !is_symmetric(l) {
        return Err(Error::NotSymmetric);
    }
    Ok(sym_eigenvalues(l))
}

/// Connectivity from an ascending Laplacian spectrum: `lambda_2 > 1e-8 * lambda_max`.
pub fn is_connected(spectrum: &[f64]) -> bool {
    match spectrum.len() {
        0 => false,
        1 => true,
        n => {
            let top = spectrum[n - 1];
            top > 0.0 && spectrum[1] > CONNECTIVITY_TOL * top
        }
    }
}

/// Scaled Kirchhoff index `sum_{k>=2} 1/lambda_k` of a connected graph's Laplacian.
pub fn scaled_kirchhoff(l: &DMatrix<f64>) -> Result<f64> {
    let eig = spectrum(l)?;
    if eig.len() < 2 {
        return Err(Error::InvalidParameter(
            "Kirchhoff index needs at least two nodes".into(),
        ));
    }
    if !is_connected(&eig) {
        return Err(Error::Disconnected);
    }
    Ok(eig[1..].iter().map(|v| 1.0 / v).sum())
}

/// `lambda_{n-1}`: the second-largest Laplacian eigenvalue.
pub fn lambda_second_largest(l: &DMatrix<f64>) -> Result<f64> {
    let eig = spectrum(l)?;
    if eig.len() < 2 {
        return Err(Error::InvalidParameter("need at least two nodes".into()));
    }
    Ok(eig[eig.len() - 2])
}

fn membership(n: usize, subset: &[usize]) -> Result<Vec<bool>> {
    let mut in_s = vec![false; n];
    for &v in subset {
        if v >= n {
            return Err(Error::InvalidParameter(format!("node {v} out of range")));
        }
        in_s[v] = true;
    }
    let size = in_s.iter().filter(|&&b| b).count();
    if size == 0 || size == n {
        return Err(Error::TrivialCut);
    }
    Ok(in_s)
}

/// `cut(S) / min(vol(S), vol(V \ S))`.
pub fn cut_conductance(g: &WeightedGraph, subset: &[usize]) -> Result<f64> {
    let n = g.n();
    let in_s = membership(n, subset)?;
    let deg = g.degrees();
    let mut cut = 0.0;
    let mut vol_s = 0.0;
    let mut vol_rest = 0.0;
    for i in 0..n {
        if in_s[i] {
            vol_s += deg[i];
            for j in 0..n {
                if !in_s[j] {
                    cut += g.weight(i, j);
                }
            }
        } else {
            vol_rest += deg[i];
        }
    }
    let denom = vol_s.min(vol_rest);
    if denom <= 0.0 {
        return Err(Error::ZeroVolume);
    }
    Ok(cut / denom)
}

/// Exhaustive Cheeger constant over all `2^(n-1) - 1` cuts (`n <= 20`).
///
/// Cuts are walked in Gray-code order with the last node always outside `S`;
/// cuts whose smaller side has zero volume are skipped. Ties keep the first
/// minimiser found.
pub fn cheeger_brute(g: &WeightedGraph) -> Result<(f64, Vec<usize>)> {
    let n = g.n();
    if n > 20 {
        return Err(Error::TooLarge(n));
    }
    if n < 2 {
        return Err(Error::TrivialCut);
    }
    let deg = g.degrees();
    let total: f64 = deg.iter().sum();
    let free = n - 1;
    let mut in_s = vec![false; n];
    let mut cut = 0.0;
    let mut vol_s = 0.0;
    let mut best: Option<(f64, u32)> = None;
    let mut gray: u32 = 0;
    for step in 1u32..(1u32 << free) {
        let bit = step.trailing_zeros() as usize;
        gray ^= 1 << bit;
        let v = bit;
        let mut to_s = 0.0;
        for (u, &member) in in_s.iter().enumerate() {
            if member {
                to_s += g.weight(v, u);
            }
        }
        if in_s[v] {
            in_s[v] = false;
            cut += 2.0 * to_s - deg[v];
            vol_s -= deg[v];
        } else {
            in_s[v] = true;
            cut += deg[v] - 2.0 * to_s;
            vol_s += deg[v];
        }
        let denom = vol_s.min(total - vol_s);
        if denom <= 0.0 {
            continue;
        }
        let phi = cut.max(0.0) / denom;
        if best.is_none_or(|(b, _)| phi < b) {
            best = Some((phi, gray));
        }
    }
    let (_, mask) = best.ok_or(Error::ZeroVolume)?;
    let subset: Vec<usize> = (0..free).filter(|&v| mask & (1 << v) != 0).collect();
    // recompute directly so the returned value carries no incremental drift
    let phi = cut_conductance(g, &subset)?;
    Ok((phi, subset))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CutConductance {
    pub cut_id: usize,
    pub phi_before: f64,
    pub phi_after: f64,
}

/// Before/after ratios in percent, oriented so that values below 100 mean
/// the rewired graph is better connected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    /// `100 * K(W') / K(W)`.
    pub kirchhoff_pct: f64,
    /// `100 * lambda_{n-1}(L) / lambda_{n-1}(L')`.
    pub spectral_pct: f64,
    /// `100 * phi_W(S) / phi_W'(S)` for the supplied cut with the smallest
    /// original conductance; `None` when no cuts were given.
    pub conductance_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub kirchhoff_before: f64,
    pub kirchhoff_after: f64,
    pub lambda_top_before: f64,
    pub lambda_top_after: f64,
    pub conductance_pairs: Vec<CutConductance>,
    pub ratios: Ratios,
    /// Whether every eigenvalue of `L'` is at least the matching eigenvalue of `L`.
    pub eigenvalue_monotone: bool,
}

pub fn diagnostics(
    g: &WeightedGraph,
    rewired: &WeightedGraph,
    cuts: &[Vec<usize>],
) -> Result<DiagnosticsReport> {
    if g.n() != rewired.n() {
        return Err(Error::ShapeMismatch(format!(
            "graphs have {} and {} nodes",
            g.n(),
            rewired.n()
        )));
    }
    if g
        .weights()
        .iter()
        .zip(rewired.weights().iter())
        .any(|(a, b)| b < a)
    {
        return Err(Error::InvalidParameter(
            "rewired graph must dominate the original entrywise".into(),
        ));
    }
    let l = g.laplacian();
    let lr = rewired.laplacian();
    let kirchhoff_before = scaled_kirchhoff(&l)?;
    let kirchhoff_after = scaled_kirchhoff(&lr)?;
    let eig = spectrum(&l)?;
    let eig_r = spectrum(&lr)?;
    let n = eig.len();
    let lambda_top_before = eig[n - 2];
    let lambda_top_after = eig_r[n - 2];
    let tol = 1e-10 * (1.0 + eig_r[n - 1].abs());
    let eigenvalue_monotone = eig.iter().zip(&eig_r).all(|(a, b)| *b >= *a - tol);

    let mut conductance_pairs = Vec::with_capacity(cuts.len());
    for (cut_id, s) in cuts.iter().enumerate() {
        conductance_pairs.push(CutConductance {
            cut_id,
            phi_before: cut_conductance(g, s)?,
            phi_after: cut_conductance(rewired, s)?,
        });
    }
    let conductance_pct = conductance_pairs
        .iter()
        .min_by(|a, b| a.phi_before.total_cmp(&b.phi_before))
        .map(|c| 100.0 * (c.phi_before / c.phi_after));

    Ok(DiagnosticsReport {
        kirchhoff_before,
        kirchhoff_after,
        lambda_top_before,
        lambda_top_after,
        conductance_pairs,
        ratios: Ratios {
            kirchhoff_pct: 100.0 * (kirchhoff_after / kirchhoff_before),
            spectral_pct: 100.0 * (lambda_top_before / lambda_top_after),
            conductance_pct,
        },
        eigenvalue_monotone,
    })
}

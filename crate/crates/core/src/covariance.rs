//! Structured batch covariance `Σ = U (C ⊗ G) Uᵀ + diag(d)` with
//! `U = blkdiag(L_1, …, L_D)`.
//!
//! `C` is a temporal kernel-mixture correlation, `G` a spatial factor
//! covariance obtained by inverting a curvature-reweighted, projected graph
//! precision. Likelihoods and conditionals are evaluated through the Woodbury
//! identity and the matrix determinant lemma, so `Σ` itself is only ever
//! densified by the test oracles.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::linalg::{
    chol_logdet, cholesky, is_symmetric, kron, kron_apply, spd_inverse, symmetrize_in_place,
};

/// Fixed jitter added to the spatial precision diagonal.
pub const DEFAULT_SIGMA_MIN: f64 = 1e-4;

/// Largest `DN` the dense oracles accept.
pub const DENSE_ORACLE_MAX_DIM: usize = 4096;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Squared-exponential correlation kernels with length scales `m * step`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBank {
    window: usize,
    length_scale_step: f64,
    kernels: Vec<DMatrix<f64>>,
}

impl KernelBank {
    pub fn window(&self) -> usize {
        self.window
    }

    pub fn components(&self) -> usize {
        self.kernels.len()
    }

    pub fn length_scale_step(&self) -> f64 {
        self.length_scale_step
    }

    pub fn kernels(&self) -> &[DMatrix<f64>] {
        &self.kernels
    }
}

/// `K_m[s, u] = exp(-(s - u)^2 / (2 (m step)^2))` for `m = 1..=components`.
pub fn build_kernel_bank(window: usize, components: usize, step: f64) -> Result<KernelBank> {
    if window == 0 || components == 0 {
        return Err(Error::InvalidParameter(
            "kernel bank needs window >= 1 and components >= 1".into(),
        ));
    }
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "length-scale step must be positive, got {step}"
        )));
    }
    let kernels = (1..=components)
        .map(|m| {
            let ell = m as f64 * step;
            DMatrix::from_fn(window, window, |s, u| {
                let diff = s as f64 - u as f64;
                (-(diff * diff) / (2.0 * ell * ell)).exp()
            })
        })
        .collect();
    Ok(KernelBank {
        window,
        length_scale_step: step,
        kernels,
    })
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.max();
    let e = logits.map(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// `C = sum_m softmax(logits)_m K_m`.
pub fn mixture_correlation(bank: &KernelBank, logits: &DVector<f64>) -> Result<DMatrix<f64>> {
    if logits.len() != bank.components() {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} kernels",
            logits.len(),
            bank.components()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mixture logits".into()));
    }
    let w = softmax(logits);
    let mut c = DMatrix::zeros(bank.window, bank.window);
    for (wm, k) in w.iter().zip(&bank.kernels) {
        c += k * *wm;
    }
    Ok(c)
}

/// Back-propagates `dC` through [`mixture_correlation`] to the logits.
pub fn mixture_correlation_backward(
    bank: &KernelBank,
    logits: &DVector<f64>,
    d_c: &DMatrix<f64>,
) -> DVector<f64> {
    let w = softmax(logits);
    let d_w = DVector::from_iterator(w.len(), bank.kernels.iter().map(|k| k.dot(d_c)));
    let mean = w.dot(&d_w);
    w.component_mul(&d_w.add_scalar(-mean))
}

/// Parameters of the curvature-aware spatial precision.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialFactorParams {
    pub alpha: f64,
    pub beta: f64,
    pub sigma_min: f64,
    /// Unnormalised `N x R` projection; columns are l2-normalised before use.
    pub projection: DMatrix<f64>,
    pub kappa0: f64,
    pub tau: f64,
    pub lambda: f64,
}

impl SpatialFactorParams {
    /// Default hyperparameters (`alpha = 0.01`, `beta = 1`, `lambda = 1`,
    /// `kappa0 = 0`, `tau = 5`, `sigma_min = 1e-4`) around a given projection.
    pub fn with_projection(projection: DMatrix<f64>) -> Self {
        Self {
            alpha: 0.01,
            beta: 1.0,
            sigma_min: DEFAULT_SIGMA_MIN,
            projection,
            kappa0: 0.0,
            tau: 5.0,
            lambda: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter(msg.to_string()))
            }
        };
        check(self.alpha > 0.0 && self.alpha.is_finite(), "alpha must be positive")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "beta must be nonnegative")?;
        check(
            self.sigma_min > 0.0 && self.sigma_min.is_finite(),
            "sigma_min must be positive",
        )?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau must be positive")?;
        check(self.lambda >= 0.0 && self.lambda.is_finite(), "lambda must be nonnegative")?;
        check(self.kappa0.is_finite(), "kappa0 must be finite")?;
        if self.projection.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projection".into()));
        }
        Ok(())
    }

    pub fn rank(&self) -> usize {
        self.projection.ncols()
    }
}

/// Column-wise l2 normalisation; returns the normalised matrix and the norms.
pub fn colnorm(pi: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let mut out = pi.clone();
    let mut norms = Vec::with_capacity(pi.ncols());
    for (r, mut col) in out.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::DegenerateProjection(r));
        }
        col /= norm;
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Intermediate products of the spatial factor construction.
#[derive(Debug, Clone)]
pub struct SpatialFactor {
    /// `G = Q⁻¹`.
    pub g: DMatrix<f64>,
    /// `Q = (alpha + sigma_min) I + beta P̂ᵀ L' P̂`.
    pub q: DMatrix<f64>,
    pub p_hat: DMatrix<f64>,
    pub column_norms: Vec<f64>,
    /// `P̂ᵀ L' P̂`.
    pub projected_laplacian: DMatrix<f64>,
}

pub fn spatial_factor(laplacian: &DMatrix<f64>, params: &SpatialFactorParams) -> Result<SpatialFactor> {
    params.validate()?;
    let n = laplacian.nrows();
    if !laplacian.is_square() || params.projection.nrows() != n {
        return Err(Error::ShapeMismatch(format!(
            "laplacian {}x{} vs projection {}x{}",
            laplacian.nrows(),
            laplacian.ncols(),
            params.projection.nrows(),
            params.projection.ncols()
        )));
    }
    let (p_hat, column_norms) = colnorm(&params.projection)?;
    let mut projected = p_hat.transpose() * laplacian * &p_hat;
    symmetrize_in_place(&mut projected);
    let r = p_hat.ncols();
    let q = DMatrix::identity(r, r) * (params.alpha + params.sigma_min) + &projected * params.beta;
    let chol = cholesky(&q, "spatial precision")?;
    let mut g = chol.inverse();
    symmetrize_in_place(&mut g);
    Ok(SpatialFactor {
        g,
        q,
        p_hat,
        column_norms,
        projected_laplacian: projected,
    })
}

/// Implicit `Σ = blkdiag(L_s) (C ⊗ G) blkdiag(L_s)ᵀ + diag(d)`, ordered
/// step-major: coordinate `s * N + i` is node `i` at window step `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchCovariance {
    blocks: Vec<DMatrix<f64>>,
    c: DMatrix<f64>,
    g: DMatrix<f64>,
    d: DVector<f64>,
}

pub fn assemble(
    blocks: Vec<DMatrix<f64>>,
    c: DMatrix<f64>,
    g: DMatrix<f64>,
    d: DVector<f64>,
) -> Result<BatchCovariance> {
    let window = blocks.len();
    if window == 0 {
        return Err(Error::ShapeMismatch("window must contain at least one step".into()));
    }
    let (n, r) = blocks[0].shape();
    if n == 0 || r == 0 {
        return Err(Error::ShapeMismatch("factor blocks must be nonempty".into()));
    }
    for (s, b) in blocks.iter().enumerate() {
        if b.shape() != (n, r) {
            return Err(Error::ShapeMismatch(format!(
                "block {s} is {:?}, expected {:?}",
                b.shape(),
                (n, r)
            )));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("factor block {s}")));
        }
    }
    if c.shape() != (window, window) {
        return Err(Error::ShapeMismatch(format!(
            "C is {:?}, expected {window}x{window}",
            c.shape()
        )));
    }
    if g.shape() != (r, r) {
        return Err(Error::ShapeMismatch(format!("G is {:?}, expected {r}x{r}", g.shape())));
    }
    if d.len() != window * n {
        return Err(Error::ShapeMismatch(format!(
            "d has length {}, expected {}",
            d.len(),
            window * n
        )));
    }
    if let Some(i) = d.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "diagonal variance d[{i}] = {} must be positive",
            d[i]
        )));
    }
    if !is_symmetric(&c) || !is_symmetric(&g) {
        return Err(Error::NotSymmetric);
    }
    cholesky(&g, "spatial factor covariance G")?;
    let jitter = 1e-10 * (1.0 + c.amax());
    cholesky(
        &(&c + DMatrix::identity(window, window) * jitter),
        "temporal correlation C",
    )?;
    Ok(BatchCovariance { blocks, c, g, d })
}

impl BatchCovariance {
    pub fn window(&self) -> usize {
        self.blocks.len()
    }

    pub fn nodes(&self) -> usize {
        self.blocks[0].nrows()
    }

    pub fn rank(&self) -> usize {
        self.blocks[0].ncols()
    }

    pub fn dim(&self) -> usize {
        self.window() * self.nodes()
    }

    pub fn blocks(&self) -> &[DMatrix<f64>] {
        &self.blocks
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn d(&self) -> &DVector<f64> {
        &self.d
    }

    /// Covariance of the first `steps` window steps.
    pub fn leading(&self, steps: usize) -> Result<BatchCovariance> {
        if steps == 0 || steps > self.window() {
            return Err(Error::InvalidParameter(format!(
                "cannot take {steps} leading steps of a {}-step window",
                self.window()
            )));
        }
        let n = self.nodes();
        Ok(BatchCovariance {
            blocks: self.blocks[..steps].to_vec(),
            c: self.c.view((0, 0), (steps, steps)).into_owned(),
            g: self.g.clone(),
            d: self.d.rows(0, steps * n).into_owned(),
        })
    }

    /// Dense `U = blkdiag(L_s)` (`DN x DR`).
    pub fn factor_matrix(&self) -> DMatrix<f64> {
        let (n, r, w) = (self.nodes(), self.rank(), self.window());
        let mut u = DMatrix::zeros(w * n, w * r);
        for (s, b) in self.blocks.iter().enumerate() {
            u.view_mut((s * n, s * r), (n, r)).copy_from(b);
        }
        u
    }

    /// Materialises `Σ` (test and debugging use).
    pub fn dense(&self) -> DMatrix<f64> {
        let (n, w) = (self.nodes(), self.window());
        let mut sigma = DMatrix::zeros(w * n, w * n);
        let lg: Vec<DMatrix<f64>> = self.blocks.iter().map(|l| l * &self.g).collect();
        for s in 0..w {
            for u in 0..w {
                let block = (&lg[s] * self.blocks[u].transpose()) * self.c[(s, u)];
                sigma.view_mut((s * n, u * n), (n, n)).copy_from(&block);
            }
        }
        for i in 0..w * n {
            sigma[(i, i)] += self.d[i];
        }
        symmetrize_in_place(&mut sigma);
        sigma
    }

    /// Writes the dense covariance as CSV without a header.
    pub fn write_dense_csv<W: Write>(&self, out: W) -> Result<()> {
        write_matrix_csv(&self.dense(), out)
    }

    /// Factorises the Woodbury middle matrix `K⁻¹ + UᵀD⁻¹U`.
    pub fn woodbury(&self) -> Result<Woodbury<'_>> {
        Woodbury::new(self)
    }
}

pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, out: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    for row in m.row_iter() {
        wtr.write_record(row.iter().map(|v| format!("{v}")))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Factorisation of `Σ` through the Woodbury identity.
pub struct Woodbury<'a> {
    cov: &'a BatchCovariance,
    d_inv: DVector<f64>,
    /// Per-step `L_sᵀ diag(1/d_s) L_s`.
    b_blocks: Vec<DMatrix<f64>>,
    k_inv: DMatrix<f64>,
    middle: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl<'a> Woodbury<'a> {
    fn new(cov: &'a BatchCovariance) -> Result<Self> {
        let (n, r, w) = (cov.nodes(), cov.rank(), cov.window());
        let c_chol = cholesky(&cov.c, "temporal correlation C")?;
        let g_chol = cholesky(&cov.g, "spatial factor covariance G")?;
        let mut c_inv = c_chol.inverse();
        let mut g_inv = g_chol.inverse();
        symmetrize_in_place(&mut c_inv);
        symmetrize_in_place(&mut g_inv);
        let d_inv = cov.d.map(|v| 1.0 / v);

        let mut b_blocks = Vec::with_capacity(w);
        for (s, l) in cov.blocks.iter().enumerate() {
            let mut scaled = l.clone();
            for i in 0..n {
                let f = d_inv[s * n + i];
                scaled.row_mut(i).scale_mut(f);
            }
            let mut b = l.transpose() * scaled;
            symmetrize_in_place(&mut b);
            b_blocks.push(b);
        }

        let k_inv = kron(&c_inv, &g_inv);
        let mut middle = k_inv.clone();
        for (s, b) in b_blocks.iter().enumerate() {
            let mut v = middle.view_mut((s * r, s * r), (r, r));
            v += b;
        }
        if middle.iter().any(|v| !v.is_finite()) {
            return Err(Error::IndefiniteMiddle);
        }
        let middle = Cholesky::new(middle).ok_or(Error::IndefiniteMiddle)?;

        let logdet = chol_logdet(&middle)
            + r as f64 * chol_logdet(&c_chol)
            + w as f64 * chol_logdet(&g_chol)
            + cov.d.iter().map(|v| v.ln()).sum::<f64>();

        Ok(Self {
            cov,
            d_inv,
            b_blocks,
            k_inv,
            middle,
            logdet,
        })
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `Uᵀ v`.
    pub fn ut(&self, v: &DVector<f64>) -> DVector<f64> {
        let (n, r) = (self.cov.nodes(), self.cov.rank());
        let mut out = DVector::zeros(self.cov.window() * r);
        for (s, l) in self.cov.blocks.iter().enumerate() {
            let part = l.transpose() * v.rows(s * n, n);
            out.rows_mut(s * r, r).copy_from(&part);
        }
        out
    }

    /// `U z`.
    pub fn u(&self, z: &DVector<f64>) -> DVector<f64> {
        let (n, r) = (self.cov.nodes(), self.cov.rank());
        let mut out = DVector::zeros(self.cov.dim());
        for (s, l) in self.cov.blocks.iter().enumerate() {
            let part = l * z.rows(s * r, r);
            out.rows_mut(s * n, n).copy_from(&part);
        }
        out
    }

    /// `Σ⁻¹ v`.
    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let dv = v.component_mul(&self.d_inv);
        let inner = self.middle.solve(&self.ut(&dv));
        let corr = self.u(&inner).component_mul(&self.d_inv);
        dv - corr
    }

    /// `(K⁻¹ + UᵀD⁻¹U)⁻¹ B`.
    pub fn middle_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.middle.solve(b)
    }

    /// `(K⁻¹ + UᵀD⁻¹U)⁻¹`.
    pub fn middle_inverse(&self) -> DMatrix<f64> {
        spd_inverse(&self.middle)
    }

    /// `Uᵀ Σ⁻¹ U = K⁻¹ - K⁻¹ M⁻¹ K⁻¹`.
    pub fn ut_sigma_inv_u(&self, middle_inv: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = &self.k_inv - &self.k_inv * middle_inv * &self.k_inv;
        symmetrize_in_place(&mut x);
        x
    }

    /// Diagonal of `Σ⁻¹`.
    pub fn sigma_inv_diagonal(&self, middle_inv: &DMatrix<f64>) -> DVector<f64> {
        let (n, r) = (self.cov.nodes(), self.cov.rank());
        let mut out = self.d_inv.clone();
        for (s, l) in self.cov.blocks.iter().enumerate() {
            let m_ss = middle_inv.view((s * r, s * r), (r, r));
            let lm = l * m_ss;
            for i in 0..n {
                let q = lm.row(i).dot(&l.row(i));
                let di = self.d_inv[s * n + i];
                out[s * n + i] -= di * di * q;
            }
        }
        out
    }

    pub fn b_blocks(&self) -> &[DMatrix<f64>] {
        &self.b_blocks
    }
}

fn check_eta(cov: &BatchCovariance, eta: &DVector<f64>) -> Result<()> {
    if eta.len() != cov.dim() {
        return Err(Error::ShapeMismatch(format!(
            "residual vector has length {}, covariance dimension is {}",
            eta.len(),
            cov.dim()
        )));
    }
    if eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residuals".into()));
    }
    Ok(())
}

/// Gaussian negative log-likelihood of `eta` under `cov`, via Woodbury.
pub fn nll(cov: &BatchCovariance, eta: &DVector<f64>) -> Result<f64> {
    check_eta(cov, eta)?;
    let wb = cov.woodbury()?;
    let a = wb.solve(eta);
    Ok(0.5 * (cov.dim() as f64 * LN_2PI + wb.logdet() + eta.dot(&a)))
}

/// Gradient of [`nll`] with respect to every structured input.
#[derive(Debug, Clone)]
pub struct NllGradient {
    pub blocks: Vec<DMatrix<f64>>,
    pub c: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub d: DVector<f64>,
    pub eta: DVector<f64>,
}

/// NLL and its gradient. `C` and `G` entries are treated as independent
/// variables, so the returned `c` and `g` gradients are symmetric.
pub fn nll_with_gradient(cov: &BatchCovariance, eta: &DVector<f64>) -> Result<(f64, NllGradient)> {
    check_eta(cov, eta)?;
    let (n, r, w) = (cov.nodes(), cov.rank(), cov.window());
    let wb = cov.woodbury()?;
    let a = wb.solve(eta);
    let value = 0.5 * (cov.dim() as f64 * LN_2PI + wb.logdet() + eta.dot(&a));

    let m_inv = wb.middle_inverse();
    let uta = wb.ut(&a);
    let k_uta = kron_apply(&cov.c, &cov.g, &DMatrix::from_column_slice(uta.len(), 1, uta.as_slice()))
        .column(0)
        .into_owned();

    // dNLL/dU = D⁻¹ U M⁻¹ - a (K Uᵀ a)ᵀ, restricted to the diagonal blocks.
    let mut d_blocks = Vec::with_capacity(w);
    for (s, l) in cov.blocks.iter().enumerate() {
        let mut gblk = l * m_inv.view((s * r, s * r), (r, r));
        for i in 0..n {
            let f = wb.d_inv[s * n + i];
            gblk.row_mut(i).scale_mut(f);
        }
        let a_s = a.rows(s * n, n);
        let kv = k_uta.rows(s * r, r);
        gblk -= a_s * kv.transpose();
        d_blocks.push(gblk);
    }

    // dNLL/dK = (Uᵀ Σ⁻¹ U - (Uᵀa)(Uᵀa)ᵀ) / 2
    let x = wb.ut_sigma_inv_u(&m_inv);
    let d_k = (x - &uta * uta.transpose()) * 0.5;
    let mut d_c = DMatrix::zeros(w, w);
    let mut d_g = DMatrix::zeros(r, r);
    for s in 0..w {
        for u in 0..w {
            let blk = d_k.view((s * r, u * r), (r, r));
            d_c[(s, u)] = blk.dot(&cov.g);
            d_g += blk * cov.c[(s, u)];
        }
    }

    let diag = wb.sigma_inv_diagonal(&m_inv);
    let d_d = DVector::from_iterator(
        cov.dim(),
        (0..cov.dim()).map(|i| 0.5 * (diag[i] - a[i] * a[i])),
    );

    Ok((
        value,
        NllGradient {
            blocks: d_blocks,
            c: d_c,
            g: d_g,
            d: d_d,
            eta: a,
        },
    ))
}

/// Dense reference NLL: densify, Cholesky-factor, evaluate directly.
pub fn nll_dense_oracle(cov: &BatchCovariance, eta: &DVector<f64>) -> Result<f64> {
    check_eta(cov, eta)?;
    if cov.dim() > DENSE_ORACLE_MAX_DIM {
        return Err(Error::TooLarge(cov.dim()));
    }
    let sigma = cov.dense();
    let chol = cholesky(&sigma, "dense batch covariance")?;
    let a = chol.solve(eta);
    Ok(0.5 * (cov.dim() as f64 * LN_2PI + chol_logdet(&chol) + eta.dot(&a)))
}

/// Gaussian conditional of the last window step given the others.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn check_obs(cov: &BatchCovariance, eta_obs: &DVector<f64>) -> Result<()> {
    let expected = (cov.window() - 1) * cov.nodes();
    if eta_obs.len() != expected {
        return Err(Error::ShapeMismatch(format!(
            "observed residuals have length {}, expected {expected}",
            eta_obs.len()
        )));
    }
    if eta_obs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observed residuals".into()));
    }
    Ok(())
}

/// Conditions the last window step on the residuals of the preceding
/// `D - 1` steps, using Woodbury solves against the past block. Falls back to
/// the dense computation when the past block cannot be factorised that way
/// and is small enough.
pub fn conditional_next_step(
    cov: &BatchCovariance,
    eta_obs: &DVector<f64>,
) -> Result<ConditionalGaussian> {
    check_obs(cov, eta_obs)?;
    match conditional_woodbury(cov, eta_obs) {
        Err(Error::IndefiniteMiddle | Error::NotPositiveDefinite(_))
            if (cov.window() - 1) * cov.nodes() <= 2000 =>
        {
            conditional_next_step_dense(cov, eta_obs)
        }
        other => other,
    }
}

fn conditional_woodbury(cov: &BatchCovariance, eta_obs: &DVector<f64>) -> Result<ConditionalGaussian> {
    let (n, r, w) = (cov.nodes(), cov.rank(), cov.window());
    let f = w - 1;
    let l_f = &cov.blocks[f];
    let g = &cov.g;
    let mut sigma22 = l_f * g * l_f.transpose() * cov.c[(f, f)];
    for i in 0..n {
        sigma22[(i, i)] += cov.d[f * n + i];
    }
    if f == 0 {
        symmetrize_in_place(&mut sigma22);
        cholesky(&sigma22, "conditional covariance")?;
        return Ok(ConditionalGaussian {
            mean: DVector::zeros(n),
            cov: sigma22,
        });
    }
    let past = cov.leading(f)?;
    let wb = past.woodbury()?;
    // cross-covariance factor: (c ⊗ G) with c = C[f, past]; K⁻¹(c ⊗ G)ᵀ = (C_p⁻¹ c) ⊗ I
    let c_fp = cov.c.view((f, 0), (1, f)).transpose();
    let c_p = cholesky(&past.c, "temporal correlation C")?;
    let v = c_p.solve(&c_fp);
    let y = wb.ut(&wb.solve(eta_obs));
    let mut z = DVector::zeros(r);
    for s in 0..f {
        z += y.rows(s * r, r) * c_fp[s];
    }
    let mean = l_f * (g * z);
    let mut kc = DMatrix::zeros(f * r, r);
    for s in 0..f {
        for k in 0..r {
            kc[(s * r + k, k)] = v[s];
        }
    }
    let m_kc = wb.middle_solve(&kc);
    let inner = g * c_fp.dot(&v) - kc.transpose() * m_kc;
    let mut cond = sigma22 - l_f * inner * l_f.transpose();
    symmetrize_in_place(&mut cond);
    cholesky(&cond, "conditional covariance")?;
    Ok(ConditionalGaussian { mean, cov: cond })
}

/// Dense conditioning on the block partition (oracle and fallback).
pub fn conditional_next_step_dense(
    cov: &BatchCovariance,
    eta_obs: &DVector<f64>,
) -> Result<ConditionalGaussian> {
    check_obs(cov, eta_obs)?;
    if cov.dim() > DENSE_ORACLE_MAX_DIM {
        return Err(Error::TooLarge(cov.dim()));
    }
    let n = cov.nodes();
    let p = cov.dim() - n;
    let sigma = cov.dense();
    let s22 = sigma.view((p, p), (n, n)).into_owned();
    if p == 0 {
        cholesky(&s22, "conditional covariance")?;
        return Ok(ConditionalGaussian {
            mean: DVector::zeros(n),
            cov: s22,
        });
    }
    let s11 = sigma.view((0, 0), (p, p)).into_owned();
    let s21 = sigma.view((p, 0), (n, p)).into_owned();
    let chol = cholesky(&s11, "past block covariance")?;
    let mean = &s21 * chol.solve(eta_obs);
    let mut cond = s22 - &s21 * chol.solve(&s21.transpose());
    symmetrize_in_place(&mut cond);
    cholesky(&cond, "conditional covariance")?;
    Ok(ConditionalGaussian { mean, cov: cond })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sym_eigenvalues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_cov(rng: &mut ChaCha8Rng, n: usize, w: usize, r: usize) -> BatchCovariance {
        let blocks = (0..w)
            .map(|_| DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let bank = build_kernel_bank(w, 2, 1.0).unwrap();
        let logits = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
        let c = mixture_correlation(&bank, &logits).unwrap();
        let a = DMatrix::from_fn(r, r, |_, _| rng.random_range(-1.0..1.0));
        let g = &a * a.transpose() + DMatrix::identity(r, r) * 0.5;
        let d = DVector::from_fn(w * n, |_, _| rng.random_range(0.2..2.0));
        assemble(blocks, c, g, d).unwrap()
    }

    #[test]
    fn kernel_bank_examples() {
        let b = build_kernel_bank(1, 3, 0.7).unwrap();
        assert!(b.kernels().iter().all(|k| k == &DMatrix::from_element(1, 1, 1.0)));
        let b = build_kernel_bank(2, 1, 1.0).unwrap();
        assert!((b.kernels()[0][(0, 1)] - (-0.5f64).exp()).abs() < 1e-16);
        assert!((b.kernels()[0][(0, 1)] - 0.606531).abs() < 1e-6);
        assert!(build_kernel_bank(3, 2, 0.0).is_err());
        assert!(build_kernel_bank(3, 2, -1.0).is_err());
    }

    #[test]
    fn kernel_bank_is_psd_unit_diagonal() {
        for d in 1..=24 {
            let bank = build_kernel_bank(d, 8, 1.0).unwrap();
            for k in bank.kernels() {
                assert!(k.diagonal().iter().all(|v| *v == 1.0));
                assert!(sym_eigenvalues(k)[0] >= -1e-10);
            }
        }
    }

    #[test]
    fn mixture_examples() {
        let bank = build_kernel_bank(4, 1, 1.0).unwrap();
        let c = mixture_correlation(&bank, &DVector::from_element(1, 3.7)).unwrap();
        assert_eq!(c, bank.kernels()[0]);

        let bank = build_kernel_bank(4, 2, 1.0).unwrap();
        let c = mixture_correlation(&bank, &DVector::from_vec(vec![0.3, 0.3])).unwrap();
        let expect = (&bank.kernels()[0] + &bank.kernels()[1]) * 0.5;
        assert!((c - expect).amax() < 1e-15);

        let c = mixture_correlation(&bank, &DVector::from_vec(vec![10.0, -10.0])).unwrap();
        assert!((c - &bank.kernels()[0]).amax() < 1e-4);

        let bad = DVector::from_vec(vec![f64::NAN, 0.0]);
        assert!(matches!(mixture_correlation(&bank, &bad), Err(Error::NonFinite(_))));
    }

    #[test]
    fn spatial_factor_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pi = DMatrix::from_fn(5, 2, |_, _| rng.random_range(-1.0..1.0));
        let mut params = SpatialFactorParams::with_projection(pi);
        params.beta = 0.0;
        let lap = crate::graph::WeightedGraph::from_edges(5, &[(0, 1, 1.0), (1, 2, 2.0)])
            .unwrap()
            .laplacian();
        let sf = spatial_factor(&lap, &params).unwrap();
        let expect = DMatrix::identity(2, 2) / (params.alpha + params.sigma_min);
        assert!((sf.g - &expect).amax() < 1e-9);

        params.beta = 1.0;
        let sf = spatial_factor(&DMatrix::zeros(5, 5), &params).unwrap();
        assert!((sf.g - expect).amax() < 1e-9);
    }

    #[test]
    fn spatial_factor_rejects_zero_column() {
        let mut pi = DMatrix::from_element(3, 2, 1.0);
        pi.column_mut(1).fill(0.0);
        let params = SpatialFactorParams::with_projection(pi);
        assert!(matches!(
            spatial_factor(&DMatrix::zeros(3, 3), &params),
            Err(Error::DegenerateProjection(1))
        ));
    }

    #[test]
    fn assemble_validation() {
        let blocks = vec![DMatrix::zeros(2, 1); 2];
        let c = DMatrix::identity(2, 2);
        let g = DMatrix::identity(1, 1);
        assert!(assemble(blocks.clone(), c.clone(), g.clone(), DVector::from_element(4, 1.0)).is_ok());
        assert!(assemble(blocks.clone(), c.clone(), g.clone(), DVector::from_element(3, 1.0)).is_err());
        let mut d = DVector::from_element(4, 1.0);
        d[2] = 0.0;
        assert!(matches!(
            assemble(blocks.clone(), c.clone(), g.clone(), d),
            Err(Error::InvalidParameter(_))
        ));
        assert!(assemble(blocks, DMatrix::identity(3, 3), g, DVector::from_element(4, 1.0)).is_err());
    }

    #[test]
    fn zero_blocks_reduce_to_diagonal() {
        let blocks = vec![DMatrix::zeros(3, 2); 2];
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cov = assemble(blocks, DMatrix::identity(2, 2), DMatrix::identity(2, 2), d.clone()).unwrap();
        assert_eq!(cov.dense(), DMatrix::from_diagonal(&d));
        let eta = DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0, 1.0, -3.0]);
        let expect = 0.5 * (6.0 * LN_2PI + d.iter().map(|v| v.ln()).sum::<f64>()
            + eta.iter().zip(d.iter()).map(|(e, v)| e * e / v).sum::<f64>());
        assert!((nll(&cov, &eta).unwrap() - expect).abs() < 1e-12);
        assert!((nll_dense_oracle(&cov, &eta).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn unit_diagonal_only_nll() {
        let cov = assemble(
            vec![DMatrix::zeros(4, 1); 3],
            DMatrix::identity(3, 3),
            DMatrix::identity(1, 1),
            DVector::from_element(12, 1.0),
        )
        .unwrap();
        let eta = DVector::from_fn(12, |i, _| i as f64 * 0.1);
        let expect = 6.0 * LN_2PI + 0.5 * eta.norm_squared();
        assert!((nll(&cov, &eta).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn scalar_factor_hand_case() {
        // D = 1, N = 2, R = 1, L = [1, 2]ᵀ, C = [1], G = [0.5], d = (1, 1):
        // Σ = 0.5 [[1, 2], [2, 4]] + I = [[1.5, 1], [1, 3]], |Σ| = 3.5,
        // Σ⁻¹ = [[3, -1], [-1, 1.5]] / 3.5.
        let cov = assemble(
            vec![DMatrix::from_row_slice(2, 1, &[1.0, 2.0])],
            DMatrix::identity(1, 1),
            DMatrix::from_element(1, 1, 0.5),
            DVector::from_element(2, 1.0),
        )
        .unwrap();
        let eta = DVector::from_vec(vec![1.0, 1.0]);
        let quad = (3.0 - 2.0 + 1.5) / 3.5;
        let expect = LN_2PI + 0.5 * 3.5f64.ln() + 0.5 * quad;
        assert!((nll_dense_oracle(&cov, &eta).unwrap() - expect).abs() < 1e-13);
        assert!((nll(&cov, &eta).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn zero_residual_nll_is_half_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cov = random_cov(&mut rng, 5, 3, 2);
        let eta = DVector::zeros(15);
        let logdet = sym_eigenvalues(&cov.dense()).iter().map(|v| v.ln()).sum::<f64>();
        let expect = 7.5 * LN_2PI + 0.5 * logdet;
        assert!((nll(&cov, &eta).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn woodbury_matches_dense_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..8);
            let w = rng.random_range(1..5);
            let r = rng.random_range(1..4);
            let cov = random_cov(&mut rng, n, w, r);
            let eta = DVector::from_fn(n * w, |_, _| rng.random_range(-2.0..2.0));
            let a = nll(&cov, &eta).unwrap();
            let b = nll_dense_oracle(&cov, &eta).unwrap();
            assert!((a - b).abs() / (1.0 + b.abs()) < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, w, r) = (3, 3, 2);
        let cov = random_cov(&mut rng, n, w, r);
        let eta = DVector::from_fn(n * w, |_, _| rng.random_range(-2.0..2.0));
        let (_, grad) = nll_with_gradient(&cov, &eta).unwrap();
        let h = 1e-6;
        let f = |c: &BatchCovariance, e: &DVector<f64>| nll_dense_oracle(c, e).unwrap();
        for s in 0..w {
            for i in 0..n {
                for k in 0..r {
                    let mut p = cov.clone();
                    p.blocks[s][(i, k)] += h;
                    let mut m = cov.clone();
                    m.blocks[s][(i, k)] -= h;
                    let fd = (f(&p, &eta) - f(&m, &eta)) / (2.0 * h);
                    assert!((fd - grad.blocks[s][(i, k)]).abs() < 1e-6, "L");
                }
            }
        }
        for i in 0..n * w {
            let mut p = cov.clone();
            p.d[i] += h;
            let mut m = cov.clone();
            m.d[i] -= h;
            let fd = (f(&p, &eta) - f(&m, &eta)) / (2.0 * h);
            assert!((fd - grad.d[i]).abs() < 1e-6, "d");
            let mut ep = eta.clone();
            ep[i] += h;
            let mut em = eta.clone();
            em[i] -= h;
            let fd = (f(&cov, &ep) - f(&cov, &em)) / (2.0 * h);
            assert!((fd - grad.eta[i]).abs() < 1e-6, "eta");
        }
        // symmetric perturbations of C and G: derivative is g_ij + g_ji
        for (a, b) in [(0, 1), (1, 2), (2, 2)] {
            let mut p = cov.clone();
            p.c[(a, b)] += h;
            if a != b {
                p.c[(b, a)] += h;
            }
            let mut m = cov.clone();
            m.c[(a, b)] -= h;
            if a != b {
                m.c[(b, a)] -= h;
            }
            let fd = (f(&p, &eta) - f(&m, &eta)) / (2.0 * h);
            let an = if a == b { grad.c[(a, a)] } else { grad.c[(a, b)] + grad.c[(b, a)] };
            assert!((fd - an).abs() < 1e-6, "C");
        }
        for (a, b) in [(0, 1), (1, 1)] {
            let mut p = cov.clone();
            p.g[(a, b)] += h;
            if a != b {
                p.g[(b, a)] += h;
            }
            let mut m = cov.clone();
            m.g[(a, b)] -= h;
            if a != b {
                m.g[(b, a)] -= h;
            }
            let fd = (f(&p, &eta) - f(&m, &eta)) / (2.0 * h);
            let an = if a == b { grad.g[(a, a)] } else { grad.g[(a, b)] + grad.g[(b, a)] };
            assert!((fd - an).abs() < 1e-6, "G");
        }
    }

    #[test]
    fn conditioning_diagonal_is_independent() {
        let d = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let cov = assemble(vec![DMatrix::zeros(2, 1); 2], DMatrix::identity(2, 2), DMatrix::identity(1, 1), d).unwrap();
        let c = conditional_next_step(&cov, &DVector::from_vec(vec![5.0, -1.0])).unwrap();
        assert_eq!(c.mean, DVector::zeros(2));
        assert_eq!(c.cov, DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 4.0])));
    }

    #[test]
    fn conditioning_bivariate_hand_formula() {
        // D = 2, N = 1: Σ = [[1, ρ], [ρ, 1]] via L = [1], G = [ρ], C = [[1,1],[1,1]] won't be PD,
        // so use G = [g], C = [[1, c], [c, 1]], d = 1 - g: Σ = [[1, gc], [gc, 1]].
        let (g, c) = (0.6, 0.5);
        let rho = g * c;
        let cov = assemble(
            vec![DMatrix::from_element(1, 1, 1.0); 2],
            DMatrix::from_row_slice(2, 2, &[1.0, c, c, 1.0]),
            DMatrix::from_element(1, 1, g),
            DVector::from_element(2, 1.0 - g),
        )
        .unwrap();
        let obs = DVector::from_element(1, 1.7);
        let cond = conditional_next_step(&cov, &obs).unwrap();
        assert!((cond.mean[0] - rho * 1.7).abs() < 1e-14);
        assert!((cond.cov[(0, 0)] - (1.0 - rho * rho)).abs() < 1e-14);
    }

    #[test]
    fn conditioning_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.random_range(1..6);
            let w = rng.random_range(1..5);
            let r = rng.random_range(1..4);
            let cov = random_cov(&mut rng, n, w, r);
            let obs = DVector::from_fn((w - 1) * n, |_, _| rng.random_range(-2.0..2.0));
            let a = conditional_next_step(&cov, &obs).unwrap();
            let b = conditional_next_step_dense(&cov, &obs).unwrap();
            let scale = 1.0 + b.cov.amax() + b.mean.amax();
            assert!((a.mean - b.mean).amax() / scale < 1e-8);
            assert!((a.cov - b.cov).amax() / scale < 1e-8);
        }
    }

    #[test]
    fn mixture_backward_matches_finite_differences() {
        let bank = build_kernel_bank(4, 3, 1.0).unwrap();
        let logits = DVector::from_vec(vec![0.2, -0.4, 0.9]);
        let d_c = DMatrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64 * 0.1 - 0.5);
        let an = mixture_correlation_backward(&bank, &logits, &d_c);
        let h = 1e-6;
        for m in 0..3 {
            let mut p = logits.clone();
            p[m] += h;
            let mut q = logits.clone();
            q[m] -= h;
            let fd = (mixture_correlation(&bank, &p).unwrap().dot(&d_c)
                - mixture_correlation(&bank, &q).unwrap().dot(&d_c))
                / (2.0 * h);
            assert!((fd - an[m]).abs() < 1e-8);
        }
    }
}

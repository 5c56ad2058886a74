//! Two-layer linear denoising autoencoders and the self-consuming loop.
//!
//! Samples are rows, so the Gram matrix of a sample matrix `X` (n×d) is
//! `XᵀX` (d×d). A fitted DAE maps a row `x` to `Φx`, applied to a whole
//! sample matrix as `X Φᵀ`.

use std::fmt;
use std::str::FromStr;

use crate::data::{GaussianSpec, RngStream};
use crate::error::{Error, Result};
use crate::metrics::{dim_tracks, w2_empirical, w2_gaussian};
use crate::numerics::{frobenius_norm, numerical_rank, spectral_norm, sym_eig, Matrix};

/// Threshold used for the rank column of a collapse trace.
pub const RANK_TAU: f64 = 0.2;

/// How the Gram matrix of a sample matrix is scaled before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramScale {
    /// `XᵀX`.
    Raw,
    /// `XᵀX / n`, the second-moment matrix.
    Covariance,
}

impl GramScale {
    pub fn as_str(self) -> &'static str {
        match self {
            GramScale::Raw => "raw",
            GramScale::Covariance => "covariance",
        }
    }
}

impl FromStr for GramScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(GramScale::Raw),
            "covariance" => Ok(GramScale::Covariance),
            _ => Err(Error::Config(format!("unknown gram scale `{s}`"))),
        }
    }
}

/// Standard deviation convention for the loop noise `E_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseScale {
    /// Entries of `E_j` have std `σ̂ / n`.
    PerSample,
    /// Entries of `E_j` have std `σ̂`.
    Direct,
}

impl NoiseScale {
    pub fn std(self, sigma_hat: f64, n: usize) -> f64 {
        match self {
            NoiseScale::PerSample => sigma_hat / n as f64,
            NoiseScale::Direct => sigma_hat,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NoiseScale::PerSample => "per-sample",
            NoiseScale::Direct => "direct",
        }
    }
}

impl FromStr for NoiseScale {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-sample" => Ok(NoiseScale::PerSample),
            "direct" => Ok(NoiseScale::Direct),
            _ => Err(Error::Config(format!("unknown noise scale `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoopMode {
    SyntheticOnly,
    AugmentReal,
}

impl LoopMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LoopMode::SyntheticOnly => "synthetic-only",
            LoopMode::AugmentReal => "augment-real",
        }
    }
}

impl FromStr for LoopMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-only" => Ok(LoopMode::SyntheticOnly),
            "augment-real" => Ok(LoopMode::AugmentReal),
            _ => Err(Error::Config(format!("unknown loop mode `{s}`"))),
        }
    }
}

impl fmt::Display for LoopMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A linear DAE `x ↦ W2 W1 x` with its training noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDae {
    w1: Matrix,
    w2: Matrix,
    sigma: f64,
    phi: Matrix,
}

impl LinearDae {
    pub fn from_factors(w1: Matrix, w2: Matrix, sigma: f64) -> Result<Self> {
        if w2.cols() != w1.rows() || w2.rows() != w1.cols() {
            return Err(Error::Shape(format!(
                "W1 is {}x{}, W2 is {}x{}",
                w1.rows(),
                w1.cols(),
                w2.rows(),
                w2.cols()
            )));
        }
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        let phi = w2.matmul(&w1)?;
        Ok(LinearDae { w1, w2, sigma, phi })
    }

    pub fn dim(&self) -> usize {
        self.phi.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn w2(&self) -> &Matrix {
        &self.w2
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn phi(&self) -> &Matrix {
        &self.phi
    }

    /// Applies `Φ` to every row.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul_t(&self.phi)
    }
}

/// Gram matrix of the rows of `x` under `scale`.
pub fn gram(x: &Matrix, scale: GramScale) -> Matrix {
    let g = x.gram();
    match scale {
        GramScale::Raw => g,
        GramScale::Covariance => g.scale(1.0 / x.rows() as f64),
    }
}

/// `‖X‖²`: the largest eigenvalue of the scaled Gram matrix.
pub fn data_tau(x: &Matrix, scale: GramScale) -> Result<f64> {
    Ok(sym_eig(&gram(x, scale))?.max().max(0.0))
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(())
}

/// Minimizer of `tr((Φ−I) G (Φ−I)ᵀ) + σ²‖Φ‖_F²`, i.e. `Φ = G (G + σ²I)⁻¹`,
/// returned in the symmetric factorization `W2 = W1ᵀ = Q diag(√f)`.
pub fn fit_closed_form_gram(g: &Matrix, sigma: f64) -> Result<LinearDae> {
    check_sigma(sigma)?;
    let e = sym_eig(g)?;
    let s2 = sigma * sigma;
    let top = e.max().abs();
    if s2 == 0.0 && e.min() <= 1e-12 * top.max(f64::MIN_POSITIVE) {
        return Err(Error::IllPosed(
            "sigma = 0 with a rank-deficient Gram matrix has no unique minimizer".into(),
        ));
    }
    let d = g.rows();
    let shrink: Vec<f64> = e
        .eigenvalues
        .iter()
        .map(|&l| {
            let l = l.max(0.0);
            if l + s2 == 0.0 {
                0.0
            } else {
                l / (l + s2)
            }
        })
        .collect();
    let w2 = Matrix::from_fn(d, d, |i, k| e.eigenvectors[(i, k)] * shrink[k].sqrt());
    let w1 = w2.transpose();
    let mut dae = LinearDae::from_factors(w1, w2, sigma)?;
    // Rebuild Φ from the spectrum directly so it is exactly symmetric.
    let phi = e.reconstruct_with(|l| {
        let l = l.max(0.0);
        if l + s2 == 0.0 {
            0.0
        } else {
            l / (l + s2)
        }
    });
    dae.phi = phi;
    Ok(dae)
}

/// Closed-form fit on the raw Gram `XᵀX`.
pub fn fit_closed_form(x: &Matrix, sigma: f64) -> Result<LinearDae> {
    fit_closed_form_scaled(x, sigma, GramScale::Raw)
}

pub fn fit_closed_form_scaled(x: &Matrix, sigma: f64, scale: GramScale) -> Result<LinearDae> {
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty sample matrix".into()));
    }
    fit_closed_form_gram(&gram(x, scale), sigma)
}

/// Objective used by [`fit_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientObjective {
    /// Full-batch descent on the exact regularized loss.
    Exact,
    /// SGD on sampled noise: each step draws `batch` rows and fresh noise.
    Sampled { batch: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientFitConfig {
    pub hidden: usize,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub tolerance: f64,
    pub objective: GradientObjective,
    pub scale: GramScale,
    pub seed: u64,
}

impl GradientFitConfig {
    pub fn new(hidden: usize) -> Self {
        GradientFitConfig {
            hidden,
            learning_rate: 1e-2,
            max_steps: 50_000,
            tolerance: 1e-6,
            objective: GradientObjective::Exact,
            scale: GramScale::Raw,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientFitReport {
    pub steps: usize,
    pub final_loss: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

fn exact_loss(phi: &Matrix, g: &Matrix, s2: f64) -> Result<f64> {
    let d = phi.rows();
    let r = phi.sub(&Matrix::identity(d))?;
    let rg = r.matmul(g)?;
    let mut fit = 0.0;
    for i in 0..d {
        for j in 0..d {
            fit += rg[(i, j)] * r[(i, j)];
        }
    }
    Ok(fit + s2 * phi.frobenius_norm().powi(2))
}

/// Trains `W1` (d'×d) and `W2` (d×d') by gradient descent.
///
/// Losses and gradients are divided by `λ_max(G) + σ²`, which leaves the
/// minimizer unchanged and makes the learning rate independent of the data
/// scale. In sampled mode the per-row noise std is `σ` under covariance
/// scaling and `σ/√n` under raw scaling, so both objectives share the
/// closed-form minimizer.
pub fn fit_gradient(
    x: &Matrix,
    sigma: f64,
    config: &GradientFitConfig,
) -> Result<(LinearDae, GradientFitReport)> {
    check_sigma(sigma)?;
    if x.rows() == 0 {
        return Err(Error::InvalidArgument("empty sample matrix".into()));
    }
    if config.hidden == 0 {
        return Err(Error::InvalidArgument("hidden width must be >= 1".into()));
    }
    if !(config.learning_rate > 0.0) {
        return Err(Error::InvalidArgument("learning rate must be > 0".into()));
    }
    let (n, d) = x.shape();
    let h = config.hidden;
    let g = gram(x, config.scale);
    let s2 = sigma * sigma;
    let c = sym_eig(&g)?.max().max(0.0) + s2;
    if c == 0.0 {
        return Err(Error::IllPosed("zero data and zero noise".into()));
    }

    let mut rng = RngStream::new(config.seed, 0);
    let init = 0.1 / (d as f64).sqrt();
    let mut w1 = rng.normal_matrix(h, d).scale(init);
    let mut w2 = rng.normal_matrix(d, h).scale(init);
    let lr = config.learning_rate;
    let mut report = GradientFitReport {
        steps: 0,
        final_loss: f64::NAN,
        grad_norm: f64::INFINITY,
        converged: false,
    };

    let noise_std = match config.scale {
        GramScale::Covariance => sigma,
        GramScale::Raw => sigma / (n as f64).sqrt(),
    };
    let row_weight = match config.scale {
        GramScale::Covariance => 1.0,
        GramScale::Raw => n as f64,
    };

    for step in 0..config.max_steps {
        let phi = w2.matmul(&w1)?;
        let (loss, dphi) = match config.objective {
            GradientObjective::Exact => {
                let loss = exact_loss(&phi, &g, s2)? / c;
                let grad = phi
                    .matmul(&g.add_identity(s2)?)?
                    .sub(&g)?
                    .scale(2.0 / c);
                (loss, grad)
            }
            GradientObjective::Sampled { batch } => {
                if batch == 0 {
                    return Err(Error::InvalidArgument("batch must be >= 1".into()));
                }
                let idx: Vec<usize> = (0..batch).map(|_| rng.below(n)).collect();
                let xb = x.select_rows(&idx);
                let noisy = xb.add(&rng.normal_matrix(batch, d).scale(noise_std))?;
                let resid = noisy.matmul_t(&phi)?.sub(&xb)?;
                let w = row_weight / (batch as f64 * c);
                let loss = resid.frobenius_norm().powi(2) * w;
                // d/dΦ Σ ‖Φ y − x‖² = 2 Σ (Φ y − x) yᵀ.
                let grad = resid.transpose().matmul(&noisy)?.scale(2.0 * w);
                (loss, grad)
            }
        };
        if !loss.is_finite() || !dphi.is_finite() {
            return Err(Error::Training {
                step,
                reason: format!("loss became {loss}"),
            });
        }
        let dw2 = dphi.matmul_t(&w1)?;
        let dw1 = w2.transpose().matmul(&dphi)?;
        let grad_norm = (dw1.frobenius_norm().powi(2) + dw2.frobenius_norm().powi(2)).sqrt();
        report.steps = step;
        report.final_loss = loss;
        report.grad_norm = grad_norm;
        if matches!(config.objective, GradientObjective::Exact) && grad_norm < config.tolerance {
            report.converged = true;
            break;
        }
        w1 = w1.sub(&dw1.scale(lr))?;
        w2 = w2.sub(&dw2.scale(lr))?;
        report.steps = step + 1;
    }
    if !w1.is_finite() || !w2.is_finite() {
        return Err(Error::Training {
            step: report.steps,
            reason: "parameters became non-finite".into(),
        });
    }
    Ok((LinearDae::from_factors(w1, w2, sigma)?, report))
}

/// One loop step: `X_{j+1} = Φ_j (X_j + E_j)` with `E_j` drawn at the
/// std given by `scale`.
pub fn self_consume_step(
    dae: &LinearDae,
    x: &Matrix,
    sigma_hat: f64,
    scale: NoiseScale,
    rng: &mut RngStream,
) -> Result<Matrix> {
    if x.cols() != dae.dim() {
        return Err(Error::Shape(format!(
            "samples have dimension {}, model {}",
            x.cols(),
            dae.dim()
        )));
    }
    let std = scale.std(sigma_hat, x.rows());
    if std == 0.0 {
        return dae.apply(x);
    }
    let noisy = x.add(&rng.normal_matrix(x.rows(), x.cols()).scale(std))?;
    dae.apply(&noisy)
}

/// `(τ/σ²) (τ/(τ+σ²))^{j−1}`.
pub fn theorem1_bound(tau: f64, sigma: f64, j: usize) -> Result<f64> {
    if !(tau >= 0.0) || !(sigma > 0.0) || j == 0 {
        return Err(Error::InvalidArgument(format!(
            "need tau >= 0, sigma > 0, j >= 1 (tau={tau}, sigma={sigma}, j={j})"
        )));
    }
    let s2 = sigma * sigma;
    Ok(tau / s2 * (tau / (tau + s2)).powi(j as i32 - 1))
}

/// `τ / (2τ + σ²)`.
pub fn prop2_floor(tau: f64, sigma: f64) -> Result<f64> {
    if !(tau >= 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need tau >= 0 and sigma > 0 (tau={tau}, sigma={sigma})"
        )));
    }
    let s2 = sigma * sigma;
    if tau == 0.0 {
        return Ok(0.0);
    }
    Ok(tau / (2.0 * tau + s2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    pub iterations: usize,
    pub sigma: f64,
    pub sigma_hat: f64,
    pub mode: LoopMode,
    pub noise_scale: NoiseScale,
    pub gram_scale: GramScale,
    /// Upper limit on `σ̂ / σ`.
    pub c_bound: f64,
    /// Number of Gram eigenvalues kept per iteration.
    pub top_k: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 20,
            sigma: 1.0,
            sigma_hat: 0.5,
            mode: LoopMode::SyntheticOnly,
            noise_scale: NoiseScale::PerSample,
            gram_scale: GramScale::Raw,
            c_bound: 1.0,
            top_k: 4,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("loop needs at least one iteration".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.sigma_hat >= 0.0) {
            return Err(Error::Config(format!("sigma_hat must be >= 0, got {}", self.sigma_hat)));
        }
        if self.sigma_hat > self.c_bound * self.sigma {
            return Err(Error::Config(format!(
                "sigma_hat {} exceeds C * sigma = {}",
                self.sigma_hat,
                self.c_bound * self.sigma
            )));
        }
        Ok(())
    }
}

/// Statistics of one loop iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseStep {
    pub j: usize,
    pub spec_norm_sq: f64,
    pub frob_norm: f64,
    pub rank_tau02: usize,
    pub thm1_bound: f64,
    pub prop2_floor: f64,
    /// Top eigenvalues of the (scaled) Gram of `X_j`, descending.
    pub eigenvalues: Vec<f64>,
    /// Gaussian-fit W2 between `Φ_j X` and the target, when one is given.
    pub w2_gauss: Option<f64>,
    /// Exact W2 between the first rows of `Φ_j X` and a reference sample,
    /// when one is given.
    pub w2_empirical: Option<f64>,
    pub pc0: f64,
    pub dim0_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseTrace {
    pub tau: f64,
    pub steps: Vec<CollapseStep>,
}

impl CollapseTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn column(&self, f: impl Fn(&CollapseStep) -> f64) -> Vec<f64> {
        self.steps.iter().map(f).collect()
    }

    pub fn csv_header(&self) -> Vec<String> {
        let k = self.steps.first().map_or(0, |s| s.eigenvalues.len());
        let mut h: Vec<String> = [
            "j",
            "spec_norm_sq",
            "frob_norm",
            "rank_tau02",
            "thm1_bound",
            "prop2_floor",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        h.extend((0..k).map(|i| format!("eig_{i}")));
        h.push("w2_gauss".into());
        if self.steps.first().is_some_and(|s| s.w2_empirical.is_some()) {
            h.push("w2_empirical".into());
        }
        h.extend(["pc0", "dim0_std"].iter().map(|s| s.to_string()));
        h
    }

    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        self.steps
            .iter()
            .map(|s| {
                let mut r = vec![
                    s.j as f64,
                    s.spec_norm_sq,
                    s.frob_norm,
                    s.rank_tau02 as f64,
                    s.thm1_bound,
                    s.prop2_floor,
                ];
                r.extend(&s.eigenvalues);
                r.push(s.w2_gauss.unwrap_or(f64::NAN));
                r.extend(s.w2_empirical);
                r.push(s.pc0);
                r.push(s.dim0_std);
                r
            })
            .collect()
    }
}

/// Runs the self-consuming loop from real data `x`.
///
/// Iteration `j` fits `Φ_j` on `X_j` (or on `[X_j X]` in augment mode,
/// whose Gram is `X_jᵀX_j + XᵀX`, divided by the real sample count under
/// covariance scaling), records its statistics and the model output `Φ_j X`
/// on the real data, then forms `X_{j+1} = Φ_j (X_j + E_j)`.
pub fn run_loop(
    config: &LoopConfig,
    x: &Matrix,
    target: Option<&GaussianSpec>,
    rng: &mut RngStream,
) -> Result<CollapseTrace> {
    run_loop_with_reference(config, x, target, None, rng)
}

/// [`run_loop`] that also records the exact W2 between the first
/// `reference.rows()` rows of `Φ_j X` and `reference`.
pub fn run_loop_with_reference(
    config: &LoopConfig,
    x: &Matrix,
    target: Option<&GaussianSpec>,
    reference: Option<&Matrix>,
    rng: &mut RngStream,
) -> Result<CollapseTrace> {
    config.validate()?;
    if let Some(r) = reference {
        if r.rows() == 0 || r.rows() > x.rows() || r.cols() != x.cols() {
            return Err(Error::Shape(format!(
                "reference sample is {:?}; data is {:?}",
                r.shape(),
                x.shape()
            )));
        }
    }
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("loop needs at least two samples".into()));
    }
    let n = x.rows() as f64;
    let scale_by = match config.gram_scale {
        GramScale::Raw => 1.0,
        GramScale::Covariance => 1.0 / n,
    };
    let real_gram = x.gram().scale(scale_by);
    let tau = sym_eig(&real_gram)?.max().max(0.0);
    let floor = prop2_floor(tau, config.sigma)?;

    let mut xj = x.clone();
    let mut steps = Vec::with_capacity(config.iterations);
    for j in 1..=config.iterations {
        let gj = xj.gram().scale(scale_by);
        let fit_gram = match config.mode {
            LoopMode::SyntheticOnly => gj.clone(),
            LoopMode::AugmentReal => gj.add(&real_gram)?,
        };
        let dae = fit_closed_form_gram(&fit_gram, config.sigma)?;
        let eig = sym_eig(&gj)?;
        let eigenvalues: Vec<f64> = eig
            .eigenvalues
            .iter()
            .take(config.top_k)
            .map(|&l| l.max(0.0))
            .collect();
        let out = dae.apply(x)?;
        let (pc0, dim0_std) = dim_tracks(&out)?;
        let w2 = match target {
            Some(t) => Some(w2_gaussian(&GaussianSpec::fit(&out)?, t)?),
            None => None,
        };
        let w2_emp = match reference {
            Some(r) => {
                let rows: Vec<usize> = (0..r.rows()).collect();
                Some(w2_empirical(&out.select_rows(&rows), r)?)
            }
            None => None,
        };
        let sn = spectral_norm(dae.phi());
        steps.push(CollapseStep {
            j,
            spec_norm_sq: sn * sn,
            frob_norm: frobenius_norm(dae.phi()),
            rank_tau02: numerical_rank(dae.phi(), RANK_TAU)?,
            thm1_bound: theorem1_bound(tau, config.sigma, j)?,
            prop2_floor: floor,
            eigenvalues,
            w2_gauss: w2,
            w2_empirical: w2_emp,
            pc0,
            dim0_std,
        });
        xj = self_consume_step(&dae, &xj, config.sigma_hat, config.noise_scale, rng)?;
        if !xj.is_finite() {
            return Err(Error::NonFinite(format!("loop samples at iteration {j}")));
        }
    }
    Ok(CollapseTrace { tau, steps })
}

/// `sup_i ‖(Φ−I)x̃_i + σ²(Σ+σ²I)⁻¹x̃_i‖` over the rows of `points`.
pub fn check_score_identity(dae: &LinearDae, covariance: &Matrix, points: &Matrix) -> Result<f64> {
    let d = dae.dim();
    if covariance.shape() != (d, d) || points.cols() != d {
        return Err(Error::Shape("covariance and points must match the model dimension".into()));
    }
    let s2 = dae.sigma() * dae.sigma();
    let e = sym_eig(covariance)?;
    let inv = e.reconstruct_with(|l| {
        let v = l.max(0.0) + s2;
        if v == 0.0 {
            0.0
        } else {
            1.0 / v
        }
    });
    let lhs = dae.phi().sub(&Matrix::identity(d))?;
    let op = lhs.add(&inv.scale(s2))?;
    let resid = points.matmul_t(&op)?;
    Ok((0..resid.rows())
        .map(|i| crate::numerics::norm2(resid.row(i)))
        .fold(0.0, f64::max))
}

/// Mean over rows of `‖Φx − x‖²` plus `σ²‖Φ‖_F²`: the expected per-row
/// loss `E‖Φ(x+z) − x‖²` with `z ~ N(0, σ²I)`.
pub fn regularized_loss(dae: &LinearDae, x: &Matrix, sigma: f64) -> Result<f64> {
    let resid = dae.apply(x)?.sub(x)?;
    Ok(resid.frobenius_norm().powi(2) / x.rows() as f64
        + sigma * sigma * dae.phi().frobenius_norm().powi(2))
}

/// Monte-Carlo estimate of the same expectation with `draws` noise draws
/// per row.
pub fn noisy_loss_mc(
    dae: &LinearDae,
    x: &Matrix,
    sigma: f64,
    draws: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be >= 1".into()));
    }
    let (n, d) = x.shape();
    let phi = dae.phi();
    let mut total = 0.0;
    let mut y = vec![0.0; d];
    for i in 0..n {
        let xi = x.row(i);
        for _ in 0..draws {
            for (yk, xk) in y.iter_mut().zip(xi) {
                *yk = xk + sigma * rng.normal();
            }
            for a in 0..d {
                let v: f64 = crate::numerics::dot(phi.row(a), &y) - xi[a];
                total += v * v;
            }
        }
    }
    Ok(total / (n * draws) as f64)
}

//! Seeded random streams, Gaussian and mixture samplers, the low-rank data
//! model and the named dataset presets.
//!
//! `RngStream` wraps a ChaCha8 counter generator keyed by `(seed, stream)`.
//! Normals come from Box–Muller on top of it, so the same key always yields
//! the same numbers on the same build.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::numerics::{psd_sqrt, sym_eig, Matrix};

/// A deterministic random stream identified by `(seed, stream id)`.
#[derive(Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl fmt::Debug for RngStream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RngStream")
            .field("seed", &self.seed)
            .field("stream", &self.stream)
            .field("word_pos", &self.rng.get_word_pos())
            .finish()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream {
            seed,
            stream,
            rng,
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream
    }

    /// An independent stream keyed by this stream's identity and `tag`.
    /// Does not advance `self`.
    pub fn derive(&self, tag: u64) -> RngStream {
        let key = splitmix64(self.seed ^ splitmix64(self.stream.wrapping_add(splitmix64(tag))));
        RngStream::new(key, tag)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller; the second variate of each pair is
    /// cached.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * PI * u2).sin_cos();
        self.spare_normal = Some(r * s);
        r * c
    }

    /// Uniform integer in `0..n` without modulo bias.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n` in random order.
    pub fn choose_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot choose {k} of {n} without replacement");
        let mut p: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            p.swap(i, j);
        }
        p.truncate(k);
        p
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }
}

/// Covariance of a Gaussian, with a diagonal fast path.
#[derive(Debug, Clone, PartialEq)]
pub enum Covariance {
    Diagonal(Vec<f64>),
    Full(Matrix),
}

impl Covariance {
    pub fn dim(&self) -> usize {
        match self {
            Covariance::Diagonal(d) => d.len(),
            Covariance::Full(m) => m.rows(),
        }
    }

    pub fn to_matrix(&self) -> Matrix {
        match self {
            Covariance::Diagonal(d) => Matrix::from_diag(d),
            Covariance::Full(m) => m.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub covariance: Covariance,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, covariance: Covariance) -> Result<Self> {
        let spec = GaussianSpec { mean, covariance };
        spec.validate()?;
        Ok(spec)
    }

    pub fn isotropic(dim: usize, variance: f64) -> Result<Self> {
        Self::new(vec![0.0; dim], Covariance::Diagonal(vec![variance; dim]))
    }

    pub fn standard(dim: usize) -> Self {
        Self::isotropic(dim, 1.0).expect("unit variance is valid")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance_matrix(&self) -> Matrix {
        self.covariance.to_matrix()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.mean.len();
        if self.covariance.dim() != d {
            return Err(Error::Shape(format!(
                "mean has dimension {d}, covariance {}",
                self.covariance.dim()
            )));
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian mean".into()));
        }
        match &self.covariance {
            Covariance::Diagonal(v) => {
                if let Some(&bad) = v.iter().find(|&&x| !(x >= 0.0) || !x.is_finite()) {
                    return Err(Error::NotPsd {
                        min_eigenvalue: bad,
                    });
                }
            }
            Covariance::Full(m) => {
                let e = sym_eig(m)?;
                if e.min() < -1e-10 * e.max().abs().max(1.0) {
                    return Err(Error::NotPsd {
                        min_eigenvalue: e.min(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Empirical mean and covariance of `samples`.
    pub fn fit(samples: &Matrix) -> Result<Self> {
        if samples.rows() < 2 {
            return Err(Error::InvalidArgument(
                "fitting a Gaussian needs at least two samples".into(),
            ));
        }
        Ok(GaussianSpec {
            mean: samples.column_means(),
            covariance: Covariance::Full(samples.sample_covariance()),
        })
    }
}

/// Draws `n` rows from `spec`.
pub fn sample_gaussian(spec: &GaussianSpec, n: usize, rng: &mut RngStream) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    spec.validate()?;
    let d = spec.dim();
    let mut out = rng.normal_matrix(n, d);
    match &spec.covariance {
        Covariance::Diagonal(var) => {
            let sd: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
            for i in 0..n {
                for ((x, s), m) in out.row_mut(i).iter_mut().zip(&sd).zip(&spec.mean) {
                    *x = m + s * *x;
                }
            }
        }
        Covariance::Full(cov) => {
            let root = psd_sqrt(cov)?;
            // root is symmetric, so row · root == (root · row)ᵀ.
            out = out.matmul(&root)?;
            for i in 0..n {
                for (x, m) in out.row_mut(i).iter_mut().zip(&spec.mean) {
                    *x += m;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSpec {
    components: Vec<(f64, GaussianSpec)>,
}

impl MixtureSpec {
    pub fn new(components: Vec<(f64, GaussianSpec)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument("mixture needs a component".into()));
        }
        let d = components[0].1.dim();
        let mut total = 0.0;
        for (w, g) in &components {
            if !(*w >= 0.0) {
                return Err(Error::InvalidArgument(format!("negative mixture weight {w}")));
            }
            if g.dim() != d {
                return Err(Error::Shape("mixture components differ in dimension".into()));
            }
            g.validate()?;
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "mixture weights sum to {total}, expected 1"
            )));
        }
        Ok(MixtureSpec { components })
    }

    /// `count` equal-weight isotropic components evenly spaced on a circle
    /// in the first two coordinates.
    pub fn ring(count: usize, radius: f64, std: f64) -> Result<Self> {
        let w = 1.0 / count as f64;
        let components = (0..count)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / count as f64;
                GaussianSpec::new(
                    vec![radius * a.cos(), radius * a.sin()],
                    Covariance::Diagonal(vec![std * std; 2]),
                )
                .map(|g| (w, g))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(components)
    }

    pub fn dim(&self) -> usize {
        self.components[0].1.dim()
    }

    pub fn components(&self) -> &[(f64, GaussianSpec)] {
        &self.components
    }

    /// Mean and covariance of the whole mixture.
    pub fn moments(&self) -> GaussianSpec {
        let d = self.dim();
        let mut mean = vec![0.0; d];
        for (w, g) in &self.components {
            for (m, gm) in mean.iter_mut().zip(&g.mean) {
                *m += w * gm;
            }
        }
        let mut cov = Matrix::zeros(d, d);
        for (w, g) in &self.components {
            let c = g.covariance_matrix();
            for i in 0..d {
                for j in 0..d {
                    let di = g.mean[i] - mean[i];
                    let dj = g.mean[j] - mean[j];
                    cov[(i, j)] += w * (c[(i, j)] + di * dj);
                }
            }
        }
        GaussianSpec {
            mean,
            covariance: Covariance::Full(cov),
        }
    }
}

/// Draws `n` rows, choosing the component of each row by weight.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, rng: &mut RngStream) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let mut cumulative = Vec::with_capacity(spec.components.len());
    let mut acc = 0.0;
    for (w, _) in &spec.components {
        acc += w;
        cumulative.push(acc);
    }
    let d = spec.dim();
    let mut out = Matrix::zeros(n, d);
    for i in 0..n {
        let u = rng.uniform();
        let k = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or_else(|| last_positive(&spec.components));
        let row = sample_gaussian(&spec.components[k].1, 1, rng)?;
        out.row_mut(i).copy_from_slice(row.row(0));
    }
    Ok(out)
}

/// Draws `n` rows with component counts fixed at `round(w_k n)` (the
/// remainder goes to the heaviest components), then shuffles the rows.
pub fn sample_mixture_stratified(
    spec: &MixtureSpec,
    n: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let mut counts: Vec<usize> = spec
        .components
        .iter()
        .map(|(w, _)| (w * n as f64).floor() as usize)
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| spec.components[b].0.total_cmp(&spec.components[a].0));
    let mut k = 0;
    while counts.iter().sum::<usize>() < n {
        counts[order[k % order.len()]] += 1;
        k += 1;
    }
    let mut out = Matrix::zeros(n, spec.dim());
    let mut row = 0;
    for ((_, g), &c) in spec.components.iter().zip(&counts) {
        if c == 0 {
            continue;
        }
        let block = sample_gaussian(g, c, rng)?;
        for i in 0..c {
            out.row_mut(row).copy_from_slice(block.row(i));
            row += 1;
        }
    }
    let perm = rng.permutation(n);
    Ok(out.select_rows(&perm))
}

fn last_positive(components: &[(f64, GaussianSpec)]) -> usize {
    components.iter().rposition(|(w, _)| *w > 0.0).unwrap_or(0)
}

/// Gram–Schmidt (twice, for stability) on the columns of `a`.
pub fn orthonormalize_columns(a: &Matrix) -> Result<Matrix> {
    let (d, r) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..r).map(|j| a.column(j)).collect();
    for j in 0..r {
        for _ in 0..2 {
            for k in 0..j {
                let proj = crate::numerics::dot(&cols[j], &cols[k]);
                let (done, rest) = cols.split_at_mut(j);
                for (x, q) in rest[0].iter_mut().zip(&done[k]) {
                    *x -= proj * q;
                }
            }
        }
        let norm = crate::numerics::norm2(&cols[j]);
        if norm < 1e-12 {
            return Err(Error::IllPosed("columns are linearly dependent".into()));
        }
        cols[j].iter_mut().for_each(|x| *x /= norm);
    }
    Ok(Matrix::from_fn(d, r, |i, j| cols[j][i]))
}

/// Data `x = U Uᵀ a`, `a ~ N(0, I)`, living on the span of an orthonormal
/// basis `U` (d×r).
#[derive(Debug, Clone)]
pub struct LowRankDataModel {
    basis: Matrix,
}

impl LowRankDataModel {
    pub fn new(basis: Matrix) -> Result<Self> {
        let r = basis.cols();
        if r == 0 || r > basis.rows() {
            return Err(Error::Shape(format!(
                "basis must be d x r with 1 <= r <= d, got {}x{}",
                basis.rows(),
                r
            )));
        }
        let utu = basis.gram();
        let err = utu.sub(&Matrix::identity(r))?.max_abs();
        if err > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "basis columns are not orthonormal (max error {err:e})"
            )));
        }
        Ok(LowRankDataModel { basis })
    }

    /// A uniformly random r-dimensional subspace of R^d.
    pub fn random(dim: usize, rank: usize, rng: &mut RngStream) -> Result<Self> {
        let raw = rng.normal_matrix(dim, rank);
        Self::new(orthonormalize_columns(&raw)?)
    }

    pub fn dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn rank(&self) -> usize {
        self.basis.cols()
    }

    pub fn basis(&self) -> &Matrix {
        &self.basis
    }

    pub fn projector(&self) -> Matrix {
        self.basis.matmul_t(&self.basis).expect("shapes agree")
    }
}

pub fn make_lowrank_dataset(
    model: &LowRankDataModel,
    n: usize,
    rng: &mut RngStream,
) -> Result<Matrix> {
    if n == 0 {
        return Err(Error::InvalidArgument("sample count must be >= 1".into()));
    }
    let a = rng.normal_matrix(n, model.dim());
    // Rows: (U Uᵀ a)ᵀ = (aᵀ U) Uᵀ.
    let coords = a.matmul(&model.basis)?;
    coords.matmul_t(&model.basis)
}

/// A sampleable data distribution.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Gaussian(GaussianSpec),
    Mixture(MixtureSpec),
}

impl Distribution {
    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian(g) => g.dim(),
            Distribution::Mixture(m) => m.dim(),
        }
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Result<Matrix> {
        match self {
            Distribution::Gaussian(g) => sample_gaussian(g, n, rng),
            Distribution::Mixture(m) => sample_mixture(m, n, rng),
        }
    }

    /// As [`Distribution::sample`], but mixtures get exact per-component
    /// counts.
    pub fn sample_stratified(&self, n: usize, rng: &mut RngStream) -> Result<Matrix> {
        match self {
            Distribution::Gaussian(g) => sample_gaussian(g, n, rng),
            Distribution::Mixture(m) => sample_mixture_stratified(m, n, rng),
        }
    }

    /// First two moments as a Gaussian.
    pub fn moments(&self) -> GaussianSpec {
        match self {
            Distribution::Gaussian(g) => g.clone(),
            Distribution::Mixture(m) => m.moments(),
        }
    }

    pub fn as_gaussian(&self) -> Option<&GaussianSpec> {
        match self {
            Distribution::Gaussian(g) => Some(g),
            Distribution::Mixture(_) => None,
        }
    }
}

/// Layout of the 2-D ring mixture preset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RingLayout {
    pub components: usize,
    pub radius: f64,
    pub std: f64,
}

impl Default for RingLayout {
    fn default() -> Self {
        RingLayout {
            components: 6,
            radius: 8.0,
            std: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PresetName {
    /// 4-D Gaussian task for the DAE loop: N(0, I) noise, N(0, 5I) data.
    Dae4d,
    /// 10-D linear rectified flow task: N(0, I) noise, N(0, 5I) data with
    /// the variance of coordinate 1 lowered to 1e-3.
    Rf10d,
    /// 2-D ring of Gaussians.
    Mix2d,
}

impl PresetName {
    pub const ALL: [PresetName; 3] = [PresetName::Dae4d, PresetName::Rf10d, PresetName::Mix2d];

    pub fn as_str(self) -> &'static str {
        match self {
            PresetName::Dae4d => "dae-4d",
            PresetName::Rf10d => "rf-10d",
            PresetName::Mix2d => "mix-2d",
        }
    }
}

impl std::str::FromStr for PresetName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PresetName::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::UnknownPreset(s.to_string()))
    }
}

impl fmt::Display for PresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A named task: the noise (source) distribution and the data (target).
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: PresetName,
    pub source: GaussianSpec,
    pub target: Distribution,
}

impl Preset {
    pub fn dim(&self) -> usize {
        self.source.dim()
    }

    pub fn sample_source(&self, n: usize, rng: &mut RngStream) -> Result<Matrix> {
        sample_gaussian(&self.source, n, rng)
    }

    pub fn sample_target(&self, n: usize, rng: &mut RngStream) -> Result<Matrix> {
        self.target.sample(n, rng)
    }
}

pub fn preset(name: &str) -> Result<Preset> {
    preset_with_layout(name.parse()?, RingLayout::default())
}

pub fn preset_with_layout(name: PresetName, ring: RingLayout) -> Result<Preset> {
    Ok(match name {
        PresetName::Dae4d => Preset {
            name,
            source: GaussianSpec::standard(4),
            target: Distribution::Gaussian(GaussianSpec::isotropic(4, 5.0)?),
        },
        PresetName::Rf10d => {
            let mut var = vec![5.0; 10];
            var[1] = 1e-3;
            Preset {
                name,
                source: GaussianSpec::standard(10),
                target: Distribution::Gaussian(GaussianSpec::new(
                    vec![0.0; 10],
                    Covariance::Diagonal(var),
                )?),
            }
        }
        PresetName::Mix2d => Preset {
            name,
            source: GaussianSpec::standard(2),
            target: Distribution::Mixture(MixtureSpec::ring(
                ring.components,
                ring.radius,
                ring.std,
            )?),
        },
    })
}

/// Writes samples as CSV with a `x0,x1,...` header.
pub fn write_samples_csv(path: &Path, samples: &Matrix) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..samples.cols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..samples.rows() {
        let row: Vec<String> = samples.row(i).iter().map(|v| format!("{v:e}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::numerical_rank;

    #[test]
    fn same_key_same_numbers() {
        let mut a = RngStream::new(42, 3);
        let mut b = RngStream::new(42, 3);
        for _ in 0..100 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
        let g = GaussianSpec::isotropic(3, 2.0).unwrap();
        let x = sample_gaussian(&g, 50, &mut RngStream::new(1, 0)).unwrap();
        let y = sample_gaussian(&g, 50, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let mut a = RngStream::new(5, 0);
        let mut b = RngStream::new(5, 1);
        let xs: Vec<f64> = (0..n).map(|_| a.normal()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.normal()).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        assert!((sxy / (sxx * syy).sqrt()).abs() < 0.05);
    }

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let root = RngStream::new(9, 0);
        let mut a = root.derive(1);
        let mut a2 = root.derive(1);
        let mut b = root.derive(2);
        let va = a.next_u64();
        assert_eq!(va, a2.next_u64());
        assert_ne!(va, b.next_u64());
    }

    #[test]
    fn gaussian_covariance_converges() {
        let g = GaussianSpec::standard(4);
        let x = sample_gaussian(&g, 100_000, &mut RngStream::new(2, 0)).unwrap();
        let cov = x.sample_covariance();
        assert!(cov.sub(&Matrix::identity(4)).unwrap().frobenius_norm() < 0.05);
    }

    #[test]
    fn full_covariance_sampling() {
        let c = Matrix::from_rows(&[[2.0, 0.8], [0.8, 1.0]]).unwrap();
        let g = GaussianSpec::new(vec![1.0, -1.0], Covariance::Full(c.clone())).unwrap();
        let x = sample_gaussian(&g, 100_000, &mut RngStream::new(3, 0)).unwrap();
        assert!(x.sample_covariance().sub(&c).unwrap().frobenius_norm() < 0.05);
        let m = x.column_means();
        assert!((m[0] - 1.0).abs() < 0.02 && (m[1] + 1.0).abs() < 0.02);
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let g = GaussianSpec::new(vec![1.5, -2.0], Covariance::Diagonal(vec![0.0, 0.0])).unwrap();
        let x = sample_gaussian(&g, 10, &mut RngStream::new(0, 0)).unwrap();
        for i in 0..10 {
            assert_eq!(x.row(i), &[1.5, -2.0]);
        }
    }

    #[test]
    fn rejects_non_psd_and_empty() {
        let bad = Matrix::from_rows(&[[1.0, 2.0], [2.0, 1.0]]).unwrap();
        assert!(matches!(
            GaussianSpec::new(vec![0.0, 0.0], Covariance::Full(bad)),
            Err(Error::NotPsd { .. })
        ));
        assert!(GaussianSpec::new(vec![0.0], Covariance::Diagonal(vec![-1.0])).is_err());
        let g = GaussianSpec::standard(2);
        assert!(sample_gaussian(&g, 0, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn single_component_mixture_matches_gaussian_law() {
        let g = GaussianSpec::isotropic(2, 3.0).unwrap();
        let mix = MixtureSpec::new(vec![(1.0, g.clone())]).unwrap();
        let x = sample_mixture(&mix, 50_000, &mut RngStream::new(4, 0)).unwrap();
        let cov = x.sample_covariance();
        assert!(cov.sub(&g.covariance_matrix()).unwrap().frobenius_norm() < 0.1);
    }

    #[test]
    fn mixture_counts_are_binomial() {
        let left = GaussianSpec::new(vec![-100.0], Covariance::Diagonal(vec![1.0])).unwrap();
        let right = GaussianSpec::new(vec![100.0], Covariance::Diagonal(vec![1.0])).unwrap();
        let mix = MixtureSpec::new(vec![(0.5, left), (0.5, right)]).unwrap();
        let n = 10_000;
        let x = sample_mixture(&mix, n, &mut RngStream::new(8, 0)).unwrap();
        let left_count = (0..n).filter(|&i| x[(i, 0)] < 0.0).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((left_count - 5_000.0).abs() < 3.0 * sd);
    }

    #[test]
    fn zero_weight_component_never_drawn() {
        let a = GaussianSpec::new(vec![0.0], Covariance::Diagonal(vec![1.0])).unwrap();
        let b = GaussianSpec::new(vec![1000.0], Covariance::Diagonal(vec![1.0])).unwrap();
        let mix = MixtureSpec::new(vec![(1.0, a), (0.0, b)]).unwrap();
        let x = sample_mixture(&mix, 5_000, &mut RngStream::new(1, 1)).unwrap();
        assert!(x.data().iter().all(|v| v.abs() < 100.0));
    }

    #[test]
    fn stratified_mixture_counts_are_exact() {
        let mix = MixtureSpec::ring(6, 8.0, 0.3).unwrap();
        let x = sample_mixture_stratified(&mix, 600, &mut RngStream::new(2, 2)).unwrap();
        let mut counts = [0usize; 6];
        for i in 0..600 {
            let a = x[(i, 1)].atan2(x[(i, 0)]);
            let k = ((a / (2.0 * PI / 6.0)).round() as i64).rem_euclid(6) as usize;
            counts[k] += 1;
        }
        assert_eq!(counts, [100; 6]);
        let y = sample_mixture_stratified(&mix, 7, &mut RngStream::new(2, 3)).unwrap();
        assert_eq!(y.rows(), 7);
    }

    #[test]
    fn mixture_weights_must_sum_to_one() {
        let a = GaussianSpec::standard(1);
        assert!(MixtureSpec::new(vec![(0.5, a.clone()), (0.4, a)]).is_err());
    }

    #[test]
    fn lowrank_full_rank_and_rank_one() {
        let mut rng = RngStream::new(6, 0);
        let full = LowRankDataModel::new(Matrix::identity(3)).unwrap();
        let x = make_lowrank_dataset(&full, 200, &mut rng).unwrap();
        assert_eq!(numerical_rank(&x.gram(), 1e-8).unwrap(), 3);

        let one = LowRankDataModel::random(4, 1, &mut rng).unwrap();
        let u = one.basis().column(0);
        let x = make_lowrank_dataset(&one, 20, &mut rng).unwrap();
        for i in 0..20 {
            let r = x.row(i);
            let along = crate::numerics::dot(r, &u);
            let resid: f64 = r
                .iter()
                .zip(&u)
                .map(|(a, b)| (a - along * b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(resid < 1e-12);
        }
    }

    #[test]
    fn lowrank_gram_eigencount() {
        let mut rng = RngStream::new(10, 0);
        let model = LowRankDataModel::random(4, 2, &mut rng).unwrap();
        let x = make_lowrank_dataset(&model, 100, &mut rng).unwrap();
        let e = sym_eig(&x.gram()).unwrap();
        let cut = 1e-8 * e.max();
        assert_eq!(e.eigenvalues.iter().filter(|&&l| l > cut).count(), 2);

        let residual = x
            .matmul(&Matrix::identity(4).sub(&model.projector()).unwrap())
            .unwrap();
        assert!(residual.max_abs() < 1e-12);
    }

    #[test]
    fn lowrank_rejects_non_orthonormal_basis() {
        let b = Matrix::from_rows(&[[1.0], [1.0]]).unwrap();
        assert!(LowRankDataModel::new(b).is_err());
    }

    #[test]
    fn presets() {
        let p = preset("dae-4d").unwrap();
        assert_eq!(p.dim(), 4);
        assert_eq!(
            p.target.as_gaussian().unwrap().covariance,
            Covariance::Diagonal(vec![5.0; 4])
        );

        let p = preset("rf-10d").unwrap();
        let Covariance::Diagonal(v) = &p.target.as_gaussian().unwrap().covariance else {
            panic!("diagonal expected");
        };
        assert_eq!(v.len(), 10);
        assert_eq!(v[1], 1e-3);
        assert!(v.iter().enumerate().all(|(i, &x)| i == 1 || x == 5.0));

        let p = preset("mix-2d").unwrap();
        let Distribution::Mixture(m) = &p.target else {
            panic!("mixture expected");
        };
        assert_eq!(m.components().len(), 6);
        for (w, g) in m.components() {
            assert!((w - 1.0 / 6.0).abs() < 1e-15);
            assert!((crate::numerics::norm2(&g.mean) - 8.0).abs() < 1e-12);
        }
        let x = p.sample_target(6_000, &mut RngStream::new(0, 0)).unwrap();
        let radii: Vec<f64> = (0..x.rows()).map(|i| crate::numerics::norm2(x.row(i))).collect();
        let mean_r = radii.iter().sum::<f64>() / radii.len() as f64;
        assert!((mean_r - 8.0).abs() < 0.05);

        assert!(matches!(preset("cifar"), Err(Error::UnknownPreset(_))));
    }

    #[test]
    fn choose_distinct_is_a_subset() {
        let mut rng = RngStream::new(1, 2);
        let mut picked = rng.choose_distinct(50, 20);
        picked.sort();
        picked.dedup();
        assert_eq!(picked.len(), 20);
        assert!(picked.iter().all(|&i| i < 50));
    }
}

//! Reflow and its real-data augmented variants.
//!
//! Every reflow iteration `j` trains the field on couplings `(z, x)`:
//!
//! * vanilla: synthetic pairs `(z, ODE(0→1, z))` from the previous model;
//! * RA: a fraction `λ` of synthetic pairs plus reverse-real pairs
//!   `(ODE(1→0, x), x)`, with the reverse half regenerated by the model in
//!   training every `α` epochs;
//! * ORA: both halves regenerated for every minibatch by the model in
//!   training, nothing stored;
//! * RAS: ORA with an Euler–Maruyama reverse pass.
//!
//! The model is warm-started from the previous iteration unless configured
//! otherwise; Adam state is reset every iteration.
//!
//! Randomness comes from independent streams keyed by
//! `(seed, purpose, iteration)`, so variants that coincide mathematically
//! also coincide byte for byte.
//!
//! # Pair store layout
//!
//! A store is a directory with
//!
//! * `z.bin`, `x.bin`: little-endian f64, row-major, `count × dim`;
//! * `provenance.bin`: one byte per row, 0 synthetic, 1 reverse-real;
//! * `synthetic_generator/`, `reverse_generator/`: model checkpoints that
//!   produced the two halves;
//! * `manifest.txt`: `key=value` lines, written last via rename.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{GaussianSpec, Preset, RngStream};
use crate::dynamics::{
    integrate, ode_integrate, EpochBatches, IntegratorConfig, PairBatch, PairSource, Provenance,
    TrainConfig, TrainReport,
};
use crate::error::{Error, Result};
use crate::field::{read_f64s, read_kv, write_kv, Architecture, VectorField, VelocityField};
use crate::metrics::{
    collapse_distance_from, coordinate_std, dim_tracks, straightness, w2_empirical, w2_gaussian,
    MetricSeries,
};
use crate::numerics::{spectral_norm, Matrix};

pub const STORE_FORMAT: &str = "pair-store-v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReverseMode {
    Ode,
    Sde { sigma: f64 },
}

impl ReverseMode {
    pub fn integrator(self, nfe: usize) -> IntegratorConfig {
        let cfg = IntegratorConfig::reverse(nfe);
        match self {
            ReverseMode::Ode => cfg,
            ReverseMode::Sde { sigma } => cfg.with_sde(sigma),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReverseMode::Ode => "ode",
            ReverseMode::Sde { .. } => "sde",
        }
    }

    pub fn sigma(self) -> f64 {
        match self {
            ReverseMode::Ode => 0.0,
            ReverseMode::Sde { sigma } => sigma,
        }
    }
}

/// How often the reverse-real pairs are rebuilt during an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regeneration {
    /// Generated once per reflow iteration.
    Never,
    /// Regenerated for every minibatch; nothing is stored.
    Online,
    /// Regenerated every `k` epochs over the stored pair set.
    Every(usize),
}

impl FromStr for Regeneration {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "inf" | "never" => Ok(Regeneration::Never),
            "0" | "online" => Ok(Regeneration::Online),
            k => k
                .parse()
                .map(Regeneration::Every)
                .map_err(|_| Error::Config(format!("bad regeneration cadence `{s}`"))),
        }
    }
}

impl fmt::Display for Regeneration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regeneration::Never => f.write_str("inf"),
            Regeneration::Online => f.write_str("0"),
            Regeneration::Every(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReflowConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub alpha: Regeneration,
    /// Pair set size per iteration (per minibatch count comes from
    /// `train.batch` in online mode).
    pub pairs: usize,
    pub nfe: usize,
    pub reverse_mode: ReverseMode,
    /// Also regenerate the synthetic half at the `α` cadence.
    pub refresh_synthetic: bool,
    pub warm_start: bool,
    pub train: TrainConfig,
}

impl Default for ReflowConfig {
    fn default() -> Self {
        ReflowConfig {
            iterations: 10,
            lambda: 0.5,
            alpha: Regeneration::Every(2),
            pairs: 10_000,
            nfe: 100,
            reverse_mode: ReverseMode::Ode,
            refresh_synthetic: false,
            warm_start: true,
            train: TrainConfig::default(),
        }
    }
}

impl ReflowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must be in [0, 1], got {}", self.lambda)));
        }
        if self.pairs == 0 {
            return Err(Error::Config("pairs must be >= 1".into()));
        }
        if self.nfe == 0 {
            return Err(Error::Config("nfe must be >= 1".into()));
        }
        if self.alpha == Regeneration::Every(0) {
            return Err(Error::Config("use alpha = 0 for online regeneration".into()));
        }
        if !(self.reverse_mode.sigma() >= 0.0) {
            return Err(Error::Config("sde sigma must be >= 0".into()));
        }
        self.train.validate()
    }
}

/// `round-half-up(λ n)`.
pub fn synthetic_count(lambda: f64, n: usize) -> usize {
    ((lambda * n as f64) + 0.5).floor().min(n as f64) as usize
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum Purpose {
    Noise = 1,
    Select = 2,
    Mix = 3,
    Sde = 4,
    Permute = 5,
    Time = 6,
    Init = 7,
    Eval = 8,
}

fn stream(seed: u64, purpose: Purpose, iteration: usize) -> RngStream {
    RngStream::new(seed, 0).derive(((purpose as u64) << 32) | iteration as u64)
}

/// The per-iteration random streams.
pub struct Streams {
    pub noise: RngStream,
    pub select: RngStream,
    pub mix: RngStream,
    pub sde: RngStream,
    pub permute: RngStream,
    pub time: RngStream,
    pub init: RngStream,
}

impl Streams {
    pub fn new(seed: u64, iteration: usize) -> Self {
        Streams {
            noise: stream(seed, Purpose::Noise, iteration),
            select: stream(seed, Purpose::Select, iteration),
            mix: stream(seed, Purpose::Mix, iteration),
            sde: stream(seed, Purpose::Sde, iteration),
            permute: stream(seed, Purpose::Permute, iteration),
            time: stream(seed, Purpose::Time, iteration),
            init: stream(seed, Purpose::Init, iteration),
        }
    }
}

/// `n` pairs `(z, ODE(0→1, z))` with fresh standard-normal `z`.
pub fn generate_synthetic_pairs(
    field: &dyn VelocityField,
    n: usize,
    nfe: usize,
    rng: &mut RngStream,
) -> Result<PairBatch> {
    let d = field.dim();
    if n == 0 {
        return Ok(PairBatch::empty(d));
    }
    let z = rng.normal_matrix(n, d);
    let x = ode_integrate(field, &IntegratorConfig::forward(nfe), &z)?;
    PairBatch::uniform(z, x, Provenance::Synthetic)
}

/// Pairs `(ẑ, x)` with `ẑ` the reverse endpoint of each real row.
pub fn generate_reverse_pairs(
    field: &dyn VelocityField,
    real: &Matrix,
    nfe: usize,
    mode: ReverseMode,
    rng: &mut RngStream,
) -> Result<PairBatch> {
    if real.rows() == 0 {
        return Err(Error::InvalidArgument("no real rows to reverse".into()));
    }
    let z = integrate(field, &mode.integrator(nfe), real, rng)?;
    PairBatch::uniform(z, real.clone(), Provenance::ReverseReal)
}

/// Selects `round-half-up(λn)` synthetic and the remaining reverse-real
/// rows without replacement, then shuffles.
pub fn mix_pairs(
    synth: &PairBatch,
    real: &PairBatch,
    lambda: f64,
    n: usize,
    rng: &mut RngStream,
) -> Result<PairBatch> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda {lambda} outside [0, 1]")));
    }
    let n_syn = synthetic_count(lambda, n);
    let n_real = n - n_syn;
    if synth.len() < n_syn {
        return Err(Error::InsufficientPairs {
            side: "synthetic",
            needed: n_syn,
            available: synth.len(),
        });
    }
    if real.len() < n_real {
        return Err(Error::InsufficientPairs {
            side: "reverse-real",
            needed: n_real,
            available: real.len(),
        });
    }
    let si = rng.choose_distinct(synth.len(), n_syn);
    let ri = rng.choose_distinct(real.len(), n_real);
    let combined = synth.select(&si).concat(&real.select(&ri))?;
    let perm = rng.permutation(n);
    Ok(combined.select(&perm))
}

/// `k` real rows: without replacement when possible, otherwise with
/// replacement. The flag reports which happened.
pub fn select_real_rows(real: &Matrix, k: usize, rng: &mut RngStream) -> (Matrix, bool) {
    if k <= real.rows() {
        (real.select_rows(&rng.choose_distinct(real.rows(), k)), false)
    } else {
        let idx: Vec<usize> = (0..k).map(|_| rng.below(real.rows())).collect();
        (real.select_rows(&idx), true)
    }
}

/// Builds `n` mixed pairs from `gen`: the synthetic half from fresh noise,
/// the reverse-real half from selected real rows.
#[allow(clippy::too_many_arguments)]
pub fn assemble_pairs(
    gen: &dyn VelocityField,
    real: &Matrix,
    lambda: f64,
    n: usize,
    nfe: usize,
    mode: ReverseMode,
    streams: &mut Streams,
) -> Result<(PairBatch, bool)> {
    let synth = generate_synthetic_pairs(gen, synthetic_count(lambda, n), nfe, &mut streams.noise)?;
    remix_with_reverse(gen, real, &synth, lambda, n, nfe, mode, streams)
}

/// Mixes `synth` with reverse-real pairs of freshly selected real rows.
#[allow(clippy::too_many_arguments)]
pub fn remix_with_reverse(
    gen: &dyn VelocityField,
    real: &Matrix,
    synth: &PairBatch,
    lambda: f64,
    n: usize,
    nfe: usize,
    mode: ReverseMode,
    streams: &mut Streams,
) -> Result<(PairBatch, bool)> {
    let n_real = n - synthetic_count(lambda, n);
    let (rev, replaced) = if n_real > 0 {
        if real.rows() == 0 {
            return Err(Error::InsufficientPairs {
                side: "reverse-real",
                needed: n_real,
                available: 0,
            });
        }
        let (xr, replaced) = select_real_rows(real, n_real, &mut streams.select);
        (generate_reverse_pairs(gen, &xr, nfe, mode, &mut streams.sde)?, replaced)
    } else {
        (PairBatch::empty(gen.dim()), false)
    };
    Ok((mix_pairs(synth, &rev, lambda, n, &mut streams.mix)?, replaced))
}

/// Digests of every training batch, and copies of the first few, per
/// reflow iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchLog {
    pub capture: usize,
    pub digests: Vec<Vec<[u8; 32]>>,
    pub batches: Vec<Vec<PairBatch>>,
}

impl BatchLog {
    pub fn new(capture: usize) -> Self {
        BatchLog {
            capture,
            ..Default::default()
        }
    }

    fn start_iteration(&mut self) {
        self.digests.push(Vec::new());
        self.batches.push(Vec::new());
    }

    fn record(&mut self, batch: &PairBatch) {
        if let Some(d) = self.digests.last_mut() {
            d.push(batch.digest());
        }
        if let Some(b) = self.batches.last_mut() {
            if b.len() < self.capture {
                b.push(batch.clone());
            }
        }
    }
}

/// Key facts written into a store manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct StoreManifest {
    pub dim: usize,
    pub count: usize,
    pub synthetic: usize,
    pub reverse_real: usize,
    pub nfe: usize,
    pub seed: u64,
    pub iteration: usize,
    pub regeneration: usize,
    pub lambda: f64,
    pub reverse_mode: ReverseMode,
    pub real_with_replacement: bool,
}

pub struct PairStore;

impl PairStore {
    /// Writes a complete store into `dir`; the manifest goes last.
    pub fn write(
        dir: &Path,
        pairs: &PairBatch,
        info: &StoreManifest,
        synthetic_generator: &VectorField,
        reverse_generator: &VectorField,
    ) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_f64s(&dir.join("z.bin"), pairs.z.data())?;
        write_f64s(&dir.join("x.bin"), pairs.x.data())?;
        let prov: Vec<u8> = pairs.provenance.iter().map(|&p| p as u8).collect();
        let pp = dir.join("provenance.bin");
        std::fs::write(&pp, prov).map_err(|e| Error::io(&pp, e))?;
        synthetic_generator.save(&dir.join("synthetic_generator"), info.seed)?;
        reverse_generator.save(&dir.join("reverse_generator"), info.seed)?;

        let (syn, rev) = pairs.counts();
        let mut m = BTreeMap::new();
        m.insert("format", STORE_FORMAT.to_string());
        m.insert("version", crate::VERSION.to_string());
        m.insert("dim", pairs.dim().to_string());
        m.insert("count", pairs.len().to_string());
        m.insert("synthetic", syn.to_string());
        m.insert("reverse_real", rev.to_string());
        m.insert("synthetic_generator", "synthetic_generator".to_string());
        m.insert("reverse_generator", "reverse_generator".to_string());
        m.insert("nfe", info.nfe.to_string());
        m.insert("seed", info.seed.to_string());
        m.insert("iteration", info.iteration.to_string());
        m.insert("regeneration", info.regeneration.to_string());
        m.insert("lambda", info.lambda.to_string());
        m.insert("reverse_mode", info.reverse_mode.as_str().to_string());
        m.insert("sde_sigma", info.reverse_mode.sigma().to_string());
        m.insert("real_with_replacement", info.real_with_replacement.to_string());
        let tmp = dir.join("manifest.txt.tmp");
        write_kv(&tmp, &m)?;
        let dst = dir.join("manifest.txt");
        std::fs::rename(&tmp, &dst).map_err(|e| Error::io(&dst, e))
    }

    pub fn read(dir: &Path) -> Result<(PairBatch, StoreManifest)> {
        let mpath = dir.join("manifest.txt");
        let m = read_kv(&mpath)?;
        let get = |k: &str| -> Result<&String> {
            m.get(k)
                .ok_or_else(|| Error::format(&mpath, format!("missing key `{k}`")))
        };
        fn parse<T: FromStr>(path: &Path, k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::format(path, format!("bad value `{v}` for `{k}`")))
        }
        if get("format")? != STORE_FORMAT {
            return Err(Error::format(&mpath, "unknown store format"));
        }
        let dim: usize = parse(&mpath, "dim", get("dim")?)?;
        let count: usize = parse(&mpath, "count", get("count")?)?;
        let sigma: f64 = parse(&mpath, "sde_sigma", get("sde_sigma")?)?;
        let reverse_mode = match get("reverse_mode")?.as_str() {
            "ode" => ReverseMode::Ode,
            "sde" => ReverseMode::Sde { sigma },
            other => return Err(Error::format(&mpath, format!("bad reverse mode `{other}`"))),
        };
        let info = StoreManifest {
            dim,
            count,
            synthetic: parse(&mpath, "synthetic", get("synthetic")?)?,
            reverse_real: parse(&mpath, "reverse_real", get("reverse_real")?)?,
            nfe: parse(&mpath, "nfe", get("nfe")?)?,
            seed: parse(&mpath, "seed", get("seed")?)?,
            iteration: parse(&mpath, "iteration", get("iteration")?)?,
            regeneration: parse(&mpath, "regeneration", get("regeneration")?)?,
            lambda: parse(&mpath, "lambda", get("lambda")?)?,
            reverse_mode,
            real_with_replacement: parse(
                &mpath,
                "real_with_replacement",
                get("real_with_replacement")?,
            )?,
        };
        let z = read_f64s(&dir.join("z.bin"))?;
        let x = read_f64s(&dir.join("x.bin"))?;
        let pp = dir.join("provenance.bin");
        let prov_bytes = std::fs::read(&pp).map_err(|e| Error::io(&pp, e))?;
        if z.len() != count * dim || x.len() != count * dim || prov_bytes.len() != count {
            return Err(Error::format(dir, "array sizes disagree with the manifest"));
        }
        let provenance = prov_bytes
            .iter()
            .map(|&b| Provenance::from_byte(b).ok_or_else(|| Error::format(&pp, "bad provenance byte")))
            .collect::<Result<Vec<_>>>()?;
        let pairs = PairBatch::new(Matrix::new(count, dim, z)?, Matrix::new(count, dim, x)?, provenance)?;
        let (syn, rev) = pairs.counts();
        if syn != info.synthetic || rev != info.reverse_real {
            return Err(Error::format(&mpath, "provenance counts disagree with the manifest"));
        }
        Ok((pairs, info))
    }

    /// Recomputes each stored pair with the recorded generators: synthetic
    /// rows forward from `z`, reverse-real rows (ODE stores) backward from
    /// `x`. Returns the largest absolute deviation.
    pub fn validate(dir: &Path) -> Result<f64> {
        let (pairs, info) = Self::read(dir)?;
        let (gs, _) = VectorField::load(&dir.join("synthetic_generator"))?;
        let (gr, _) = VectorField::load(&dir.join("reverse_generator"))?;
        let mut worst = 0.0_f64;
        let syn: Vec<usize> = (0..pairs.len())
            .filter(|&i| pairs.provenance[i] == Provenance::Synthetic)
            .collect();
        if !syn.is_empty() {
            let part = pairs.select(&syn);
            let x = ode_integrate(&gs, &IntegratorConfig::forward(info.nfe), &part.z)?;
            worst = worst.max(x.sub(&part.x)?.max_abs());
        }
        let rev: Vec<usize> = (0..pairs.len())
            .filter(|&i| pairs.provenance[i] == Provenance::ReverseReal)
            .collect();
        if !rev.is_empty() && info.reverse_mode == ReverseMode::Ode {
            let part = pairs.select(&rev);
            let z = ode_integrate(&gr, &IntegratorConfig::reverse(info.nfe), &part.x)?;
            worst = worst.max(z.sub(&part.z)?.max_abs());
        }
        Ok(worst)
    }
}

fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Evaluation set shared by every model of a run: fixed noise and a fixed
/// target sample.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub z: Matrix,
    pub target: Matrix,
    pub moments: GaussianSpec,
    pub nfe: usize,
    /// Rows used for the exact empirical W2 (0 disables the column).
    pub w2_points: usize,
    /// Rows used for straightness.
    pub straight_points: usize,
}

impl Evaluator {
    /// Mixture targets are sampled with exact component counts.
    pub fn new(preset: &Preset, n: usize, nfe: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Purpose::Eval, 0);
        let z = preset.sample_source(n, &mut rng)?;
        let target = preset.target.sample_stratified(n, &mut rng)?;
        Ok(Evaluator {
            z,
            target,
            moments: preset.target.moments(),
            nfe,
            w2_points: n.min(crate::metrics::MAX_ASSIGNMENT_SIZE),
            straight_points: n.min(512),
        })
    }

    pub fn columns(&self, arch: &Architecture) -> Vec<(&'static str, &'static str)> {
        let mut c = Vec::new();
        if self.w2_points > 0 {
            c.push(("w2", "w2_empirical"));
        }
        c.extend([
            ("w2_gauss", "w2_gaussian"),
            ("straightness", "straightness"),
            ("collapse_distance", "collapse_distance"),
            ("pc0", "dim_tracks"),
            ("dim0_std", "dim_tracks"),
            ("dim1_std", "coordinate_std"),
        ]);
        if matches!(arch, Architecture::LinearTime { .. }) {
            c.push(("spec_norm", "spectral_norm"));
        }
        c
    }

    pub fn series(&self, arch: &Architecture) -> MetricSeries {
        MetricSeries::new(&self.columns(arch))
    }

    /// Generated samples from the shared noise.
    pub fn generate(&self, model: &VectorField) -> Result<Matrix> {
        ode_integrate(model, &IntegratorConfig::forward(self.nfe), &self.z)
    }

    pub fn evaluate(&self, model: &VectorField) -> Result<Vec<f64>> {
        let gen = self.generate(model)?;
        let mut out = Vec::new();
        if self.w2_points > 0 {
            let idx: Vec<usize> = (0..self.w2_points).collect();
            out.push(w2_empirical(&gen.select_rows(&idx), &self.target.select_rows(&idx))?);
        }
        out.push(w2_gaussian(&GaussianSpec::fit(&gen)?, &self.moments)?);
        let sidx: Vec<usize> = (0..self.straight_points).collect();
        out.push(straightness(model, &self.z.select_rows(&sidx), self.nfe)?);
        out.push(collapse_distance_from(model, &self.z, self.nfe)?);
        let (pc0, s0) = dim_tracks(&gen)?;
        out.push(pc0);
        out.push(s0);
        out.push(if gen.cols() > 1 { coordinate_std(&gen, 1)? } else { 0.0 });
        if let Some(p) = model.linear_time_product() {
            out.push(spectral_norm(&p));
        }
        Ok(out)
    }
}

/// Options shared by every reflow runner.
#[derive(Debug, Clone, Default)]
pub struct RunContext {
    pub seed: u64,
    pub evaluator: Option<Evaluator>,
    /// Where RA stores are written; `None` keeps them in memory only.
    pub store_dir: Option<PathBuf>,
    /// Training batches kept verbatim per iteration.
    pub capture_batches: usize,
}

#[derive(Debug, Clone)]
pub struct ReflowOutcome {
    /// `models[0]` is the input model, `models[j]` the j-th reflow.
    pub models: Vec<VectorField>,
    pub series: MetricSeries,
    pub reports: Vec<TrainReport>,
    pub batch_log: BatchLog,
    pub stores: Vec<PathBuf>,
    /// Real rows had to be drawn with replacement at least once.
    pub real_with_replacement: bool,
}

struct StoredSource<'a> {
    batches: EpochBatches,
    served: usize,
    per_epoch: usize,
    regenerations: usize,
    alpha: Regeneration,
    real: &'a Matrix,
    /// The synthetic half built at the start of the iteration.
    synth: PairBatch,
    lambda: f64,
    pairs: usize,
    nfe: usize,
    mode: ReverseMode,
    refresh_synthetic: bool,
    streams: Streams,
    replaced: bool,
    log: &'a mut BatchLog,
    store: Option<StoreSink<'a>>,
}

struct StoreSink<'a> {
    root: PathBuf,
    info: StoreManifest,
    synthetic_generator: VectorField,
    written: &'a mut Vec<PathBuf>,
}

impl StoreSink<'_> {
    fn write(&mut self, pairs: &PairBatch, reverse_generator: &VectorField) -> Result<()> {
        let dir = self.root.join(format!(
            "iter_{:03}/regen_{:04}",
            self.info.iteration, self.info.regeneration
        ));
        let (syn, rev) = pairs.counts();
        self.info.count = pairs.len();
        self.info.synthetic = syn;
        self.info.reverse_real = rev;
        PairStore::write(&dir, pairs, &self.info, &self.synthetic_generator, reverse_generator)?;
        self.written.push(dir);
        Ok(())
    }
}

impl StoredSource<'_> {
    /// Rebuilds the reverse-real pairs with `model` and re-mixes them with
    /// the stored synthetic half; with `refresh_synthetic` the synthetic
    /// half is regenerated too.
    fn regenerate(&mut self, model: &VectorField) -> Result<()> {
        if !self.refresh_synthetic && synthetic_count(self.lambda, self.pairs) == self.pairs {
            return Ok(());
        }
        self.regenerations += 1;
        let (pairs, replaced) = if self.refresh_synthetic {
            assemble_pairs(
                model,
                self.real,
                self.lambda,
                self.pairs,
                self.nfe,
                self.mode,
                &mut self.streams,
            )?
        } else {
            remix_with_reverse(
                model,
                self.real,
                &self.synth,
                self.lambda,
                self.pairs,
                self.nfe,
                self.mode,
                &mut self.streams,
            )?
        };
        self.replaced |= replaced;
        *self.batches.pairs_mut() = pairs;
        if let Some(sink) = self.store.as_mut() {
            sink.info.regeneration = self.regenerations;
            sink.info.real_with_replacement = replaced;
            if self.refresh_synthetic {
                sink.synthetic_generator = model.clone();
            }
            sink.write(self.batches.pairs(), model)?;
        }
        Ok(())
    }
}

impl PairSource for StoredSource<'_> {
    fn next_batch(&mut self, _step: usize, model: &VectorField) -> Result<PairBatch> {
        if let Regeneration::Every(alpha) = self.alpha {
            if self.served > 0 && self.served.is_multiple_of(self.per_epoch) {
                let epochs = self.served / self.per_epoch;
                if epochs.is_multiple_of(alpha) {
                    self.regenerate(model)?;
                }
            }
        }
        let b = self.batches.next();
        self.served += 1;
        self.log.record(&b);
        Ok(b)
    }
}

struct OnlineSource<'a> {
    real: &'a Matrix,
    lambda: f64,
    batch: usize,
    nfe: usize,
    mode: ReverseMode,
    streams: &'a mut Streams,
    log: &'a mut BatchLog,
    replaced: bool,
}

impl PairSource for OnlineSource<'_> {
    fn next_batch(&mut self, _step: usize, model: &VectorField) -> Result<PairBatch> {
        let (pairs, replaced) = assemble_pairs(
            model,
            self.real,
            self.lambda,
            self.batch,
            self.nfe,
            self.mode,
            self.streams,
        )?;
        self.replaced |= replaced;
        let perm = self.streams.permute.permutation(pairs.len());
        let b = pairs.select(&perm);
        self.log.record(&b);
        Ok(b)
    }
}

fn run_variant(
    init: &VectorField,
    real: &Matrix,
    cfg: &ReflowConfig,
    ctx: &RunContext,
) -> Result<ReflowOutcome> {
    cfg.validate()?;
    let arch = init.architecture().clone();
    if real.cols() != arch.dim() {
        return Err(Error::Shape("real data dimension differs from the model".into()));
    }
    let mut series = match &ctx.evaluator {
        Some(e) => {
            let mut s = e.series(&arch);
            s.push(0, &e.evaluate(init)?)?;
            s
        }
        None => MetricSeries::default(),
    };
    let mut model = init.clone();
    let mut models = vec![init.clone()];
    let mut reports = Vec::new();
    let mut log = BatchLog::new(ctx.capture_batches);
    let mut stores = Vec::new();
    let mut replaced_any = false;

    for j in 1..=cfg.iterations {
        let mut st = Streams::new(ctx.seed, j);
        let gen = model.clone();
        if !cfg.warm_start {
            model = VectorField::new(arch.clone(), &mut st.init)?;
        }
        log.start_iteration();
        let report = if cfg.alpha == Regeneration::Online {
            let mut src = OnlineSource {
                real,
                lambda: cfg.lambda,
                batch: cfg.train.batch,
                nfe: cfg.nfe,
                mode: cfg.reverse_mode,
                streams: &mut st,
                log: &mut log,
                replaced: false,
            };
            let mut time = src.streams.time.clone();
            let r = crate::dynamics::rf_train(&mut model, &mut src, &cfg.train, &mut time)?;
            replaced_any |= src.replaced;
            r
        } else {
            let synth = generate_synthetic_pairs(
                &gen,
                synthetic_count(cfg.lambda, cfg.pairs),
                cfg.nfe,
                &mut st.noise,
            )?;
            let (pairs, replaced) = remix_with_reverse(
                &gen,
                real,
                &synth,
                cfg.lambda,
                cfg.pairs,
                cfg.nfe,
                cfg.reverse_mode,
                &mut st,
            )?;
            let info = StoreManifest {
                dim: arch.dim(),
                count: pairs.len(),
                synthetic: 0,
                reverse_real: 0,
                nfe: cfg.nfe,
                seed: ctx.seed,
                iteration: j,
                regeneration: 0,
                lambda: cfg.lambda,
                reverse_mode: cfg.reverse_mode,
                real_with_replacement: replaced,
            };
            let mut sink = ctx.store_dir.as_ref().map(|root| StoreSink {
                root: root.clone(),
                info,
                synthetic_generator: gen.clone(),
                written: &mut stores,
            });
            if let Some(s) = sink.as_mut() {
                s.write(&pairs, &gen)?;
            }
            let batches = EpochBatches::new(pairs, cfg.train.batch, st.permute.clone())?;
            let per_epoch = batches.batches_per_epoch();
            let mut time = st.time.clone();
            let mut src = StoredSource {
                batches,
                served: 0,
                per_epoch,
                regenerations: 0,
                alpha: cfg.alpha,
                real,
                synth,
                lambda: cfg.lambda,
                pairs: cfg.pairs,
                nfe: cfg.nfe,
                mode: cfg.reverse_mode,
                refresh_synthetic: cfg.refresh_synthetic,
                streams: st,
                replaced,
                log: &mut log,
                store: sink,
            };
            let r = crate::dynamics::rf_train(&mut model, &mut src, &cfg.train, &mut time)?;
            replaced_any |= src.replaced;
            r
        };
        log::info!(
            "reflow iteration {j}/{}: final loss {:.4e}",
            cfg.iterations,
            report.tail_loss(50)
        );
        reports.push(report);
        if let Some(e) = &ctx.evaluator {
            series.push(j, &e.evaluate(&model)?)?;
        }
        models.push(model.clone());
    }
    Ok(ReflowOutcome {
        models,
        series,
        reports,
        batch_log: log,
        stores,
        real_with_replacement: replaced_any,
    })
}

/// Vanilla reflow: synthetic pairs only, generated once per iteration.
pub fn run_reflow(
    init: &VectorField,
    cfg: &ReflowConfig,
    ctx: &RunContext,
) -> Result<ReflowOutcome> {
    let cfg = ReflowConfig {
        lambda: 1.0,
        alpha: Regeneration::Never,
        ..cfg.clone()
    };
    let empty = Matrix::zeros(0, init.architecture().dim());
    run_variant(init, &empty, &cfg, ctx)
}

/// RA reflow on the stored pair set, regenerated at the `α` cadence.
pub fn run_ra_reflow(
    init: &VectorField,
    real: &Matrix,
    cfg: &ReflowConfig,
    ctx: &RunContext,
) -> Result<ReflowOutcome> {
    if cfg.alpha == Regeneration::Online {
        return Err(Error::Config("alpha = 0 is the online variant; use run_ora_reflow".into()));
    }
    run_variant(init, real, cfg, ctx)
}

/// ORA reflow: per-minibatch pairs with an ODE reverse pass.
pub fn run_ora_reflow(
    init: &VectorField,
    real: &Matrix,
    cfg: &ReflowConfig,
    ctx: &RunContext,
) -> Result<ReflowOutcome> {
    let cfg = ReflowConfig {
        alpha: Regeneration::Online,
        reverse_mode: ReverseMode::Ode,
        ..cfg.clone()
    };
    run_variant(init, real, &cfg, &RunContext { store_dir: None, ..ctx.clone() })
}

/// RAS reflow: ORA with an SDE reverse pass of the given `σ`.
pub fn run_ras_reflow(
    init: &VectorField,
    real: &Matrix,
    cfg: &ReflowConfig,
    sde_sigma: f64,
    ctx: &RunContext,
) -> Result<ReflowOutcome> {
    let cfg = ReflowConfig {
        alpha: Regeneration::Online,
        reverse_mode: ReverseMode::Sde { sigma: sde_sigma },
        ..cfg.clone()
    };
    run_variant(init, real, &cfg, &RunContext { store_dir: None, ..ctx.clone() })
}

/// Independent couplings: fresh standard-normal noise against real rows
/// drawn with replacement.
pub struct IndependentCoupling<'a> {
    real: &'a Matrix,
    batch: usize,
    noise: RngStream,
    select: RngStream,
}

impl<'a> IndependentCoupling<'a> {
    pub fn new(real: &'a Matrix, batch: usize, seed: u64) -> Self {
        IndependentCoupling {
            real,
            batch,
            noise: stream(seed, Purpose::Noise, 0),
            select: stream(seed, Purpose::Select, 0),
        }
    }
}

impl PairSource for IndependentCoupling<'_> {
    fn next_batch(&mut self, _step: usize, _model: &VectorField) -> Result<PairBatch> {
        let z = self.noise.normal_matrix(self.batch, self.real.cols());
        let idx: Vec<usize> = (0..self.batch).map(|_| self.select.below(self.real.rows())).collect();
        PairBatch::uniform(z, self.real.select_rows(&idx), Provenance::Synthetic)
    }
}

/// Trains the initial rectified flow (0-Reflow) on independent couplings.
pub fn pretrain(
    arch: Architecture,
    real: &Matrix,
    train: &TrainConfig,
    seed: u64,
) -> Result<(VectorField, TrainReport)> {
    if real.rows() == 0 {
        return Err(Error::InvalidArgument("no real data to pretrain on".into()));
    }
    let mut model = VectorField::new(arch, &mut stream(seed, Purpose::Init, 0))?;
    let mut src = IndependentCoupling::new(real, train.batch, seed);
    let mut time = stream(seed, Purpose::Time, 0);
    let report = crate::dynamics::rf_train(&mut model, &mut src, train, &mut time)?;
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::AffineField;

    fn toy_pairs(n: usize, prov: Provenance, seed: u64) -> PairBatch {
        let mut rng = RngStream::new(seed, 0);
        PairBatch::uniform(rng.normal_matrix(n, 2), rng.normal_matrix(n, 2), prov).unwrap()
    }

    #[test]
    fn synthetic_pairs_of_constant_field() {
        let f = AffineField::constant(vec![1.0, -0.5]);
        let p = generate_synthetic_pairs(&f, 20, 10, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(p.counts(), (20, 0));
        for i in 0..20 {
            assert!((p.x[(i, 0)] - p.z[(i, 0)] - 1.0).abs() < 1e-14);
            assert!((p.x[(i, 1)] - p.z[(i, 1)] + 0.5).abs() < 1e-14);
        }
        let empty = generate_synthetic_pairs(&f, 0, 10, &mut RngStream::new(0, 0)).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn reverse_pairs_of_constant_field() {
        let f = AffineField::constant(vec![1.0, -0.5]);
        let x = RngStream::new(1, 0).normal_matrix(10, 2);
        let p = generate_reverse_pairs(&f, &x, 10, ReverseMode::Ode, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(p.counts(), (0, 10));
        for i in 0..10 {
            assert!((p.z[(i, 0)] - (x[(i, 0)] - 1.0)).abs() < 1e-14);
        }
        let sde = generate_reverse_pairs(&f, &x, 10, ReverseMode::Sde { sigma: 0.0 }, &mut RngStream::new(0, 0)).unwrap();
        assert_eq!(sde, p);
        assert!(generate_reverse_pairs(&f, &Matrix::zeros(0, 2), 10, ReverseMode::Ode, &mut RngStream::new(0, 0)).is_err());
    }

    #[test]
    fn mix_counts() {
        let s = toy_pairs(100, Provenance::Synthetic, 0);
        let r = toy_pairs(100, Provenance::ReverseReal, 1);
        let mut rng = RngStream::new(2, 0);
        assert_eq!(mix_pairs(&s, &r, 1.0, 100, &mut rng).unwrap().counts(), (100, 0));
        assert_eq!(mix_pairs(&s, &r, 0.0, 100, &mut rng).unwrap().counts(), (0, 100));
        assert_eq!(mix_pairs(&s, &r, 0.5, 100, &mut rng).unwrap().counts(), (50, 50));
        assert_eq!(synthetic_count(0.5, 3), 2);
        assert_eq!(synthetic_count(0.25, 2), 1);
    }

    #[test]
    fn mix_reports_the_short_side() {
        let s = toy_pairs(10, Provenance::Synthetic, 0);
        let r = toy_pairs(100, Provenance::ReverseReal, 1);
        let mut rng = RngStream::new(2, 0);
        match mix_pairs(&s, &r, 0.5, 100, &mut rng) {
            Err(Error::InsufficientPairs { side, needed, available }) => {
                assert_eq!((side, needed, available), ("synthetic", 50, 10));
            }
            other => panic!("unexpected {other:?}"),
        }
        match mix_pairs(&r, &s, 0.5, 100, &mut rng) {
            Err(Error::InsufficientPairs { side, .. }) => assert_eq!(side, "reverse-real"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mixing_conserves_rows() {
        let s = toy_pairs(30, Provenance::Synthetic, 0);
        let r = toy_pairs(30, Provenance::ReverseReal, 1);
        let m = mix_pairs(&s, &r, 0.4, 50, &mut RngStream::new(3, 0)).unwrap();
        for i in 0..m.len() {
            let src = match m.provenance[i] {
                Provenance::Synthetic => &s,
                Provenance::ReverseReal => &r,
            };
            let found = (0..src.len()).any(|k| src.z.row(k) == m.z.row(i) && src.x.row(k) == m.x.row(i));
            assert!(found, "row {i} lost its provenance");
        }
    }

    #[test]
    fn real_rows_with_replacement_when_scarce() {
        let x = RngStream::new(0, 0).normal_matrix(5, 2);
        let (sel, replaced) = select_real_rows(&x, 3, &mut RngStream::new(1, 0));
        assert!(!replaced && sel.rows() == 3);
        let (sel, replaced) = select_real_rows(&x, 12, &mut RngStream::new(1, 0));
        assert!(replaced && sel.rows() == 12);
    }

    #[test]
    fn regeneration_parsing() {
        assert_eq!("inf".parse::<Regeneration>().unwrap(), Regeneration::Never);
        assert_eq!("0".parse::<Regeneration>().unwrap(), Regeneration::Online);
        assert_eq!("3".parse::<Regeneration>().unwrap(), Regeneration::Every(3));
        assert!("x".parse::<Regeneration>().is_err());
        assert_eq!(Regeneration::Every(2).to_string(), "2");
    }

    #[test]
    fn config_validation() {
        let base = ReflowConfig::default();
        assert!(base.validate().is_ok());
        assert!(ReflowConfig { lambda: 1.5, ..base.clone() }.validate().is_err());
        assert!(ReflowConfig { pairs: 0, ..base.clone() }.validate().is_err());
        assert!(ReflowConfig { alpha: Regeneration::Every(0), ..base }.validate().is_err());
    }

    #[test]
    fn store_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(4, 0);
        let gen = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(40, 2);
        let mut st = Streams::new(4, 1);
        let (pairs, _) = assemble_pairs(&gen, &real, 0.5, 40, 20, ReverseMode::Ode, &mut st).unwrap();
        let info = StoreManifest {
            dim: 2,
            count: 40,
            synthetic: 20,
            reverse_real: 20,
            nfe: 20,
            seed: 4,
            iteration: 1,
            regeneration: 0,
            lambda: 0.5,
            reverse_mode: ReverseMode::Ode,
            real_with_replacement: false,
        };
        PairStore::write(dir.path(), &pairs, &info, &gen, &gen).unwrap();
        let (back, m) = PairStore::read(dir.path()).unwrap();
        assert_eq!(back, pairs);
        assert_eq!(m, info);
        assert!(PairStore::validate(dir.path()).unwrap() <= 1e-10);
        assert_eq!(std::fs::metadata(dir.path().join("z.bin")).unwrap().len(), 40 * 2 * 8);
        assert!(!dir.path().join("manifest.txt.tmp").exists());

        std::fs::write(dir.path().join("provenance.bin"), [0u8; 3]).unwrap();
        assert!(PairStore::read(dir.path()).is_err());
    }

    #[test]
    fn zero_iterations_return_input() {
        let mut rng = RngStream::new(5, 0);
        let init = VectorField::new(Architecture::linear_time(2), &mut rng).unwrap();
        let cfg = ReflowConfig {
            iterations: 0,
            ..ReflowConfig::default()
        };
        let out = run_reflow(&init, &cfg, &RunContext::default()).unwrap();
        assert_eq!(out.models, vec![init]);
    }

    fn small_cfg() -> ReflowConfig {
        ReflowConfig {
            iterations: 2,
            lambda: 0.5,
            alpha: Regeneration::Every(1),
            pairs: 64,
            nfe: 8,
            train: TrainConfig {
                steps: 12,
                batch: 16,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            ..ReflowConfig::default()
        }
    }

    #[test]
    fn lambda_one_ra_is_vanilla() {
        let mut rng = RngStream::new(6, 0);
        let init = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(50, 2);
        let ctx = RunContext {
            seed: 3,
            ..Default::default()
        };
        let ra = run_ra_reflow(&init, &real, &ReflowConfig { lambda: 1.0, ..small_cfg() }, &ctx).unwrap();
        let van = run_reflow(&init, &small_cfg(), &ctx).unwrap();
        assert_eq!(ra.batch_log.digests, van.batch_log.digests);
        assert_eq!(ra.models, van.models);
    }

    #[test]
    fn zero_sigma_ras_is_ora() {
        let mut rng = RngStream::new(7, 0);
        let init = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(50, 2);
        let ctx = RunContext {
            seed: 4,
            ..Default::default()
        };
        let ora = run_ora_reflow(&init, &real, &small_cfg(), &ctx).unwrap();
        let ras = run_ras_reflow(&init, &real, &small_cfg(), 0.0, &ctx).unwrap();
        assert_eq!(ora.batch_log.digests, ras.batch_log.digests);
        let noisy = run_ras_reflow(&init, &real, &small_cfg(), 0.1, &ctx).unwrap();
        assert_ne!(ora.batch_log.digests, noisy.batch_log.digests);
    }

    #[test]
    fn ora_full_batch_matches_ra_first_batch() {
        let mut rng = RngStream::new(8, 0);
        let init = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(50, 2);
        let mut cfg = small_cfg();
        cfg.train.batch = cfg.pairs;
        let ctx = RunContext {
            seed: 5,
            capture_batches: 1,
            ..Default::default()
        };
        let ra = run_ra_reflow(&init, &real, &ReflowConfig { alpha: Regeneration::Every(1), ..cfg.clone() }, &ctx).unwrap();
        let ora = run_ora_reflow(&init, &real, &cfg, &ctx).unwrap();
        assert_eq!(ra.batch_log.batches[0][0], ora.batch_log.batches[0][0]);
        assert_eq!(ra.batch_log.digests[0][0], ora.batch_log.digests[0][0]);
    }

    #[test]
    fn ra_writes_one_store_per_event() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = RngStream::new(9, 0);
        let init = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(50, 2);
        let ctx = RunContext {
            seed: 6,
            store_dir: Some(dir.path().to_path_buf()),
            ..Default::default()
        };
        // 64 pairs / 16 = 4 batches per epoch; 12 steps = 3 epochs, so
        // regenerations after epochs 1 and 2 plus the initial store.
        let out = run_ra_reflow(&init, &real, &small_cfg(), &ctx).unwrap();
        assert_eq!(out.stores.len(), 2 * 3);
        for s in &out.stores {
            let (pairs, m) = PairStore::read(s).unwrap();
            assert_eq!(pairs.counts(), (32, 32));
            assert_eq!((m.synthetic, m.reverse_real), (32, 32));
            assert!(PairStore::validate(s).unwrap() <= 1e-10);
        }
        let ora_dir = tempfile::tempdir().unwrap();
        let ctx = RunContext {
            store_dir: Some(ora_dir.path().to_path_buf()),
            ..ctx
        };
        let out = run_ora_reflow(&init, &real, &small_cfg(), &ctx).unwrap();
        assert!(out.stores.is_empty());
        assert_eq!(std::fs::read_dir(ora_dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn per_epoch_full_refresh_ra_is_ora() {
        let mut rng = RngStream::new(11, 0);
        let init = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(50, 2);
        let mut cfg = small_cfg();
        cfg.train.batch = cfg.pairs;
        let ctx = RunContext {
            seed: 8,
            ..Default::default()
        };
        let ra_cfg = ReflowConfig {
            alpha: Regeneration::Every(1),
            refresh_synthetic: true,
            ..cfg.clone()
        };
        let ra = run_ra_reflow(&init, &real, &ra_cfg, &ctx).unwrap();
        let ora = run_ora_reflow(&init, &real, &cfg, &ctx).unwrap();
        assert_eq!(ra.batch_log.digests, ora.batch_log.digests);
        assert_eq!(ra.models, ora.models);
    }

    fn row_keys(b: &PairBatch, prov: Provenance) -> Vec<Vec<u64>> {
        let mut rows: Vec<Vec<u64>> = (0..b.len())
            .filter(|&i| b.provenance[i] == prov)
            .map(|i| b.z.row(i).iter().chain(b.x.row(i)).map(|v| v.to_bits()).collect())
            .collect();
        rows.sort();
        rows
    }

    #[test]
    fn literal_regeneration_keeps_synthetic_half() {
        let mut rng = RngStream::new(12, 0);
        let init = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(50, 2);
        let mut cfg = small_cfg();
        cfg.iterations = 1;
        cfg.train.batch = cfg.pairs;
        cfg.train.steps = 3;
        let ctx = RunContext {
            seed: 9,
            capture_batches: 3,
            ..Default::default()
        };
        let out = run_ra_reflow(&init, &real, &cfg, &ctx).unwrap();
        let b = &out.batch_log.batches[0];
        let syn0 = row_keys(&b[0], Provenance::Synthetic);
        let rev0 = row_keys(&b[0], Provenance::ReverseReal);
        for later in &b[1..] {
            assert_eq!(later.counts(), (32, 32));
            assert_eq!(row_keys(later, Provenance::Synthetic), syn0);
            assert_ne!(row_keys(later, Provenance::ReverseReal), rev0);
        }
    }

    #[test]
    fn never_regenerating_keeps_pairs_fixed() {
        let mut rng = RngStream::new(10, 0);
        let init = VectorField::new(Architecture::mlp(2), &mut rng).unwrap();
        let real = rng.normal_matrix(50, 2);
        let mut cfg = small_cfg();
        cfg.alpha = Regeneration::Never;
        cfg.train.batch = cfg.pairs;
        cfg.iterations = 1;
        let ctx = RunContext {
            seed: 7,
            capture_batches: 12,
            ..Default::default()
        };
        let out = run_ra_reflow(&init, &real, &cfg, &ctx).unwrap();
        let batches = &out.batch_log.batches[0];
        let key = |b: &PairBatch| {
            let mut rows: Vec<Vec<u64>> = (0..b.len())
                .map(|i| b.z.row(i).iter().chain(b.x.row(i)).map(|v| v.to_bits()).collect())
                .collect();
            rows.sort();
            rows
        };
        let first = key(&batches[0]);
        assert!(batches.iter().all(|b| key(b) == first));
    }
}

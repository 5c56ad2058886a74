//! Integration of velocity fields and rectified-flow training.
//!
//! Time runs from [`NOISE_TIME`] (t = 0, noise) to [`DATA_TIME`] (t = 1,
//! data) everywhere in the crate. Training pairs `(z, x)` are interpolated
//! as `x_t = t·x + (1−t)·z` with regression target `x − z`.

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::field::{AdamState, TrainBatch, VectorField, VelocityField};
use crate::numerics::Matrix;

pub const NOISE_TIME: f64 = 0.0;
pub const DATA_TIME: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Provenance {
    Synthetic = 0,
    ReverseReal = 1,
}

impl Provenance {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Provenance::Synthetic),
            1 => Some(Provenance::ReverseReal),
            _ => None,
        }
    }
}

/// Noise/data couplings with per-row provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub z: Matrix,
    pub x: Matrix,
    pub provenance: Vec<Provenance>,
}

impl PairBatch {
    pub fn new(z: Matrix, x: Matrix, provenance: Vec<Provenance>) -> Result<Self> {
        if z.shape() != x.shape() || provenance.len() != z.rows() {
            return Err(Error::Shape(format!(
                "z {:?}, x {:?}, {} provenance tags",
                z.shape(),
                x.shape(),
                provenance.len()
            )));
        }
        Ok(PairBatch { z, x, provenance })
    }

    pub fn uniform(z: Matrix, x: Matrix, provenance: Provenance) -> Result<Self> {
        let n = z.rows();
        Self::new(z, x, vec![provenance; n])
    }

    pub fn empty(dim: usize) -> Self {
        PairBatch {
            z: Matrix::zeros(0, dim),
            x: Matrix::zeros(0, dim),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    /// `(synthetic, reverse-real)` row counts.
    pub fn counts(&self) -> (usize, usize) {
        let syn = self
            .provenance
            .iter()
            .filter(|&&p| p == Provenance::Synthetic)
            .count();
        (syn, self.len() - syn)
    }

    pub fn select(&self, idx: &[usize]) -> PairBatch {
        PairBatch {
            z: self.z.select_rows(idx),
            x: self.x.select_rows(idx),
            provenance: idx.iter().map(|&i| self.provenance[i]).collect(),
        }
    }

    pub fn concat(&self, other: &PairBatch) -> Result<PairBatch> {
        let mut provenance = self.provenance.clone();
        provenance.extend(&other.provenance);
        PairBatch::new(self.z.vstack(&other.z)?, self.x.vstack(&other.x)?, provenance)
    }

    /// SHA-256 over the row count, dimension, provenance bytes and the
    /// little-endian bytes of `z` then `x`.
    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update(self.provenance.iter().map(|&p| p as u8).collect::<Vec<_>>());
        for v in self.z.data().iter().chain(self.x.data()) {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }

    /// The regression batch at times `t`.
    pub fn interpolate(&self, t: &[f64]) -> Result<TrainBatch> {
        if t.len() != self.len() {
            return Err(Error::Shape(format!("{} times for {} pairs", t.len(), self.len())));
        }
        let (n, d) = self.z.shape();
        let mut xt = Matrix::zeros(n, d);
        let mut target = Matrix::zeros(n, d);
        for i in 0..n {
            let ti = t[i];
            let (z, x) = (self.z.row(i), self.x.row(i));
            for k in 0..d {
                xt[(i, k)] = interpolate(ti, z[k], x[k]);
                target[(i, k)] = x[k] - z[k];
            }
        }
        Ok(TrainBatch {
            t: t.to_vec(),
            xt,
            target,
        })
    }
}

/// `t·x + (1−t)·z`, exact at both endpoints.
pub fn interpolate(t: f64, z: f64, x: f64) -> f64 {
    if t == NOISE_TIME {
        z
    } else if t == DATA_TIME {
        x
    } else {
        t * x + (1.0 - t) * z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Noise to data, t from 0 to 1.
    Forward,
    /// Data to noise, t from 1 to 0.
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum IntegrationMode {
    Ode,
    Sde { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Heun,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub steps: usize,
    pub direction: Direction,
    pub mode: IntegrationMode,
    pub scheme: Scheme,
}

impl IntegratorConfig {
    pub fn forward(steps: usize) -> Self {
        IntegratorConfig {
            steps,
            direction: Direction::Forward,
            mode: IntegrationMode::Ode,
            scheme: Scheme::Euler,
        }
    }

    pub fn reverse(steps: usize) -> Self {
        IntegratorConfig {
            direction: Direction::Reverse,
            ..Self::forward(steps)
        }
    }

    pub fn with_sde(self, sigma: f64) -> Self {
        IntegratorConfig {
            mode: IntegrationMode::Sde { sigma },
            ..self
        }
    }

    fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("integrator needs at least one step".into()));
        }
        if let IntegrationMode::Sde { sigma } = self.mode {
            if !(sigma >= 0.0) {
                return Err(Error::InvalidArgument(format!("sde sigma must be >= 0, got {sigma}")));
            }
        }
        Ok(())
    }

    /// Time at the start of step `k`.
    fn time(&self, k: usize) -> f64 {
        let s = k as f64 / self.steps as f64;
        match self.direction {
            Direction::Forward => s,
            Direction::Reverse => 1.0 - s,
        }
    }

    fn signed_dt(&self) -> f64 {
        let dt = 1.0 / self.steps as f64;
        match self.direction {
            Direction::Forward => dt,
            Direction::Reverse => -dt,
        }
    }
}

/// States of an integration, one per grid time.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Matrix>,
}

impl Trajectory {
    pub fn end(&self) -> &Matrix {
        self.states.last().expect("trajectory has a start state")
    }

    /// CSV with columns `row,step,t,x0,…`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let d = self.states[0].cols();
        let mut out = String::from("row,step,t");
        for k in 0..d {
            out.push_str(&format!(",x{k}"));
        }
        out.push('\n');
        for i in 0..self.states[0].rows() {
            for (s, (t, m)) in self.times.iter().zip(&self.states).enumerate() {
                out.push_str(&format!("{i},{s},{t}"));
                for v in m.row(i) {
                    out.push_str(&format!(",{v:e}"));
                }
                out.push('\n');
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn euler_step(
    field: &dyn VelocityField,
    cfg: &IntegratorConfig,
    k: usize,
    x: &mut Matrix,
    tbuf: &mut [f64],
) {
    let t = cfg.time(k);
    let dt = cfg.signed_dt();
    tbuf.fill(t);
    let v = field.velocity_batch(tbuf, x);
    match cfg.scheme {
        Scheme::Euler => {
            for (a, b) in x.data_mut().iter_mut().zip(v.data()) {
                *a += dt * b;
            }
        }
        Scheme::Heun => {
            let mut pred = x.clone();
            for (a, b) in pred.data_mut().iter_mut().zip(v.data()) {
                *a += dt * b;
            }
            tbuf.fill(cfg.time(k + 1));
            let v2 = field.velocity_batch(tbuf, &pred);
            for ((a, b), c) in x.data_mut().iter_mut().zip(v.data()).zip(v2.data()) {
                *a += 0.5 * dt * (b + c);
            }
        }
    }
}

fn check_start(field: &dyn VelocityField, start: &Matrix) -> Result<()> {
    if start.cols() != field.dim() {
        return Err(Error::Shape(format!(
            "start points have dimension {}, field {}",
            start.cols(),
            field.dim()
        )));
    }
    Ok(())
}

/// Fixed-step ODE integration over `[0, 1]` in the configured direction.
pub fn ode_integrate(
    field: &dyn VelocityField,
    cfg: &IntegratorConfig,
    start: &Matrix,
) -> Result<Matrix> {
    cfg.validate()?;
    if cfg.mode != IntegrationMode::Ode {
        return Err(Error::InvalidArgument("ode_integrate needs ode mode".into()));
    }
    check_start(field, start)?;
    let mut x = start.clone();
    let mut tbuf = vec![0.0; x.rows()];
    for k in 0..cfg.steps {
        euler_step(field, cfg, k, &mut x, &mut tbuf);
        if !x.is_finite() {
            return Err(Error::Integration { step: k });
        }
    }
    Ok(x)
}

/// As [`ode_integrate`], keeping every intermediate state.
pub fn ode_trajectory(
    field: &dyn VelocityField,
    cfg: &IntegratorConfig,
    start: &Matrix,
) -> Result<Trajectory> {
    cfg.validate()?;
    check_start(field, start)?;
    let mut x = start.clone();
    let mut tbuf = vec![0.0; x.rows()];
    let mut times = vec![cfg.time(0)];
    let mut states = vec![x.clone()];
    for k in 0..cfg.steps {
        euler_step(field, cfg, k, &mut x, &mut tbuf);
        if !x.is_finite() {
            return Err(Error::Integration { step: k });
        }
        times.push(cfg.time(k + 1));
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Euler–Maruyama: each step adds the drift (`v` forward, `−v` in reverse)
/// times `dt` and `σ √dt ξ` with `ξ ~ N(0, I)`.
pub fn sde_integrate(
    field: &dyn VelocityField,
    cfg: &IntegratorConfig,
    start: &Matrix,
    rng: &mut RngStream,
) -> Result<Matrix> {
    cfg.validate()?;
    let IntegrationMode::Sde { sigma } = cfg.mode else {
        return Err(Error::InvalidArgument("sde_integrate needs sde mode".into()));
    };
    check_start(field, start)?;
    let ode = IntegratorConfig {
        mode: IntegrationMode::Ode,
        scheme: Scheme::Euler,
        ..*cfg
    };
    let noise = sigma * (1.0 / cfg.steps as f64).sqrt();
    let mut x = start.clone();
    let mut tbuf = vec![0.0; x.rows()];
    for k in 0..cfg.steps {
        euler_step(field, &ode, k, &mut x, &mut tbuf);
        if noise != 0.0 {
            for a in x.data_mut() {
                *a += noise * rng.normal();
            }
        }
        if !x.is_finite() {
            return Err(Error::Integration { step: k });
        }
    }
    Ok(x)
}

/// Dispatches on the configured mode.
pub fn integrate(
    field: &dyn VelocityField,
    cfg: &IntegratorConfig,
    start: &Matrix,
    rng: &mut RngStream,
) -> Result<Matrix> {
    match cfg.mode {
        IntegrationMode::Ode => ode_integrate(field, cfg, start),
        IntegrationMode::Sde { .. } => sde_integrate(field, cfg, start, rng),
    }
}

/// Source of training pairs for [`rf_train`].
pub trait PairSource {
    /// The pairs for training step `step`. `model` is the model being
    /// trained, as of before this step.
    fn next_batch(&mut self, step: usize, model: &VectorField) -> Result<PairBatch>;
}

/// Minibatches over a fixed pair set, reshuffled every epoch.
pub struct EpochBatches {
    pairs: PairBatch,
    batch: usize,
    rng: RngStream,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
}

impl EpochBatches {
    pub fn new(pairs: PairBatch, batch: usize, rng: RngStream) -> Result<Self> {
        if pairs.is_empty() || batch == 0 {
            return Err(Error::InvalidArgument(
                "need a non-empty pair set and batch >= 1".into(),
            ));
        }
        Ok(EpochBatches {
            pairs,
            batch,
            rng,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pairs.len().div_ceil(self.batch)
    }

    pub fn pairs(&self) -> &PairBatch {
        &self.pairs
    }

    pub fn pairs_mut(&mut self) -> &mut PairBatch {
        &mut self.pairs
    }

    /// True when the next call to [`EpochBatches::next`] starts an epoch.
    pub fn at_epoch_start(&self) -> bool {
        self.cursor >= self.order.len()
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> PairBatch {
        if self.at_epoch_start() {
            if !self.order.is_empty() {
                self.epoch += 1;
            }
            self.order = self.rng.permutation(self.pairs.len());
            self.cursor = 0;
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let idx = &self.order[self.cursor..end];
        self.cursor = end;
        self.pairs.select(idx)
    }
}

impl PairSource for EpochBatches {
    fn next_batch(&mut self, _step: usize, _model: &VectorField) -> Result<PairBatch> {
        Ok(self.next())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSampling {
    PerRow,
    PerBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Cosine decay to zero over the run.
    Cosine,
}

impl TimeSampling {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeSampling::PerRow => "per-row",
            TimeSampling::PerBatch => "per-batch",
        }
    }
}

impl std::str::FromStr for TimeSampling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-row" => Ok(TimeSampling::PerRow),
            "per-batch" => Ok(TimeSampling::PerBatch),
            _ => Err(Error::Config(format!("unknown time sampling `{s}`"))),
        }
    }
}

impl LrSchedule {
    pub fn as_str(self) -> &'static str {
        match self {
            LrSchedule::Constant => "constant",
            LrSchedule::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(LrSchedule::Constant),
            "cosine" => Ok(LrSchedule::Cosine),
            _ => Err(Error::Config(format!("unknown learning-rate schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub warmup: usize,
    pub schedule: LrSchedule,
    pub time_sampling: TimeSampling,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2_000,
            batch: 256,
            learning_rate: 2e-4,
            warmup: 0,
            schedule: LrSchedule::Constant,
            time_sampling: TimeSampling::PerRow,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("train batch must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let base = match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let p = step as f64 / self.steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * p).cos())
            }
        };
        if step < self.warmup {
            base * (step + 1) as f64 / self.warmup as f64
        } else {
            base
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean loss over the last `k` steps.
    pub fn tail_loss(&self, k: usize) -> f64 {
        let k = k.min(self.losses.len()).max(1);
        let tail = &self.losses[self.losses.len().saturating_sub(k)..];
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Trains `model` in place with Adam on the rectified-flow loss.
///
/// Each step draws a pair batch from `source` and times from `rng` (per row
/// or one per batch).
pub fn rf_train(
    model: &mut VectorField,
    source: &mut dyn PairSource,
    config: &TrainConfig,
    rng: &mut RngStream,
) -> Result<TrainReport> {
    config.validate()?;
    let mut adam = AdamState::new(model.param_count(), config.learning_rate);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let pairs = source.next_batch(step, model)?;
        if pairs.dim() != model.architecture().dim() {
            return Err(Error::Shape("pair dimension differs from the model".into()));
        }
        let t: Vec<f64> = match config.time_sampling {
            TimeSampling::PerRow => (0..pairs.len()).map(|_| rng.uniform()).collect(),
            TimeSampling::PerBatch => vec![rng.uniform(); pairs.len()],
        };
        let batch = pairs.interpolate(&t)?;
        let (loss, grad) = model.loss_grad(&batch).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { step, reason },
            other => other,
        })?;
        adam.lr = config.lr_at(step);
        adam.step(model.params_mut(), &grad)?;
        if !model.params().iter().all(|p| p.is_finite()) {
            return Err(Error::Training {
                step,
                reason: "parameters became non-finite".into(),
            });
        }
        losses.push(loss);
    }
    Ok(TrainReport { losses })
}

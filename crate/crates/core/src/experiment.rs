//! Config-driven experiment runs.
//!
//! A config is a flat UTF-8 file of `key = value` lines with dotted keys;
//! `#` starts a comment. Every key has a default that depends on `kind`, and
//! [`ExperimentConfig::to_kv`] echoes the fully resolved set, which parses
//! back to the same config.
//!
//! A run directory holds
//!
//! * `config.txt`: the resolved config;
//! * `seed_<s>/metrics.csv` plus per-seed artifacts (models, trajectories,
//!   pair stores);
//! * `aggregate.csv`: `<column>_mean` and `<column>_std` per iteration over
//!   the seeds that completed;
//! * `summary.json`: final aggregate values and the config echo;
//! * `manifest.json`: per-seed status, file paths and wall clock.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dae::{run_loop_with_reference, GramScale, LoopConfig, LoopMode, NoiseScale};
use crate::data::{preset_with_layout, write_samples_csv, PresetName, RingLayout, RngStream};
use crate::dynamics::{ode_trajectory, IntegratorConfig, LrSchedule, TimeSampling, TrainConfig};
use crate::error::{Error, Result};
use crate::field::{grad_check, random_batch, Activation, Architecture, VectorField, GRADCHECK_TOLERANCE};
use crate::metrics::{coordinate_std, dim_tracks, w2_empirical, w2_gaussian, MetricSeries, MAX_ASSIGNMENT_SIZE};
use crate::reflow::{
    pretrain, run_ora_reflow, run_ra_reflow, run_ras_reflow, run_reflow, Evaluator, Regeneration,
    ReflowConfig, ReverseMode, RunContext,
};
use crate::data::GaussianSpec;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "REFLOW_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

const DATA_STREAM: u64 = 1;
const LOOP_STREAM: u64 = 2;
const GRADCHECK_STREAM: u64 = 3;
const EVAL_STREAM: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    DaeLoop,
    RfCollapse,
    Reflow,
    RaReflow,
    OraReflow,
    RasReflow,
    GradCheck,
    Metrics,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 8] = [
        ExperimentKind::DaeLoop,
        ExperimentKind::RfCollapse,
        ExperimentKind::Reflow,
        ExperimentKind::RaReflow,
        ExperimentKind::OraReflow,
        ExperimentKind::RasReflow,
        ExperimentKind::GradCheck,
        ExperimentKind::Metrics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::DaeLoop => "dae-loop",
            ExperimentKind::RfCollapse => "rf-collapse",
            ExperimentKind::Reflow => "reflow",
            ExperimentKind::RaReflow => "ra-reflow",
            ExperimentKind::OraReflow => "ora-reflow",
            ExperimentKind::RasReflow => "ras-reflow",
            ExperimentKind::GradCheck => "gradcheck",
            ExperimentKind::Metrics => "metrics",
        }
    }

    fn is_flow(self) -> bool {
        matches!(
            self,
            ExperimentKind::RfCollapse
                | ExperimentKind::Reflow
                | ExperimentKind::RaReflow
                | ExperimentKind::OraReflow
                | ExperimentKind::RasReflow
        )
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind `{s}`")))
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearTime,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::LinearTime => "linear-time",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-time" => Ok(ModelKind::LinearTime),
            "mlp" => Ok(ModelKind::Mlp),
            _ => Err(Error::Config(format!("unknown model architecture `{s}`"))),
        }
    }
}

/// Architecture choice independent of the data dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Hidden size of the linear-time field; `None` means `d + 1`.
    pub hidden: Option<usize>,
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn architecture(&self, dim: usize) -> Architecture {
        match self.kind {
            ModelKind::LinearTime => Architecture::LinearTime {
                dim,
                hidden: self.hidden.unwrap_or(dim + 1),
            },
            ModelKind::Mlp => Architecture::Mlp {
                dim,
                widths: self.widths.clone(),
                activation: self.activation,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub n: usize,
    pub nfe: usize,
    pub w2_points: usize,
    pub straight_points: usize,
    /// Noise rows whose trajectories are dumped for figures.
    pub trajectories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub batches: usize,
    pub batch_size: usize,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub name: String,
    pub preset: PresetName,
    pub ring: RingLayout,
    pub seeds: Vec<u64>,
    /// Run directory; `None` resolves under the output root.
    pub output: Option<PathBuf>,
    /// Real samples drawn from the preset target.
    pub data_n: usize,
    pub loop_cfg: LoopConfig,
    pub loop_modes: Vec<LoopMode>,
    pub model: ModelSpec,
    pub pretrain: TrainConfig,
    pub reflow: ReflowConfig,
    pub sde_sigma: f64,
    pub store_pairs: bool,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckConfig,
}

fn train(steps: usize, batch: usize, lr: f64, schedule: LrSchedule) -> TrainConfig {
    TrainConfig {
        steps,
        batch,
        learning_rate: lr,
        schedule,
        ..TrainConfig::default()
    }
}

impl ExperimentConfig {
    pub fn defaults(kind: ExperimentKind) -> Self {
        let mut c = ExperimentConfig {
            kind,
            name: kind.as_str().to_string(),
            preset: PresetName::Mix2d,
            ring: RingLayout::default(),
            seeds: vec![0, 1, 2],
            output: None,
            data_n: 2048,
            loop_cfg: LoopConfig {
                gram_scale: GramScale::Covariance,
                ..LoopConfig::default()
            },
            loop_modes: vec![LoopMode::SyntheticOnly, LoopMode::AugmentReal],
            model: ModelSpec {
                kind: ModelKind::Mlp,
                hidden: None,
                widths: vec![64; 3],
                activation: Activation::Tanh,
            },
            pretrain: train(8000, 256, 2e-3, LrSchedule::Cosine),
            reflow: ReflowConfig {
                iterations: 10,
                lambda: 0.5,
                alpha: Regeneration::Every(2),
                pairs: 2048,
                nfe: 100,
                train: train(1000, 256, 5e-4, LrSchedule::Constant),
                ..ReflowConfig::default()
            },
            sde_sigma: 0.1,
            store_pairs: false,
            eval: EvalConfig {
                n: 2048,
                nfe: 100,
                w2_points: 2048,
                straight_points: 512,
                trajectories: 0,
            },
            gradcheck: GradCheckConfig {
                batches: 20,
                batch_size: 32,
                h: 1e-5,
            },
        };
        match kind {
            ExperimentKind::DaeLoop => {
                c.preset = PresetName::Dae4d;
                c.data_n = 1000;
                c.seeds = (0..20).collect();
                c.eval.w2_points = 128;
            }
            ExperimentKind::RfCollapse => {
                c.preset = PresetName::Rf10d;
                c.seeds = (0..5).collect();
                c.data_n = 4096;
                c.model.kind = ModelKind::LinearTime;
                c.pretrain = train(3000, 256, 1e-2, LrSchedule::Cosine);
                c.reflow.iterations = 15;
                c.reflow.lambda = 1.0;
                c.reflow.alpha = Regeneration::Never;
                c.reflow.pairs = 4096;
                c.reflow.train = train(2000, 256, 1e-3, LrSchedule::Constant);
                c.eval.w2_points = 0;
            }
            ExperimentKind::Reflow => {
                c.reflow.lambda = 1.0;
                c.reflow.alpha = Regeneration::Never;
                c.eval.trajectories = 64;
            }
            ExperimentKind::RaReflow => c.eval.trajectories = 64,
            ExperimentKind::OraReflow => {
                c.reflow.alpha = Regeneration::Online;
                c.eval.trajectories = 64;
            }
            ExperimentKind::RasReflow => {
                c.reflow.alpha = Regeneration::Online;
                c.reflow.reverse_mode = ReverseMode::Sde { sigma: c.sde_sigma };
                c.eval.trajectories = 64;
            }
            ExperimentKind::GradCheck => c.seeds = vec![0],
            ExperimentKind::Metrics => {
                c.preset = PresetName::Dae4d;
                c.seeds = (0..5).collect();
            }
        }
        c
    }

    /// Builds a config from `key → value` pairs over the defaults of the
    /// given `kind`. Unknown keys are errors.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let kind: ExperimentKind = kv
            .get("kind")
            .ok_or_else(|| Error::Config("missing required key `kind`".into()))?
            .parse()?;
        let mut c = ExperimentConfig::defaults(kind);
        let mut reverse_sde = matches!(c.reflow.reverse_mode, ReverseMode::Sde { .. });
        for (k, v) in kv {
            let v = v.as_str();
            match k.as_str() {
                "kind" => {}
                "name" => c.name = v.to_string(),
                "preset" => c.preset = v.parse()?,
                "seeds" => c.seeds = parse_seeds(v)?,
                "output" => c.output = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
                "data.n" => c.data_n = num(k, v)?,
                "data.ring.components" => c.ring.components = num(k, v)?,
                "data.ring.radius" => c.ring.radius = num(k, v)?,
                "data.ring.std" => c.ring.std = num(k, v)?,
                "loop.iterations" => c.loop_cfg.iterations = num(k, v)?,
                "loop.sigma" => c.loop_cfg.sigma = num(k, v)?,
                "loop.sigma_hat" => c.loop_cfg.sigma_hat = num(k, v)?,
                "loop.noise_scale" => c.loop_cfg.noise_scale = v.parse::<NoiseScale>()?,
                "loop.gram_scale" => c.loop_cfg.gram_scale = v.parse::<GramScale>()?,
                "loop.c_bound" => c.loop_cfg.c_bound = num(k, v)?,
                "loop.top_k" => c.loop_cfg.top_k = num(k, v)?,
                "loop.modes" => {
                    c.loop_modes = list(v).map(str::parse).collect::<Result<Vec<LoopMode>>>()?
                }
                "model.arch" => c.model.kind = v.parse()?,
                "model.hidden" => {
                    c.model.hidden = if v == "auto" { None } else { Some(num(k, v)?) }
                }
                "model.widths" => {
                    c.model.widths = list(v).map(|w| num(k, w)).collect::<Result<Vec<usize>>>()?
                }
                "model.activation" => c.model.activation = v.parse()?,
                "reflow.iterations" => c.reflow.iterations = num(k, v)?,
                "reflow.lambda" => c.reflow.lambda = num(k, v)?,
                "reflow.alpha" => c.reflow.alpha = v.parse()?,
                "reflow.pairs" => c.reflow.pairs = num(k, v)?,
                "reflow.nfe" => c.reflow.nfe = num(k, v)?,
                "reflow.reverse_mode" => {
                    reverse_sde = match v {
                        "ode" => false,
                        "sde" => true,
                        _ => return Err(Error::Config(format!("unknown reverse mode `{v}`"))),
                    }
                }
                "reflow.sde_sigma" => c.sde_sigma = num(k, v)?,
                "reflow.refresh_synthetic" => c.reflow.refresh_synthetic = flag(k, v)?,
                "reflow.warm_start" => c.reflow.warm_start = flag(k, v)?,
                "reflow.store_pairs" => c.store_pairs = flag(k, v)?,
                "eval.n" => c.eval.n = num(k, v)?,
                "eval.nfe" => c.eval.nfe = num(k, v)?,
                "eval.w2_points" => c.eval.w2_points = num(k, v)?,
                "eval.straight_points" => c.eval.straight_points = num(k, v)?,
                "eval.trajectories" => c.eval.trajectories = num(k, v)?,
                "gradcheck.batches" => c.gradcheck.batches = num(k, v)?,
                "gradcheck.batch_size" => c.gradcheck.batch_size = num(k, v)?,
                "gradcheck.h" => c.gradcheck.h = num(k, v)?,
                other => {
                    if let Some(rest) = other.strip_prefix("pretrain.") {
                        set_train(&mut c.pretrain, k, rest, v)?;
                    } else if let Some(rest) = other.strip_prefix("train.") {
                        set_train(&mut c.reflow.train, k, rest, v)?;
                    } else {
                        return Err(Error::Config(format!("unknown config key `{other}`")));
                    }
                }
            }
        }
        c.reflow.reverse_mode = if reverse_sde {
            ReverseMode::Sde { sigma: c.sde_sigma }
        } else {
            ReverseMode::Ode
        };
        Ok(c)
    }

    /// Every key that affects results, in a form [`Self::from_kv`] reads
    /// back exactly.
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("kind", self.kind.as_str().into());
        put("name", self.name.clone());
        put("preset", self.preset.as_str().into());
        put("seeds", join(self.seeds.iter()));
        put(
            "output",
            self.output.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        put("data.n", self.data_n.to_string());
        put("data.ring.components", self.ring.components.to_string());
        put("data.ring.radius", fmt_f64(self.ring.radius));
        put("data.ring.std", fmt_f64(self.ring.std));
        put("loop.iterations", self.loop_cfg.iterations.to_string());
        put("loop.sigma", fmt_f64(self.loop_cfg.sigma));
        put("loop.sigma_hat", fmt_f64(self.loop_cfg.sigma_hat));
        put("loop.noise_scale", self.loop_cfg.noise_scale.as_str().into());
        put("loop.gram_scale", self.loop_cfg.gram_scale.as_str().into());
        put("loop.c_bound", fmt_f64(self.loop_cfg.c_bound));
        put("loop.top_k", self.loop_cfg.top_k.to_string());
        put("loop.modes", join(self.loop_modes.iter()));
        put("model.arch", self.model.kind.as_str().into());
        put(
            "model.hidden",
            self.model.hidden.map_or("auto".to_string(), |h| h.to_string()),
        );
        put("model.widths", join(self.model.widths.iter()));
        put("model.activation", self.model.activation.as_str().into());
        for (prefix, t) in [("pretrain", &self.pretrain), ("train", &self.reflow.train)] {
            put(&format!("{prefix}.steps"), t.steps.to_string());
            put(&format!("{prefix}.batch"), t.batch.to_string());
            put(&format!("{prefix}.lr"), fmt_f64(t.learning_rate));
            put(&format!("{prefix}.warmup"), t.warmup.to_string());
            put(&format!("{prefix}.schedule"), t.schedule.as_str().into());
            put(&format!("{prefix}.time_sampling"), t.time_sampling.as_str().into());
        }
        put("reflow.iterations", self.reflow.iterations.to_string());
        put("reflow.lambda", fmt_f64(self.reflow.lambda));
        put("reflow.alpha", self.reflow.alpha.to_string());
        put("reflow.pairs", self.reflow.pairs.to_string());
        put("reflow.nfe", self.reflow.nfe.to_string());
        put("reflow.reverse_mode", self.reflow.reverse_mode.as_str().into());
        put("reflow.sde_sigma", fmt_f64(self.sde_sigma));
        put("reflow.refresh_synthetic", self.reflow.refresh_synthetic.to_string());
        put("reflow.warm_start", self.reflow.warm_start.to_string());
        put("reflow.store_pairs", self.store_pairs.to_string());
        put("eval.n", self.eval.n.to_string());
        put("eval.nfe", self.eval.nfe.to_string());
        put("eval.w2_points", self.eval.w2_points.to_string());
        put("eval.straight_points", self.eval.straight_points.to_string());
        put("eval.trajectories", self.eval.trajectories.to_string());
        put("gradcheck.batches", self.gradcheck.batches.to_string());
        put("gradcheck.batch_size", self.gradcheck.batch_size.to_string());
        put("gradcheck.h", fmt_f64(self.gradcheck.h));
        m
    }

    pub fn to_text(&self) -> String {
        self.to_kv()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Reads a config file and applies `key=value` overrides on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut kv = parse_kv_text(&text)
            .map_err(|e| Error::format(path, e.to_string()))?;
        apply_overrides(&mut kv, overrides)?;
        let c = ExperimentConfig::from_kv(&kv)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.seeds.is_empty() {
            return bad("seed list is empty".into());
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return bad("seed list has duplicates".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("bad run name `{}`", self.name));
        }
        if self.data_n < 2 {
            return bad("data.n must be >= 2".into());
        }
        if self.preset == PresetName::Mix2d {
            let ring = crate::data::MixtureSpec::ring(self.ring.components, self.ring.radius, self.ring.std);
            if let Err(e) = ring {
                return bad(format!("bad ring layout: {e}"));
            }
        }
        match self.kind {
            ExperimentKind::DaeLoop => {
                self.loop_cfg.validate()?;
                if self.loop_modes.is_empty() {
                    return bad("loop.modes is empty".into());
                }
                if self.eval.w2_points > self.data_n.min(MAX_ASSIGNMENT_SIZE) {
                    return bad(format!(
                        "eval.w2_points must be <= min(data.n, {MAX_ASSIGNMENT_SIZE})"
                    ));
                }
            }
            k if k.is_flow() => {
                self.pretrain.validate()?;
                self.reflow.validate()?;
                if self.model.widths.is_empty() && self.model.kind == ModelKind::Mlp {
                    return bad("model.widths is empty".into());
                }
                if self.eval.n < 2 || self.eval.nfe == 0 {
                    return bad("eval.n must be >= 2 and eval.nfe >= 1".into());
                }
                if self.eval.w2_points > self.eval.n.min(MAX_ASSIGNMENT_SIZE) {
                    return bad(format!(
                        "eval.w2_points must be <= min(eval.n, {MAX_ASSIGNMENT_SIZE})"
                    ));
                }
                if self.eval.straight_points == 0 || self.eval.straight_points > self.eval.n {
                    return bad("eval.straight_points must be in 1..=eval.n".into());
                }
                if self.eval.trajectories > self.eval.n {
                    return bad("eval.trajectories must be <= eval.n".into());
                }
                if !(self.sde_sigma >= 0.0) {
                    return bad("reflow.sde_sigma must be >= 0".into());
                }
            }
            ExperimentKind::GradCheck => {
                if self.gradcheck.batches == 0 || self.gradcheck.batch_size == 0 {
                    return bad("gradcheck needs at least one non-empty batch".into());
                }
                if !(1e-7..=1e-3).contains(&self.gradcheck.h) {
                    return bad("gradcheck.h must be in [1e-7, 1e-3]".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// The run directory: `output` if set, otherwise `<root>/<name>` with
    /// the root taken from [`OUTPUT_ROOT_ENV`].
    pub fn run_dir(&self) -> PathBuf {
        match &self.output {
            Some(p) => p.clone(),
            None => {
                let root = std::env::var_os(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
                root.join(&self.name)
            }
        }
    }
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> Result<()> {
    match field {
        "steps" => t.steps = num(key, v)?,
        "batch" => t.batch = num(key, v)?,
        "lr" => t.learning_rate = num(key, v)?,
        "warmup" => t.warmup = num(key, v)?,
        "schedule" => t.schedule = v.parse::<LrSchedule>()?,
        "time_sampling" => t.time_sampling = v.parse::<TimeSampling>()?,
        _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean `{v}` for `{key}`"))),
    }
}

fn list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// `"0,3,5"` or the half-open range `"0..20"`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>> {
    if let Some((a, b)) = v.split_once("..") {
        let a: u64 = num("seeds", a.trim())?;
        let b: u64 = num("seeds", b.trim())?;
        return Ok((a..b).collect());
    }
    list(v).map(|s| num("seeds", s)).collect()
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut m = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        if m.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key `{k}`", i + 1)));
        }
    }
    Ok(m)
}

pub fn apply_overrides(kv: &mut BTreeMap<String, String>, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(())
}

/// Creates `dir` and checks that a file can be written into it.
pub fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    std::fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "kebab-case")]
pub enum SeedStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEntry {
    pub seed: u64,
    pub status: SeedStatus,
    pub files: Vec<PathBuf>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub name: String,
    pub version: String,
    pub config: BTreeMap<String, String>,
    pub run_dir: PathBuf,
    pub seeds: Vec<SeedEntry>,
    pub aggregate: Option<PathBuf>,
    pub wall_clock_s: f64,
}

impl RunManifest {
    pub fn all_ok(&self) -> bool {
        self.seeds.iter().all(|s| s.status == SeedStatus::Ok)
    }

    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn write(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::format(&path, e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { workers: 1 }
    }
}

struct SeedOutcome {
    series: MetricSeries,
    files: Vec<PathBuf>,
    failure: Option<String>,
}

/// Runs every seed, writes per-seed and aggregate artifacts and the
/// manifest. Seed failures are recorded, not returned; errors are
/// returned only when the run cannot start.
pub fn run(config: &ExperimentConfig, options: RunOptions) -> Result<RunManifest> {
    config.validate()?;
    let run_dir = config.run_dir();
    ensure_writable(&run_dir)?;
    let started = Instant::now();
    let cfg_path = run_dir.join("config.txt");
    std::fs::write(&cfg_path, config.to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let workers = options.workers.clamp(1, config.seeds.len());
    let mut results: Vec<Option<(SeedEntry, Option<MetricSeries>)>> = vec![None; config.seeds.len()];
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run_dir = &run_dir;
                s.spawn(move || {
                    (w..config.seeds.len())
                        .step_by(workers)
                        .map(|i| (i, run_one_seed(config, config.seeds[i], run_dir)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("seed worker panicked") {
                results[i] = Some(r);
            }
        }
    });

    let mut entries = Vec::new();
    let mut ok_series = Vec::new();
    for r in results.into_iter().flatten() {
        if let (SeedStatus::Ok, Some(s)) = (&r.0.status, r.1) {
            ok_series.push(s);
        }
        entries.push(r.0);
    }
    let mut aggregate = None;
    if !ok_series.is_empty() {
        let agg = MetricSeries::aggregate(&ok_series)?;
        let p = run_dir.join("aggregate.csv");
        agg.write_csv(&p)?;
        let sp = run_dir.join("summary.json");
        let summary = agg.summary(&config.to_kv());
        let text = serde_json::to_string_pretty(&summary).map_err(|e| Error::format(&sp, e.to_string()))?;
        std::fs::write(&sp, text).map_err(|e| Error::io(&sp, e))?;
        aggregate = Some(p);
    }
    let manifest = RunManifest {
        kind: config.kind.as_str().to_string(),
        name: config.name.clone(),
        version: crate::VERSION.to_string(),
        config: config.to_kv(),
        run_dir: run_dir.clone(),
        seeds: entries,
        aggregate,
        wall_clock_s: started.elapsed().as_secs_f64(),
    };
    manifest.write(&run_dir)?;
    Ok(manifest)
}

fn run_one_seed(cfg: &ExperimentConfig, seed: u64, run_dir: &Path) -> (SeedEntry, Option<MetricSeries>) {
    let started = Instant::now();
    let dir = run_dir.join(format!("seed_{seed}"));
    let result = std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(&dir, e))
        .and_then(|_| match cfg.kind {
            ExperimentKind::DaeLoop => seed_dae_loop(cfg, seed, &dir),
            ExperimentKind::GradCheck => seed_gradcheck(cfg, seed, &dir),
            ExperimentKind::Metrics => seed_metrics(cfg, seed, &dir),
            _ => seed_flow(cfg, seed, &dir),
        })
        .and_then(|mut out| {
            let p = dir.join("metrics.csv");
            out.series.write_csv(&p)?;
            out.files.insert(0, p);
            Ok(out)
        });
    let (status, files, series) = match result {
        Ok(out) => match out.failure {
            None => (SeedStatus::Ok, out.files, Some(out.series)),
            Some(reason) => (SeedStatus::Failed { reason }, out.files, None),
        },
        Err(e) => (SeedStatus::Failed { reason: e.to_string() }, Vec::new(), None),
    };
    if let SeedStatus::Failed { reason } = &status {
        log::error!("seed {seed} failed: {reason}");
    } else {
        log::info!("seed {seed} done in {:.1}s", started.elapsed().as_secs_f64());
    }
    (
        SeedEntry {
            seed,
            status,
            files,
            wall_clock_s: started.elapsed().as_secs_f64(),
        },
        series,
    )
}

fn loop_prefix(mode: LoopMode) -> &'static str {
    match mode {
        LoopMode::SyntheticOnly => "syn",
        LoopMode::AugmentReal => "aug",
    }
}

fn seed_dae_loop(cfg: &ExperimentConfig, seed: u64, _dir: &Path) -> Result<SeedOutcome> {
    let preset = preset_with_layout(cfg.preset, cfg.ring)?;
    let x = preset.sample_target(cfg.data_n, &mut RngStream::new(seed, DATA_STREAM))?;
    let target = preset.target.moments();
    let reference = match cfg.eval.w2_points {
        0 => None,
        k => Some(preset.sample_target(k, &mut RngStream::new(seed, EVAL_STREAM))?),
    };
    let mut names: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (m, &mode) in cfg.loop_modes.iter().enumerate() {
        let lc = LoopConfig {
            mode,
            ..cfg.loop_cfg.clone()
        };
        let mut rng = RngStream::new(seed, LOOP_STREAM).derive(m as u64);
        let trace = run_loop_with_reference(&lc, &x, Some(&target), reference.as_ref(), &mut rng)?;
        let p = loop_prefix(mode);
        names.extend(trace.csv_header().iter().skip(1).map(|h| format!("{p}_{h}")));
        for (r, row) in trace.csv_rows().into_iter().enumerate() {
            if m == 0 {
                rows.push(Vec::new());
            }
            rows[r].extend(&row[1..]);
        }
    }
    let cols: Vec<(&str, &str)> = names.iter().map(|n| (n.as_str(), "run_loop")).collect();
    let mut series = MetricSeries::new(&cols);
    for (r, row) in rows.iter().enumerate() {
        series.push(r + 1, row)?;
    }
    Ok(SeedOutcome {
        series,
        files: Vec::new(),
        failure: None,
    })
}

fn seed_gradcheck(cfg: &ExperimentConfig, seed: u64, _dir: &Path) -> Result<SeedOutcome> {
    let (series, worst) = gradcheck_series(cfg, seed)?;
    let failure = (worst > GRADCHECK_TOLERANCE).then(|| {
        format!("max relative gradient error {worst:e} exceeds {GRADCHECK_TOLERANCE:e}")
    });
    Ok(SeedOutcome {
        series,
        files: Vec::new(),
        failure,
    })
}

/// Gradient checks of the linear-time field and both MLP activations on
/// `gradcheck.batches` random batches. Row `b` holds the worst relative
/// error per architecture; the second value is the overall worst.
pub fn gradcheck_series(cfg: &ExperimentConfig, seed: u64) -> Result<(MetricSeries, f64)> {
    let d = preset_with_layout(cfg.preset, cfg.ring)?.dim();
    let archs = [
        ("linear_time", Architecture::linear_time(d)),
        (
            "mlp_tanh",
            Architecture::Mlp {
                dim: d,
                widths: cfg.model.widths.clone(),
                activation: Activation::Tanh,
            },
        ),
        (
            "mlp_selu",
            Architecture::Mlp {
                dim: d,
                widths: cfg.model.widths.clone(),
                activation: Activation::Selu,
            },
        ),
    ];
    let cols: Vec<(&str, &str)> = archs.iter().map(|(n, _)| (*n, "grad_check")).collect();
    let mut series = MetricSeries::new(&cols);
    let mut rng = RngStream::new(seed, GRADCHECK_STREAM);
    let mut worst = 0.0_f64;
    for b in 0..cfg.gradcheck.batches {
        let mut row = Vec::new();
        for (_, arch) in &archs {
            let model = VectorField::new(arch.clone(), &mut rng)?;
            let batch = random_batch(d, cfg.gradcheck.batch_size, &mut rng);
            let report = grad_check(&model, &batch, cfg.gradcheck.h)?;
            worst = worst.max(report.max_error());
            row.push(report.max_error());
        }
        series.push(b, &row)?;
    }
    Ok((series, worst))
}

fn seed_metrics(cfg: &ExperimentConfig, seed: u64, _dir: &Path) -> Result<SeedOutcome> {
    let preset = preset_with_layout(cfg.preset, cfg.ring)?;
    let mut rng = RngStream::new(seed, DATA_STREAM);
    let n = cfg.data_n.min(MAX_ASSIGNMENT_SIZE);
    let src = preset.sample_source(n, &mut rng)?;
    let tgt = preset.sample_target(n, &mut rng)?;
    let (pc0, s0) = dim_tracks(&tgt)?;
    let s1 = if tgt.cols() > 1 { coordinate_std(&tgt, 1)? } else { 0.0 };
    let mut series = MetricSeries::new(&[
        ("w2_gaussian", "w2_gaussian"),
        ("w2_gaussian_fit", "w2_gaussian"),
        ("w2_empirical", "w2_empirical"),
        ("pc0", "dim_tracks"),
        ("dim0_std", "dim_tracks"),
        ("dim1_std", "coordinate_std"),
    ]);
    series.push(
        0,
        &[
            w2_gaussian(&preset.source, &preset.target.moments())?,
            w2_gaussian(&GaussianSpec::fit(&src)?, &GaussianSpec::fit(&tgt)?)?,
            w2_empirical(&src, &tgt)?,
            pc0,
            s0,
            s1,
        ],
    )?;
    Ok(SeedOutcome {
        series,
        files: Vec::new(),
        failure: None,
    })
}

fn seed_flow(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedOutcome> {
    let preset = preset_with_layout(cfg.preset, cfg.ring)?;
    let real = preset.sample_target(cfg.data_n, &mut RngStream::new(seed, DATA_STREAM))?;
    let arch = cfg.model.architecture(preset.dim());
    let (m0, pre) = pretrain(arch, &real, &cfg.pretrain, seed)?;
    let mut ev = Evaluator::new(&preset, cfg.eval.n, cfg.eval.nfe, seed)?;
    ev.w2_points = cfg.eval.w2_points;
    ev.straight_points = cfg.eval.straight_points;
    let ctx = RunContext {
        seed,
        evaluator: Some(ev.clone()),
        store_dir: cfg.store_pairs.then(|| dir.join("stores")),
        capture_batches: 0,
    };
    let out = match cfg.kind {
        ExperimentKind::RfCollapse | ExperimentKind::Reflow => run_reflow(&m0, &cfg.reflow, &ctx)?,
        ExperimentKind::RaReflow => run_ra_reflow(&m0, &real, &cfg.reflow, &ctx)?,
        ExperimentKind::OraReflow => run_ora_reflow(&m0, &real, &cfg.reflow, &ctx)?,
        ExperimentKind::RasReflow => run_ras_reflow(&m0, &real, &cfg.reflow, cfg.sde_sigma, &ctx)?,
        k => return Err(Error::Config(format!("`{k}` is not a flow experiment"))),
    };
    let mut files = Vec::new();

    let mut losses = MetricSeries::new(&[("final_loss", "rf_train")]);
    losses.push(0, &[pre.tail_loss(50)])?;
    for (j, r) in out.reports.iter().enumerate() {
        losses.push(j + 1, &[r.tail_loss(50)])?;
    }
    let lp = dir.join("train_loss.csv");
    losses.write_csv(&lp)?;
    files.push(lp);

    for (j, m) in out.models.iter().enumerate() {
        let p = dir.join("models").join(format!("j_{j:03}"));
        m.save(&p, seed)?;
        files.push(p);
    }
    if cfg.eval.trajectories > 0 {
        let tdir = dir.join("trajectories");
        std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
        let rows: Vec<usize> = (0..cfg.eval.trajectories).collect();
        let z = ev.z.select_rows(&rows);
        let last = out.models.len() - 1;
        let mut picks = vec![0, 1.min(last), last];
        picks.dedup();
        for j in picks {
            let traj = ode_trajectory(&out.models[j], &IntegratorConfig::forward(cfg.eval.nfe), &z)?;
            let p = tdir.join(format!("j_{j:03}.csv"));
            traj.write_csv(&p)?;
            files.push(p);
        }
        let p = tdir.join("target.csv");
        write_samples_csv(&p, &ev.target.select_rows(&rows))?;
        files.push(p);
        let p = tdir.join("real.csv");
        let rrows: Vec<usize> = (0..cfg.eval.trajectories.min(real.rows())).collect();
        write_samples_csv(&p, &real.select_rows(&rrows))?;
        files.push(p);
    }
    files.extend(out.stores);
    Ok(SeedOutcome {
        series: out.series,
        files,
        failure: None,
    })
}

/// Reads a CSV written by [`MetricSeries::to_csv`]. Column sources are
/// not stored in the file and come back as `"csv"`.
pub fn read_series_csv(path: &Path) -> Result<MetricSeries> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))?;
    let names: Vec<&str> = header.split(',').collect();
    if names.first() != Some(&"j") {
        return Err(Error::format(path, "first column must be `j`"));
    }
    let cols: Vec<(&str, &str)> = names[1..].iter().map(|n| (*n, "csv")).collect();
    let mut series = MetricSeries::new(&cols);
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::format(path, format!("row {} has {} fields", i + 1, fields.len())));
        }
        let j: usize = fields[0]
            .parse()
            .map_err(|_| Error::format(path, format!("bad iteration `{}`", fields[0])))?;
        let vals = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::format(path, format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        series.push(j, &vals)?;
    }
    Ok(series)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureId {
    Fig4,
    Fig6,
    Fig2Demo,
}

impl FigureId {
    pub fn as_str(self) -> &'static str {
        match self {
            FigureId::Fig4 => "fig4",
            FigureId::Fig6 => "fig6",
            FigureId::Fig2Demo => "fig2-demo",
        }
    }
}

impl FromStr for FigureId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig4" => Ok(FigureId::Fig4),
            "fig6" => Ok(FigureId::Fig6),
            "fig2-demo" => Ok(FigureId::Fig2Demo),
            _ => Err(Error::Config(format!("unknown figure `{s}` (fig4, fig6, fig2-demo)"))),
        }
    }
}

fn panel(agg: &MetricSeries, path: &Path, wanted: &[&str]) -> Result<String> {
    let mut cols = Vec::new();
    for w in wanted {
        for suffix in ["mean", "std"] {
            let name = format!("{w}_{suffix}");
            if agg.column(&name).is_some() {
                cols.push(name);
            }
        }
    }
    if cols.is_empty() {
        return Err(Error::format(path, format!("aggregate has none of {wanted:?}")));
    }
    let spec: Vec<(&str, &str)> = cols.iter().map(|c| (c.as_str(), "aggregate")).collect();
    let mut out = MetricSeries::new(&spec);
    for (r, &j) in agg.iterations.iter().enumerate() {
        let row: Vec<f64> = cols.iter().map(|c| agg.column(c).unwrap()[r]).collect();
        out.push(j, &row)?;
    }
    out.write_csv(path)?;
    Ok(cols.join(", "))
}

/// Writes the plot-ready CSV bundle for `figure` into
/// `<run_dir>/figures/<figure>/` with a README describing each file.
pub fn figure_data(run_dir: &Path, figure: FigureId) -> Result<Vec<PathBuf>> {
    if !run_dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "run directory {} does not exist",
            run_dir.display()
        )));
    }
    let manifest = RunManifest::read(run_dir)?;
    let kind: ExperimentKind = manifest.kind.parse()?;
    let expected_ok = match figure {
        FigureId::Fig4 => kind == ExperimentKind::DaeLoop,
        FigureId::Fig6 => kind.is_flow(),
        FigureId::Fig2Demo => kind.is_flow(),
    };
    if !expected_ok {
        return Err(Error::Config(format!(
            "{} cannot be built from a `{kind}` run",
            figure.as_str()
        )));
    }
    let out_dir = run_dir.join("figures").join(figure.as_str());
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let mut files = Vec::new();
    let mut readme = format!(
        "# {} data for run `{}`\n\nGenerated from `{}` ({} run).\n\n",
        figure.as_str(),
        manifest.name,
        run_dir.display(),
        kind
    );

    match figure {
        FigureId::Fig4 | FigureId::Fig6 => {
            let agg_path = manifest
                .aggregate
                .clone()
                .unwrap_or_else(|| run_dir.join("aggregate.csv"));
            let agg = read_series_csv(&agg_path)?;
            let panels: Vec<(&str, &str, Vec<&str>)> = if figure == FigureId::Fig4 {
                vec![
                    ("w2.csv", "Gaussian-fit and empirical W2 of the model output to the target", vec!["syn_w2_gauss", "aug_w2_gauss", "syn_w2_empirical", "aug_w2_empirical"]),
                    ("dim0.csv", "top principal std and coordinate-0 std of the model output", vec!["syn_pc0", "aug_pc0", "syn_dim0_std", "aug_dim0_std"]),
                    ("rank.csv", "numerical rank of the fitted map at threshold 0.2", vec!["syn_rank_tau02", "aug_rank_tau02"]),
                ]
            } else {
                vec![
                    ("w2.csv", "W2 of generated samples to the target", vec!["w2_gauss", "w2"]),
                    ("dim0.csv", "coordinate-0 std and top principal std of generated samples", vec!["dim0_std", "pc0"]),
                    ("dim1.csv", "coordinate-1 std of generated samples", vec!["dim1_std"]),
                ]
            };
            readme.push_str(
                "Each file has the iteration `j` followed by `<metric>_mean` and \
                 `<metric>_std` over the completed seeds.\n\n",
            );
            if figure == FigureId::Fig4 {
                readme.push_str("Prefix `syn_` is the synthetic-only loop, `aug_` the loop augmented with real data.\n\n");
            }
            for (file, what, wanted) in panels {
                let p = out_dir.join(file);
                let cols = panel(&agg, &p, &wanted)?;
                readme.push_str(&format!("* `{file}`: {what}. Columns: j, {cols}.\n"));
                files.push(p);
            }
        }
        FigureId::Fig2Demo => {
            let first = manifest
                .seeds
                .iter()
                .find(|s| s.status == SeedStatus::Ok)
                .ok_or_else(|| Error::Config("run has no completed seed".into()))?;
            let tdir = run_dir.join(format!("seed_{}", first.seed)).join("trajectories");
            let mut traj: Vec<PathBuf> = std::fs::read_dir(&tdir)
                .map_err(|e| Error::io(&tdir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("j_")))
                .collect();
            traj.sort();
            if traj.is_empty() {
                return Err(Error::Config(format!(
                    "no trajectories under {} (set eval.trajectories > 0)",
                    tdir.display()
                )));
            }
            readme.push_str(&format!(
                "Trajectories of seed {} from the shared evaluation noise.\n\n",
                first.seed
            ));
            for src in traj {
                let name = src.file_name().unwrap().to_string_lossy().replace("j_", "trajectory_j");
                let dst = out_dir.join(&name);
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
                readme.push_str(&format!(
                    "* `{name}`: flow of the model after that many reflow iterations \
                     (0 is the initial rectified flow). Columns: row, step, t, x0, x1, ...\n"
                ));
                files.push(dst);
            }
            for (name, what) in [("target.csv", "target samples"), ("real.csv", "real training samples")] {
                let src = tdir.join(name);
                let dst = out_dir.join(name);
                std::fs::copy(&src, &dst).map_err(|e| Error::io(&dst, e))?;
                readme.push_str(&format!("* `{name}`: {what}. Columns: x0, x1, ...\n"));
                files.push(dst);
            }
        }
    }
    let rp = out_dir.join("README.md");
    std::fs::write(&rp, readme).map_err(|e| Error::io(&rp, e))?;
    files.push(rp);
    Ok(files)
}

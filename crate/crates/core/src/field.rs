//! Velocity fields `v(t, x)`: the trainable linear-with-time and MLP models,
//! fixed analytic fields, Adam, and finite-difference gradient checks.
//!
//! Inputs are fed to the trainable models as `[x, t]`, i.e. time is
//! concatenated as the last input coordinate.
//!
//! Checkpoint layout (directory):
//!
//! * `manifest.txt`: UTF-8 `key=value` lines with `format`, `architecture`
//!   (`linear-time` or `mlp`), `dim`, `hidden` or `widths` (comma list),
//!   `activation`, `param_count`, `seed` and `version`.
//! * `params.bin`: `param_count` little-endian f64 values. Layers are stored
//!   in order; each layer is its weight matrix (out × in, row-major) followed
//!   by its bias vector when it has one.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::data::RngStream;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Anything that yields a velocity for a batch of states.
pub trait VelocityField: Sync {
    fn dim(&self) -> usize;

    /// Velocities for rows of `x` at per-row times `t`.
    fn velocity_batch(&self, t: &[f64], x: &Matrix) -> Matrix;
}

/// `v(t, x) = A x + b t + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineField {
    pub a: Matrix,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl AffineField {
    pub fn constant(c: Vec<f64>) -> Self {
        let d = c.len();
        AffineField {
            a: Matrix::zeros(d, d),
            b: vec![0.0; d],
            c,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::constant(vec![0.0; dim])
    }

    /// `v(t, x) = x`.
    pub fn identity(dim: usize) -> Self {
        AffineField {
            a: Matrix::identity(dim),
            b: vec![0.0; dim],
            c: vec![0.0; dim],
        }
    }
}

impl VelocityField for AffineField {
    fn dim(&self) -> usize {
        self.c.len()
    }

    fn velocity_batch(&self, t: &[f64], x: &Matrix) -> Matrix {
        let mut out = x.matmul_t(&self.a).expect("affine field dimension");
        for (i, &ti) in t.iter().enumerate() {
            for ((o, b), c) in out.row_mut(i).iter_mut().zip(&self.b).zip(&self.c) {
                *o += b * ti + c;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Selu,
}

const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
const SELU_SCALE: f64 = 1.050_700_987_355_480_5;

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Selu => {
                if z > 0.0 {
                    SELU_SCALE * z
                } else {
                    SELU_SCALE * SELU_ALPHA * z.exp_m1()
                }
            }
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Selu => {
                if z > 0.0 {
                    SELU_SCALE
                } else {
                    a + SELU_SCALE * SELU_ALPHA
                }
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Selu => "selu",
        }
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "selu" => Ok(Activation::Selu),
            _ => Err(Error::Config(format!("unknown activation `{s}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Architecture {
    /// `W2 W1 [x; t]` with `W1: hidden × (d+1)` and `W2: d × hidden`, no
    /// biases and no activation.
    LinearTime { dim: usize, hidden: usize },
    /// Dense layers `d+1 → widths… → d` with biases and the activation
    /// between hidden layers.
    Mlp {
        dim: usize,
        widths: Vec<usize>,
        activation: Activation,
    },
}

impl Architecture {
    pub fn linear_time(dim: usize) -> Self {
        Architecture::LinearTime {
            dim,
            hidden: dim + 1,
        }
    }

    pub fn mlp(dim: usize) -> Self {
        Architecture::Mlp {
            dim,
            widths: vec![64; 3],
            activation: Activation::Tanh,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Architecture::LinearTime { dim, .. } | Architecture::Mlp { dim, .. } => *dim,
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::LinearTime { .. } => "linear-time",
            Architecture::Mlp { .. } => "mlp",
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self {
            Architecture::LinearTime { dim, hidden } => *dim > 0 && *hidden > 0,
            Architecture::Mlp { dim, widths, .. } => *dim > 0 && widths.iter().all(|&w| w > 0),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")))
        }
    }

    fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |inp: usize, out: usize, bias: bool| {
            layers.push(Layer {
                inp,
                out,
                bias,
                offset,
            });
            offset += inp * out + if bias { out } else { 0 };
        };
        match self {
            Architecture::LinearTime { dim, hidden } => {
                push(dim + 1, *hidden, false);
                push(*hidden, *dim, false);
            }
            Architecture::Mlp { dim, widths, .. } => {
                let mut inp = dim + 1;
                for &w in widths {
                    push(inp, w, true);
                    inp = w;
                }
                push(inp, *dim, true);
            }
        }
        layers
    }

    fn activation(&self) -> Option<Activation> {
        match self {
            Architecture::LinearTime { .. } => None,
            Architecture::Mlp { activation, .. } => Some(*activation),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    inp: usize,
    out: usize,
    bias: bool,
    offset: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.inp * self.out
    }

    fn len(&self) -> usize {
        self.weight_len() + if self.bias { self.out } else { 0 }
    }
}

/// A named contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub range: std::ops::Range<usize>,
}

/// Regression data for the flow loss: states `x_t` at times `t` and their
/// velocity targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub t: Vec<f64>,
    pub xt: Matrix,
    pub target: Matrix,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.t.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        if self.xt.rows() != self.t.len()
            || self.target.shape() != self.xt.shape()
            || self.xt.cols() != dim
        {
            return Err(Error::Shape(format!(
                "batch has {} times, x_t {:?}, target {:?}; model dimension {dim}",
                self.t.len(),
                self.xt.shape(),
                self.target.shape()
            )));
        }
        Ok(())
    }
}

/// A trainable velocity field with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    arch: Architecture,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// `C = A·op(B) + beta·C` on row-major slices, where the strides select
/// the operand layouts.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: callers pass slices covering the strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct Tape {
    /// Layer inputs, one per layer, each n × inp.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl VectorField {
    /// Gaussian init with std `1/√fan_in`; biases start at zero.
    pub fn new(arch: Architecture, rng: &mut RngStream) -> Result<Self> {
        let mut field = Self::zeros(arch)?;
        for layer in field.layers.clone() {
            let std = 1.0 / (layer.inp as f64).sqrt();
            for p in &mut field.params[layer.offset..layer.offset + layer.weight_len()] {
                *p = std * rng.normal();
            }
        }
        Ok(field)
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let layers = arch.layers();
        let count = layers.iter().map(Layer::len).sum();
        Ok(VectorField {
            arch,
            layers,
            params: vec![0.0; count],
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let mut field = Self::zeros(arch)?;
        if params.len() != field.params.len() {
            return Err(Error::Shape(format!(
                "architecture needs {} parameters, got {}",
                field.params.len(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        field.params = params;
        Ok(field)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut blocks = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = layer.offset..layer.offset + layer.weight_len();
            match self.arch {
                Architecture::LinearTime { .. } => blocks.push(ParamBlock {
                    name: format!("w{}", l + 1),
                    range: w,
                }),
                Architecture::Mlp { .. } => {
                    let end = w.end;
                    blocks.push(ParamBlock {
                        name: format!("layer{l}.weight"),
                        range: w,
                    });
                    blocks.push(ParamBlock {
                        name: format!("layer{l}.bias"),
                        range: end..end + layer.out,
                    });
                }
            }
        }
        blocks
    }

    /// For the linear-time model, the product `W2 W1 = [A | b]`.
    pub fn linear_time_product(&self) -> Option<Matrix> {
        let Architecture::LinearTime { dim, hidden } = self.arch else {
            return None;
        };
        let (l1, l2) = (self.layers[0], self.layers[1]);
        let w1 = Matrix::new(hidden, dim + 1, self.params[l1.offset..l1.offset + l1.len()].to_vec())
            .ok()?;
        let w2 = Matrix::new(dim, hidden, self.params[l2.offset..l2.offset + l2.len()].to_vec())
            .ok()?;
        w2.matmul(&w1).ok()
    }

    /// Sets the last layer to zero so the field outputs zero everywhere.
    pub fn zero_output_layer(&mut self) {
        let last = *self.layers.last().expect("at least one layer");
        self.params[last.offset..last.offset + last.len()].fill(0.0);
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::Shape(format!("input has length {}, model dimension {d}", x.len())));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidArgument(format!("time {t} outside [0, 1]")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("forward input".into()));
        }
        let xm = Matrix::new(1, d, x.to_vec())?;
        Ok(self.forward_batch(&[t], &xm)?.into_data())
    }

    pub fn forward_batch(&self, t: &[f64], x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dim() || x.rows() != t.len() {
            return Err(Error::Shape(format!(
                "batch x is {:?} with {} times; model dimension {}",
                x.shape(),
                t.len(),
                self.dim()
            )));
        }
        let tape = self.run(t, x, false);
        Matrix::new(x.rows(), self.dim(), tape.out)
            .map_err(|_| Error::NonFinite("model output".into()))
    }

    fn run(&self, t: &[f64], x: &Matrix, keep: bool) -> Tape {
        let n = x.rows();
        let d = self.dim();
        let mut h = Vec::with_capacity(n * (d + 1));
        for i in 0..n {
            h.extend_from_slice(x.row(i));
            h.push(t[i]);
        }
        let act = self.arch.activation();
        let last = self.layers.len() - 1;
        let mut tape = Tape {
            inputs: Vec::new(),
            pre: Vec::new(),
            out: Vec::new(),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &self.params[layer.offset..layer.offset + layer.weight_len()];
            let mut z = vec![0.0; n * layer.out];
            if layer.bias {
                let b = &self.params[layer.offset + layer.weight_len()..layer.offset + layer.len()];
                for row in z.chunks_exact_mut(layer.out) {
                    row.copy_from_slice(b);
                }
            }
            // Z = H Wᵀ (+ b)
            gemm(
                n,
                layer.inp,
                layer.out,
                &h,
                (layer.inp, 1),
                w,
                (1, layer.inp),
                if layer.bias { 1.0 } else { 0.0 },
                &mut z,
            );
            let next = match act {
                Some(a) if l < last => {
                    let out: Vec<f64> = z.iter().map(|&v| a.apply(v)).collect();
                    if keep {
                        tape.pre.push(z);
                    }
                    out
                }
                _ => z,
            };
            if keep {
                tape.inputs.push(h);
            }
            h = next;
        }
        tape.out = h;
        tape
    }

    /// Mean over rows of `‖v(t, x_t) − target‖²` and its gradient.
    pub fn loss_grad(&self, batch: &TrainBatch) -> Result<(f64, Vec<f64>)> {
        batch.validate(self.dim())?;
        let n = batch.len();
        let d = self.dim();
        let tape = self.run(&batch.t, &batch.xt, true);
        let mut delta = vec![0.0; n * d];
        let mut loss = 0.0;
        for ((g, &o), &y) in delta.iter_mut().zip(&tape.out).zip(batch.target.data()) {
            let r = o - y;
            loss += r * r;
            *g = 2.0 * r / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Training {
                step: 0,
                reason: format!("loss evaluated to {loss}"),
            });
        }

        let act = self.arch.activation();
        let mut grad = vec![0.0; self.params.len()];
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let input = &tape.inputs[l];
            let (gw, rest) = grad[layer.offset..layer.offset + layer.len()].split_at_mut(layer.weight_len());
            // dW = δᵀ H
            gemm(
                layer.out,
                n,
                layer.inp,
                &delta,
                (1, layer.out),
                input,
                (layer.inp, 1),
                0.0,
                gw,
            );
            if layer.bias {
                for row in delta.chunks_exact(layer.out) {
                    for (b, v) in rest.iter_mut().zip(row) {
                        *b += v;
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.params[layer.offset..layer.offset + layer.weight_len()];
            let mut dh = vec![0.0; n * layer.inp];
            // dH = δ W
            gemm(n, layer.out, layer.inp, &delta, (layer.out, 1), w, (layer.inp, 1), 0.0, &mut dh);
            if let Some(a) = act {
                let pre = &tape.pre[l - 1];
                for ((g, &z), &h) in dh.iter_mut().zip(pre).zip(input) {
                    *g *= a.derivative(z, h);
                }
            }
            delta = dh;
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training {
                step: 0,
                reason: "gradient is not finite".into(),
            });
        }
        Ok((loss, grad))
    }

    /// Loss plus a hash of the signs of every SELU pre-activation
    /// (zero for smooth activations).
    fn probe_loss(&self, batch: &TrainBatch) -> Result<(f64, u64)> {
        if self.arch.activation() != Some(Activation::Selu) {
            return Ok((self.loss(batch)?, 0));
        }
        batch.validate(self.dim())?;
        let tape = self.run(&batch.t, &batch.xt, true);
        let mut loss = 0.0;
        for (&o, &y) in tape.out.iter().zip(batch.target.data()) {
            loss += (o - y) * (o - y);
        }
        let mut sig = 0xcbf2_9ce4_8422_2325_u64;
        for &z in tape.pre.iter().flatten() {
            sig = (sig ^ (z > 0.0) as u64).wrapping_mul(0x100_0000_01b3);
        }
        Ok((loss / batch.len() as f64, sig))
    }

    pub fn loss(&self, batch: &TrainBatch) -> Result<f64> {
        batch.validate(self.dim())?;
        let out = self.forward_batch(&batch.t, &batch.xt)?;
        Ok(out.sub(&batch.target)?.frobenius_norm().powi(2) / batch.len() as f64)
    }

    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut bytes = Vec::with_capacity(self.params.len() * 8);
        for p in &self.params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        let params_path = dir.join("params.bin");
        std::fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))?;
        let mut m = BTreeMap::new();
        m.insert("format", "vector-field-v1".to_string());
        m.insert("architecture", self.arch.tag().to_string());
        m.insert("dim", self.dim().to_string());
        match &self.arch {
            Architecture::LinearTime { hidden, .. } => {
                m.insert("hidden", hidden.to_string());
            }
            Architecture::Mlp {
                widths, activation, ..
            } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                m.insert("widths", w.join(","));
                m.insert("activation", activation.to_string());
            }
        }
        m.insert("param_count", self.params.len().to_string());
        m.insert("seed", seed.to_string());
        m.insert("version", crate::VERSION.to_string());
        write_kv(&dir.join("manifest.txt"), &m)
    }

    pub fn load(dir: &Path) -> Result<(Self, u64)> {
        let manifest = dir.join("manifest.txt");
        let m = read_kv(&manifest)?;
        let get = |k: &str| {
            m.get(k)
                .ok_or_else(|| Error::format(&manifest, format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(&manifest, format!("bad value for `{k}`")))
        };
        let dim = num("dim")?;
        let arch = match get("architecture")?.as_str() {
            "linear-time" => Architecture::LinearTime {
                dim,
                hidden: num("hidden")?,
            },
            "mlp" => Architecture::Mlp {
                dim,
                widths: get("widths")?
                    .split(',')
                    .map(|w| w.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format(&manifest, "bad widths"))?,
                activation: get("activation")?
                    .parse()
                    .map_err(|_| Error::format(&manifest, "bad activation"))?,
            },
            other => return Err(Error::format(&manifest, format!("unknown architecture `{other}`"))),
        };
        let seed = get("seed")?
            .parse()
            .map_err(|_| Error::format(&manifest, "bad seed"))?;
        let params_path = dir.join("params.bin");
        let params = read_f64s(&params_path)?;
        if params.len() != num("param_count")? {
            return Err(Error::format(&params_path, "parameter count disagrees with manifest"));
        }
        Ok((Self::from_params(arch, params)?, seed))
    }
}

impl VelocityField for VectorField {
    fn dim(&self) -> usize {
        self.arch.dim()
    }

    fn velocity_batch(&self, t: &[f64], x: &Matrix) -> Matrix {
        let tape = self.run(t, x, false);
        Matrix::from_fn(x.rows(), self.dim(), |i, j| tape.out[i * self.dim() + j])
    }
}

pub(crate) fn write_kv(path: &Path, entries: &BTreeMap<&str, String>) -> Result<()> {
    let mut s = String::new();
    for (k, v) in entries {
        s.push_str(k);
        s.push('=');
        s.push_str(v);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, format!("line {} has no `=`", no + 1)))?;
        m.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(m)
}

pub(crate) fn read_f64s(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format(path, "length is not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lr,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "adam state has {} entries, params {}, gradient {}",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn adam_step(model: &mut VectorField, state: &mut AdamState, grad: &[f64]) -> Result<()> {
    state.step(&mut model.params, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose ±h probes put a SELU pre-activation on opposite sides
    /// of zero. Central differences are meaningless there.
    pub kinked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockError>,
    pub tolerance: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Entries checked per block; blocks larger than this are sampled on an
/// even stride, always including the entry of largest analytic magnitude.
pub const GRADCHECK_MAX_PER_BLOCK: usize = 32;

pub fn grad_check(model: &VectorField, batch: &TrainBatch, h: f64) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_grad(batch)?;
    grad_check_against(model, batch, h, &analytic)
}

/// Compares `analytic` with central differences of the loss.
///
/// The relative error of an entry is `|a − n| / max(|a|, |n|, s)` with the
/// floor `s = 1e-3 · max |a|` over the block (and at least 1e-12).
pub fn grad_check_against(
    model: &VectorField,
    batch: &TrainBatch,
    h: f64,
    analytic: &[f64],
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step h = {h} outside [1e-7, 1e-3]")));
    }
    if analytic.len() != model.param_count() {
        return Err(Error::Shape("gradient length differs from parameter count".into()));
    }
    let mut probe = model.clone();
    let mut blocks = Vec::new();
    for block in model.blocks() {
        let grads = &analytic[block.range.clone()];
        let scale = grads.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        let len = block.range.len();
        let mut idx: Vec<usize> = if len <= GRADCHECK_MAX_PER_BLOCK {
            (0..len).collect()
        } else {
            let stride = len as f64 / GRADCHECK_MAX_PER_BLOCK as f64;
            (0..GRADCHECK_MAX_PER_BLOCK)
                .map(|k| (k as f64 * stride) as usize)
                .collect()
        };
        if let Some(top) = (0..len).max_by(|&a, &b| grads[a].abs().total_cmp(&grads[b].abs())) {
            if !idx.contains(&top) {
                idx.push(top);
            }
        }
        let mut worst = 0.0_f64;
        let mut kinked = 0;
        for &k in &idx {
            let p = block.range.start + k;
            let orig = probe.params[p];
            probe.params[p] = orig + h;
            let (up, up_sig) = probe.probe_loss(batch)?;
            probe.params[p] = orig - h;
            let (down, down_sig) = probe.probe_loss(batch)?;
            probe.params[p] = orig;
            if up_sig != down_sig {
                kinked += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = grads[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(err);
        }
        blocks.push(BlockError {
            name: block.name,
            max_rel_error: worst,
            checked: idx.len() - kinked,
            kinked,
        });
    }
    let pass = blocks.iter().all(|b| b.max_rel_error <= GRADCHECK_TOLERANCE);
    Ok(GradCheckReport {
        blocks,
        tolerance: GRADCHECK_TOLERANCE,
        pass,
    })
}

/// A random regression batch for gradient checks.
pub fn random_batch(dim: usize, n: usize, rng: &mut RngStream) -> TrainBatch {
    TrainBatch {
        t: (0..n).map(|_| rng.uniform()).collect(),
        xt: rng.normal_matrix(n, dim),
        target: rng.normal_matrix(n, dim),
    }
}

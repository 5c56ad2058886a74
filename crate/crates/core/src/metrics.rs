//! Wasserstein-2 distances, flow straightness, collapse distance, principal
//! direction tracks, and the per-iteration [`MetricSeries`] table.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::data::{GaussianSpec, RngStream};
use crate::dynamics::{ode_integrate, IntegratorConfig};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::numerics::{norm2, psd_sqrt, singular_values, Matrix};

/// Largest point set accepted by [`w2_empirical`].
pub const MAX_ASSIGNMENT_SIZE: usize = 4096;

/// W2 between two Gaussians: `‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁^½ Σ₂ Σ₁^½)^½)`,
/// square-rooted.
pub fn w2_gaussian(a: &GaussianSpec, b: &GaussianSpec) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dimensions {} and {}", a.dim(), b.dim())));
    }
    let mean: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let sa = a.covariance_matrix();
    let sb = b.covariance_matrix();
    let root_a = psd_sqrt(&sa)?;
    let inner = root_a.matmul(&sb)?.matmul(&root_a)?;
    let inner = Matrix::from_fn(inner.rows(), inner.cols(), |i, j| {
        0.5 * (inner[(i, j)] + inner[(j, i)])
    });
    let cross = psd_sqrt(&inner)?.trace();
    let bures = sa.trace() + sb.trace() - 2.0 * cross;
    Ok((mean + bures.max(0.0)).sqrt())
}

/// Exact minimum-cost perfect matching on a square cost matrix (row-major,
/// n×n) by shortest augmenting paths with potentials. Returns the column
/// assigned to each row.
pub fn assignment(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::Shape(format!("cost has {} entries, expected {n}²", cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // 1-based arrays with a sentinel column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        assign[owner[j] - 1] = j - 1;
    }
    Ok(assign)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact W2 between two equal-size point sets under uniform weights.
pub fn w2_empirical(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "point sets are {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty point sets".into()));
    }
    if n > MAX_ASSIGNMENT_SIZE {
        return Err(Error::InvalidArgument(format!(
            "{n} points exceed the exact-assignment limit {MAX_ASSIGNMENT_SIZE}"
        )));
    }
    let mut cost = Vec::with_capacity(n * n);
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..n {
            cost.push(squared_distance(ai, b.row(j)));
        }
    }
    let assign = assignment(&cost, n)?;
    let total: f64 = assign
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((total / n as f64).sqrt())
}

/// Mean over start points and Euler grid times of
/// `‖(x̂₁ − z) − v(t_k, φ_z(t_k))‖²`, where `x̂₁` is the endpoint of the
/// forward trajectory from `z`.
pub fn straightness(field: &dyn VelocityField, z: &Matrix, nfe: usize) -> Result<f64> {
    if nfe == 0 {
        return Err(Error::InvalidArgument("nfe must be >= 1".into()));
    }
    if z.rows() == 0 {
        return Err(Error::InvalidArgument("no start points".into()));
    }
    let (n, d) = z.shape();
    let dt = 1.0 / nfe as f64;
    let mut x = z.clone();
    let mut velocities = Vec::with_capacity(nfe);
    let mut tbuf = vec![0.0; n];
    for k in 0..nfe {
        tbuf.fill(k as f64 * dt);
        let v = field.velocity_batch(&tbuf, &x);
        for (a, b) in x.data_mut().iter_mut().zip(v.data()) {
            *a += dt * b;
        }
        if !x.is_finite() {
            return Err(Error::Integration { step: k });
        }
        velocities.push(v);
    }
    // For Euler, x̂₁ − z is the mean of the step velocities.
    let mut chord = Matrix::zeros(n, d);
    for v in &velocities {
        for (c, b) in chord.data_mut().iter_mut().zip(v.data()) {
            *c += b;
        }
    }
    let chord = chord.scale(1.0 / nfe as f64);
    let mut total = 0.0;
    for v in &velocities {
        for i in 0..n {
            for k in 0..d {
                let r = chord[(i, k)] - v[(i, k)];
                total += r * r;
            }
        }
    }
    Ok(total / (n * nfe) as f64)
}

/// Mean forward displacement `‖x₁ − x₀‖` from the given start points.
pub fn collapse_distance_from(field: &dyn VelocityField, z: &Matrix, nfe: usize) -> Result<f64> {
    if z.rows() == 0 {
        return Err(Error::InvalidArgument("no start points".into()));
    }
    let x1 = ode_integrate(field, &IntegratorConfig::forward(nfe), z)?;
    let diff = x1.sub(z)?;
    Ok((0..diff.rows()).map(|i| norm2(diff.row(i))).sum::<f64>() / diff.rows() as f64)
}

/// [`collapse_distance_from`] on `n` fresh standard-normal start points.
pub fn collapse_distance(
    field: &dyn VelocityField,
    n: usize,
    nfe: usize,
    rng: &mut RngStream,
) -> Result<f64> {
    let z = rng.normal_matrix(n, field.dim());
    collapse_distance_from(field, &z, nfe)
}

/// `(pc0, dim0_std)`: the top singular value of the centered samples over
/// `√(n−1)`, and the standard deviation of coordinate 0.
pub fn dim_tracks(x: &Matrix) -> Result<(f64, f64)> {
    if x.rows() < 2 {
        return Err(Error::InvalidArgument("dim tracks need at least two samples".into()));
    }
    let scale = ((x.rows() - 1) as f64).sqrt();
    let centered = x.centered();
    let pc0 = singular_values(&centered).first().copied().unwrap_or(0.0) / scale;
    Ok((pc0, coordinate_std(x, 0)?))
}

/// Sample standard deviation (n−1) of coordinate `k`.
pub fn coordinate_std(x: &Matrix, k: usize) -> Result<f64> {
    if k >= x.cols() || x.rows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "coordinate {k} of a {:?} sample matrix",
            x.shape()
        )));
    }
    let n = x.rows() as f64;
    let mean = (0..x.rows()).map(|i| x[(i, k)]).sum::<f64>() / n;
    let ss: f64 = (0..x.rows()).map(|i| (x[(i, k)] - mean).powi(2)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// A named column with the operation that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricColumn {
    pub name: String,
    pub source: String,
    pub values: Vec<f64>,
}

/// Per-iteration metric table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricSeries {
    pub iterations: Vec<usize>,
    pub columns: Vec<MetricColumn>,
}

impl MetricSeries {
    pub fn new(columns: &[(&str, &str)]) -> Self {
        MetricSeries {
            iterations: Vec::new(),
            columns: columns
                .iter()
                .map(|(n, s)| MetricColumn {
                    name: n.to_string(),
                    source: s.to_string(),
                    values: Vec::new(),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.iterations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.iterations.is_empty()
    }

    pub fn push(&mut self, j: usize, values: &[f64]) -> Result<()> {
        if values.len() != self.columns.len() {
            return Err(Error::Shape(format!(
                "{} values for {} columns",
                values.len(),
                self.columns.len()
            )));
        }
        if let Some((c, v)) = self
            .columns
            .iter()
            .zip(values)
            .find(|(_, v)| !v.is_finite())
        {
            return Err(Error::NonFinite(format!("metric `{}` = {v} at iteration {j}", c.name)));
        }
        self.iterations.push(j);
        for (c, &v) in self.columns.iter_mut().zip(values) {
            c.values.push(v);
        }
        Ok(())
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.values.as_slice())
    }

    pub fn names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    /// `j` followed by each column in order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("j");
        for c in &self.columns {
            out.push(',');
            out.push_str(&c.name);
        }
        out.push('\n');
        for (r, j) in self.iterations.iter().enumerate() {
            out.push_str(&j.to_string());
            for c in &self.columns {
                out.push(',');
                out.push_str(&format_value(c.values[r]));
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Final values, column sources and the supplied config echo.
    pub fn summary(&self, config: &BTreeMap<String, String>) -> Value {
        let finals: serde_json::Map<String, Value> = self
            .columns
            .iter()
            .map(|c| (c.name.clone(), json!(c.values.last())))
            .collect();
        let sources: serde_json::Map<String, Value> = self
            .columns
            .iter()
            .map(|c| (c.name.clone(), json!(c.source)))
            .collect();
        json!({
            "iterations": self.len(),
            "final": finals,
            "sources": sources,
            "config": config,
        })
    }

    /// Column-wise mean and standard deviation across equally shaped
    /// series. Output columns are `<name>_mean` and `<name>_std`.
    pub fn aggregate(series: &[MetricSeries]) -> Result<MetricSeries> {
        let first = series
            .first()
            .ok_or_else(|| Error::InvalidArgument("no series to aggregate".into()))?;
        for s in series {
            if s.iterations != first.iterations || s.names() != first.names() {
                return Err(Error::Shape("series differ in shape".into()));
            }
        }
        let mut cols = Vec::new();
        for c in &first.columns {
            for suffix in ["mean", "std"] {
                cols.push(MetricColumn {
                    name: format!("{}_{suffix}", c.name),
                    source: format!("aggregate({})", c.source),
                    values: Vec::new(),
                });
            }
        }
        let m = series.len() as f64;
        for r in 0..first.len() {
            for (ci, _) in first.columns.iter().enumerate() {
                let vals: Vec<f64> = series.iter().map(|s| s.columns[ci].values[r]).collect();
                let mean = vals.iter().sum::<f64>() / m;
                let var = if series.len() > 1 {
                    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
                } else {
                    0.0
                };
                cols[2 * ci].values.push(mean);
                cols[2 * ci + 1].values.push(var.sqrt());
            }
        }
        Ok(MetricSeries {
            iterations: first.iterations.clone(),
            columns: cols,
        })
    }
}

/// Shortest round-trip decimal form.
pub fn format_value(v: f64) -> String {
    format!("{v:?}")
}

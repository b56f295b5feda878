//! Graph time-series data: series matrices, adjacency normalization,
//! sliding windows, chronological splits, scaling and a planted-cluster
//! generator.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Node-by-time observations `N x T`.
///
/// Missing readings never appear as NaN inside `values`; they are recorded
/// in the mask and filled.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    node_ids: Vec<String>,
    values: Matrix,
    missing: Vec<bool>,
    interval_minutes: f64,
}

impl TimeSeries {
    pub fn new(node_ids: Vec<String>, values: Matrix, interval_minutes: f64) -> Result<Self> {
        let missing = vec![false; values.len()];
        Self::with_mask(node_ids, values, missing, interval_minutes)
    }

    fn with_mask(
        node_ids: Vec<String>,
        values: Matrix,
        missing: Vec<bool>,
        interval_minutes: f64,
    ) -> Result<Self> {
        if node_ids.is_empty() || values.cols() == 0 {
            return Err(Error::EmptyDataset);
        }
        if node_ids.len() != values.rows() {
            return Err(Error::shape(
                "TimeSeries::new",
                (node_ids.len(), 1),
                values.shape(),
            ));
        }
        let mut seen = BTreeSet::new();
        for id in &node_ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Contract(format!("duplicate node id `{id}`")));
            }
        }
        values.ensure_finite("TimeSeries::new")?;
        if !(interval_minutes > 0.0) {
            return Err(Error::Config(
                "interval_minutes must be positive".to_string(),
            ));
        }
        Ok(Self {
            node_ids,
            values,
            missing,
            interval_minutes,
        })
    }

    /// Builds a series from a row-per-timestep layout (`rows[t][n]`).
    ///
    /// `None` cells are marked missing and filled with the last observation
    /// of the same node; leading gaps take the first valid reading.
    pub fn from_timestep_rows(
        node_ids: Vec<String>,
        rows: &[Vec<Option<f64>>],
        interval_minutes: f64,
    ) -> Result<Self> {
        let n = node_ids.len();
        let t = rows.len();
        if n == 0 || t == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut values = Matrix::zeros(n, t);
        let mut missing = vec![false; n * t];
        for node in 0..n {
            let first = rows
                .iter()
                .find_map(|r| r.get(node).copied().flatten())
                .ok_or_else(|| {
                    Error::Domain(format!("node `{}` has no readings", node_ids[node]))
                })?;
            let mut last = first;
            for (step, row) in rows.iter().enumerate() {
                if row.len() != n {
                    return Err(Error::shape(
                        "from_timestep_rows",
                        (t, n),
                        (step, row.len()),
                    ));
                }
                match row[node] {
                    Some(v) => last = v,
                    None => missing[node * t + step] = true,
                }
                values[(node, step)] = last;
            }
        }
        Self::with_mask(node_ids, values, missing, interval_minutes)
    }

    pub fn node_ids(&self) -> &[String] {
        &self.node_ids
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn n_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.cols()
    }

    pub fn interval_minutes(&self) -> f64 {
        self.interval_minutes
    }

    pub fn is_missing(&self, node: usize, step: usize) -> bool {
        self.missing[node * self.n_steps() + step]
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|m| **m).count()
    }

    /// Time steps `start..end` as a new series.
    pub fn slice_steps(&self, start: usize, end: usize) -> Result<TimeSeries> {
        if start >= end || end > self.n_steps() {
            return Err(Error::InsufficientData {
                needed: end.max(start + 1),
                available: self.n_steps(),
            });
        }
        let t = self.n_steps();
        let values = self.values.slice_cols(start, end);
        let missing = (0..self.n_nodes())
            .flat_map(|n| self.missing[n * t + start..n * t + end].iter().copied())
            .collect();
        Ok(TimeSeries {
            node_ids: self.node_ids.clone(),
            values,
            missing,
            interval_minutes: self.interval_minutes,
        })
    }

    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> TimeSeries {
        TimeSeries {
            values: self.values.map(f),
            ..self.clone()
        }
    }
}

/// `D̃^{-1/2} (W + I) D̃^{-1/2}` with `D̃_ii = Σ_j (W + I)_ij`.
pub fn normalize_adjacency(raw: &Matrix) -> Matrix {
    let n = raw.rows();
    let deg: Vec<f64> = (0..n)
        .map(|i| raw.row(i).iter().sum::<f64>() + 1.0)
        .collect();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / libm::sqrt(*d)).collect();
    Matrix::from_fn(n, n, |i, j| {
        let w = raw[(i, j)] + if i == j { 1.0 } else { 0.0 };
        inv_sqrt[i] * w * inv_sqrt[j]
    })
}

/// Raw graph weights `W` and their normalized propagation operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    raw: Matrix,
    normalized: Matrix,
}

impl Adjacency {
    pub fn from_raw(raw: Matrix) -> Result<Self> {
        if raw.rows() != raw.cols() {
            return Err(Error::shape(
                "Adjacency",
                raw.shape(),
                (raw.cols(), raw.rows()),
            ));
        }
        raw.ensure_finite("Adjacency")?;
        if let Some(w) = raw.data().iter().find(|w| **w < 0.0) {
            return Err(Error::Domain(format!("negative edge weight {w}")));
        }
        let normalized = normalize_adjacency(&raw);
        Ok(Self { raw, normalized })
    }

    /// Builds `W` from `(src, dst, weight)` triples. Duplicate edges are
    /// summed; with `symmetrize` the result is `max(W, Wᵀ)`.
    pub fn from_edges<S: AsRef<str>>(
        node_ids: &[String],
        edges: &[(S, S, f64)],
        symmetrize: bool,
    ) -> Result<Self> {
        let n = node_ids.len();
        let lookup = |id: &str| {
            node_ids
                .iter()
                .position(|n| n == id)
                .ok_or_else(|| Error::UnknownNode(id.to_string()))
        };
        let mut raw = Matrix::zeros(n, n);
        for (src, dst, w) in edges {
            if !(*w >= 0.0) {
                return Err(Error::Domain(format!("negative edge weight {w}")));
            }
            let (i, j) = (lookup(src.as_ref())?, lookup(dst.as_ref())?);
            raw[(i, j)] += w;
        }
        if symmetrize {
            for i in 0..n {
                for j in i + 1..n {
                    let m = raw[(i, j)].max(raw[(j, i)]);
                    raw[(i, j)] = m;
                    raw[(j, i)] = m;
                }
            }
        }
        Self::from_raw(raw)
    }

    pub fn raw(&self) -> &Matrix {
        &self.raw
    }

    pub fn normalized(&self) -> &Matrix {
        &self.normalized
    }

    pub fn n_nodes(&self) -> usize {
        self.raw.rows()
    }
}

/// Sliding input windows and horizon targets over one contiguous segment.
///
/// Window `w` reads steps `start_w .. start_w + t_in` and its target block
/// is the next `horizon` steps.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    values: Matrix,
    t_in: usize,
    horizon: usize,
    starts: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn t_in(&self) -> usize {
        self.t_in
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_nodes(&self) -> usize {
        self.values.rows()
    }

    pub fn window_start_indices(&self) -> &[usize] {
        &self.starts
    }

    pub fn input(&self, w: usize) -> Matrix {
        let s = self.starts[w];
        self.values.slice_cols(s, s + self.t_in)
    }

    pub fn target(&self, w: usize) -> Matrix {
        let s = self.starts[w] + self.t_in;
        self.values.slice_cols(s, s + self.horizon)
    }

    /// Inputs of the listed windows stacked into `(len * N) x t_in`.
    pub fn stacked_inputs(&self, windows: &[usize]) -> Matrix {
        self.stack(windows, 0, self.t_in)
    }

    /// Targets of the listed windows stacked into `(len * N) x horizon`.
    pub fn stacked_targets(&self, windows: &[usize]) -> Matrix {
        self.stack(windows, self.t_in, self.horizon)
    }

    fn stack(&self, windows: &[usize], offset: usize, width: usize) -> Matrix {
        let n = self.values.rows();
        let mut data = Vec::with_capacity(windows.len() * n * width);
        for &w in windows {
            let s = self.starts[w] + offset;
            for node in 0..n {
                data.extend_from_slice(&self.values.row(node)[s..s + width]);
            }
        }
        Matrix::new(windows.len() * n, width, data).expect("stack shape")
    }
}

pub fn make_windows(
    series: &TimeSeries,
    t_in: usize,
    horizon: usize,
    stride: usize,
) -> Result<WindowBatch> {
    if t_in == 0 || horizon == 0 || stride == 0 {
        return Err(Error::Config(
            "t_in, horizon and stride must be at least 1".to_string(),
        ));
    }
    let t = series.n_steps();
    if t_in + horizon > t {
        return Err(Error::InsufficientData {
            needed: t_in + horizon,
            available: t,
        });
    }
    let starts = (0..=t - t_in - horizon).step_by(stride).collect();
    Ok(WindowBatch {
        values: series.values().clone(),
        t_in,
        horizon,
        starts,
    })
}

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let spec = Self { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for f in [self.train, self.val, self.test] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("split fraction {f} outside (0, 1)")));
            }
        }
        if libm::fabs(self.train + self.val + self.test - 1.0) > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".to_string()));
        }
        Ok(())
    }

    /// Segment end points `(floor(train·T), floor((train+val)·T))`.
    pub fn boundaries(&self, t: usize) -> (usize, usize) {
        // The epsilon keeps exact products such as 0.7 * 100 from rounding down.
        let cut = |f: f64| (libm::floor(f * t as f64 + 1e-9) as usize).min(t);
        (cut(self.train), cut(self.train + self.val))
    }
}

pub fn split_dataset(
    series: &TimeSeries,
    spec: &SplitSpec,
) -> Result<(TimeSeries, TimeSeries, TimeSeries)> {
    spec.validate()?;
    let t = series.n_steps();
    let (a, b) = spec.boundaries(t);
    Ok((
        series.slice_steps(0, a)?,
        series.slice_steps(a, b)?,
        series.slice_steps(b, t)?,
    ))
}

/// Global z-score scaling fitted on the training segment.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZScore {
    pub mean: f64,
    pub std: f64,
}

impl ZScore {
    pub const STD_FLOOR: f64 = 1e-8;

    /// Population mean and standard deviation over every node and step.
    pub fn fit(train: &TimeSeries) -> Self {
        let v = train.values();
        let mean = v.mean();
        let var = v
            .data()
            .iter()
            .map(|x| (x - mean) * (x - mean))
            .sum::<f64>()
            / v.len() as f64;
        Self {
            mean,
            std: libm::sqrt(var).max(Self::STD_FLOOR),
        }
    }

    pub fn transform(&self, m: &Matrix) -> Matrix {
        m.map(|x| (x - self.mean) / self.std)
    }

    pub fn inverse(&self, m: &Matrix) -> Matrix {
        m.map(|x| x * self.std + self.mean)
    }

    pub fn transform_series(&self, s: &TimeSeries) -> TimeSeries {
        s.map_values(|x| (x - self.mean) / self.std)
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub series: TimeSeries,
    pub adjacency: Adjacency,
    pub labels: Vec<usize>,
}

pub const SYNTH_LEVEL: f64 = 50.0;
pub const SYNTH_AMPLITUDE: f64 = 10.0;
/// Steps per synthetic daily cycle.
pub const SYNTH_PERIOD: f64 = 48.0;
const BUMP_HEIGHT: f64 = 0.8;
const BUMP_WIDTH: f64 = 2.0;
const INTRA_WEIGHT: f64 = 1.0;
const CROSS_WEIGHT: f64 = 0.05;

/// Planted-cluster traffic-like data.
///
/// Node `i` belongs to cluster `i mod k_true`. Every node follows a daily
/// cycle of [`SYNTH_PERIOD`] steps, shifted by `c / k_true` of a cycle for
/// cluster `c`, plus a rush-hour bump whose position within the cycle is
/// specific to the cluster. Each node scales its pattern by an amplitude
/// in `[0.8, 1.2]` of [`SYNTH_AMPLITUDE`] and adds Gaussian noise with
/// standard deviation `0.1` of its own amplitude. Nodes in the same
/// cluster are linked with weight 1, all other pairs with weight 0.05.
pub fn generate_synthetic(
    n_nodes: usize,
    k_true: usize,
    t_steps: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if k_true == 0 || n_nodes < k_true || t_steps == 0 {
        return Err(Error::Config(format!(
            "synthetic data needs n_nodes >= k_true >= 1 and t_steps >= 1 (got {n_nodes}, {k_true}, {t_steps})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n_nodes).map(|i| i % k_true).collect();
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Matrix::zeros(n_nodes, t_steps);
    for (node, &c) in labels.iter().enumerate() {
        let shift = SYNTH_PERIOD * c as f64 / k_true as f64;
        let peak = SYNTH_PERIOD * (c as f64 + 0.5) / k_true as f64;
        let amp = SYNTH_AMPLITUDE * rng.random_range(0.8..=1.2);
        for t in 0..t_steps {
            let pos = (t as f64 + shift) % SYNTH_PERIOD;
            let cycle = libm::sin(2.0 * PI * pos / SYNTH_PERIOD);
            let d = libm::fabs(pos - peak);
            let d = d.min(SYNTH_PERIOD - d);
            let bump = BUMP_HEIGHT * libm::exp(-d * d / (2.0 * BUMP_WIDTH * BUMP_WIDTH));
            let noise = 0.1 * unit.sample(&mut rng);
            values[(node, t)] = SYNTH_LEVEL + amp * (cycle + bump + noise);
        }
    }
    let raw = Matrix::from_fn(n_nodes, n_nodes, |i, j| {
        if i == j {
            0.0
        } else if labels[i] == labels[j] {
            INTRA_WEIGHT
        } else {
            CROSS_WEIGHT
        }
    });
    let ids = (0..n_nodes).map(|i| format!("n{i:03}")).collect();
    Ok(SyntheticDataset {
        series: TimeSeries::new(ids, values, 5.0)?,
        adjacency: Adjacency::from_raw(raw)?,
        labels,
    })
}

//! Twin-experiment data: simulated truth, uniform measurement noise and the
//! choice of observed components.

use std::path::Path as FsPath;

use rand::Rng;

use crate::csvio::{read_table, CsvWriter};
use crate::dynamics::{ModelSpec, ATTRACTOR_BOUND};
use crate::error::{contract, Error, Result};
use crate::rng::{stream, Stage};

/// Steps integrated and discarded before the recorded window starts.
pub const TRANSIENT_STEPS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Half-width of the uniform noise as a fraction of the dynamic range.
    pub fraction: f64,
    pub dynamic_range: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { fraction: 0.034, dynamic_range: 20.0, seed: 0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction >= 0.0 && self.fraction.is_finite()) {
            return Err(contract(format!("noise fraction must be >= 0, got {}", self.fraction)));
        }
        if !(self.dynamic_range > 0.0 && self.dynamic_range.is_finite()) {
            return Err(contract(format!("dynamic range must be > 0, got {}", self.dynamic_range)));
        }
        Ok(())
    }

    /// Half-width `a` of the uniform noise.
    pub fn amplitude(&self) -> f64 {
        self.fraction * self.dynamic_range
    }

    /// Variance `a^2 / 3` of the uniform noise.
    pub fn variance(&self) -> f64 {
        let a = self.amplitude();
        a * a / 3.0
    }
}

/// Noisy measurements of a subset of components over the window `0..=N`,
/// plus the measured continuation after the window used to score predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Observations {
    pub measured_indices: Vec<usize>,
    /// Row-major `(N + 1) x L`.
    values: Vec<f64>,
    /// Row-major `T_pred x L`, times `N + 1 ..= N + T_pred`.
    continuation: Vec<f64>,
}

impl Observations {
    pub fn new(measured_indices: Vec<usize>, values: Vec<f64>, continuation: Vec<f64>) -> Result<Self> {
        let l = measured_indices.len();
        if l == 0 {
            return Err(contract("no measured components"));
        }
        let mut sorted = measured_indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != l {
            return Err(contract("measured indices must be distinct"));
        }
        if values.len() % l != 0 || values.is_empty() || continuation.len() % l != 0 {
            return Err(contract("observation matrix shape does not match the measured count"));
        }
        if values.iter().chain(&continuation).any(|v| !v.is_finite()) {
            return Err(contract("observations must be finite"));
        }
        Ok(Observations { measured_indices, values, continuation })
    }

    pub fn n_measured(&self) -> usize {
        self.measured_indices.len()
    }

    /// Number of window time points, `N + 1`.
    pub fn n_times(&self) -> usize {
        self.values.len() / self.n_measured()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let l = self.n_measured();
        &self.values[t * l..(t + 1) * l]
    }

    pub fn continuation_len(&self) -> usize {
        self.continuation.len() / self.n_measured()
    }

    /// Measured values at time `N + k`, `k >= 1`.
    pub fn continuation_row(&self, k: usize) -> &[f64] {
        let l = self.n_measured();
        &self.continuation[(k - 1) * l..k * l]
    }

    pub fn check_against(&self, dim: usize) -> Result<()> {
        if self.n_measured() > dim {
            return Err(contract(format!("{} measured components exceed D = {dim}", self.n_measured())));
        }
        if let Some(i) = self.measured_indices.iter().find(|&&i| i >= dim) {
            return Err(contract(format!("measured index {i} out of range for D = {dim}")));
        }
        Ok(())
    }

    pub fn to_csv(&self) -> (CsvWriter, CsvWriter) {
        let header: Vec<String> = std::iter::once("t".to_string())
            .chain(self.measured_indices.iter().map(|i| format!("y_{i}")))
            .collect();
        let mut win = CsvWriter::new(&header);
        for t in 0..self.n_times() {
            win.row(&[t as i64], self.row(t));
        }
        let mut cont = CsvWriter::new(&header);
        let n = self.n_times() - 1;
        for k in 1..=self.continuation_len() {
            cont.row(&[(n + k) as i64], self.continuation_row(k));
        }
        (win, cont)
    }

    pub fn read_csv(window: &FsPath, continuation: &FsPath) -> Result<Self> {
        let win = read_table(window)?;
        let cont = read_table(continuation)?;
        if win.header != cont.header {
            return Err(Error::Parse {
                path: continuation.to_path_buf(),
                msg: "header differs from the observation window".into(),
            });
        }
        let indices = win.header[1..]
            .iter()
            .map(|h| h.strip_prefix("y_").and_then(|s| s.parse::<usize>().ok()))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Parse { path: window.to_path_buf(), msg: "bad column names".into() })?;
        let flat = |rows: &[Vec<f64>]| rows.iter().flat_map(|r| r[1..].iter().copied()).collect::<Vec<_>>();
        Observations::new(indices, flat(&win.rows), flat(&cont.rows))
    }
}

/// Evenly spread measured components: `floor(i * D / L)` for `i in 0..L`.
pub fn measured_indices(dim: usize, n_measured: usize) -> Result<Vec<usize>> {
    if n_measured == 0 || n_measured > dim {
        return Err(contract(format!("L must lie in 1..={dim}, got {n_measured}")));
    }
    Ok((0..n_measured).map(|i| i * dim / n_measured).collect())
}

/// Simulates `n_window + n_pred + 1` consecutive states after discarding a
/// transient from a uniform random start in `[-10, 10]^D`.
pub fn generate_truth(
    spec: &ModelSpec,
    params: &[f64],
    n_window: usize,
    n_pred: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    if n_window < 1 {
        return Err(contract("the window needs at least one step"));
    }
    let mut rng = stream(seed, Stage::Truth, 0);
    let x0: Vec<f64> = (0..spec.dim).map(|_| rng.random_range(-10.0..=10.0)).collect();
    let warm = spec.integrate_trajectory(&x0, params, TRANSIENT_STEPS)?;
    let start = warm.last().expect("trajectory is never empty");
    let traj = spec.integrate_trajectory(start, params, n_window + n_pred)?;
    let peak = traj.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > ATTRACTOR_BOUND {
        log::warn!("truth trajectory reaches |x| = {peak:.2}, beyond the usual attractor range");
    }
    Ok(traj)
}

/// Adds uniform noise in `[-a, a]` to the measured components. Rows
/// `0..=n_window` form the window; the remaining rows become the continuation.
pub fn apply_noise(
    truth: &[Vec<f64>],
    indices: &[usize],
    noise: &NoiseSpec,
    n_window: usize,
) -> Result<Observations> {
    noise.validate()?;
    if truth.len() < n_window + 1 {
        return Err(contract(format!("truth has {} rows, window needs {}", truth.len(), n_window + 1)));
    }
    let dim = truth[0].len();
    if indices.iter().any(|&i| i >= dim) {
        return Err(contract("measured index out of range"));
    }
    let a = noise.amplitude();
    let mut rng = stream(noise.seed, Stage::Noise, 0);
    let mut draw = |x: f64| if a > 0.0 { x + rng.random_range(-a..=a) } else { x };
    let mut values = Vec::with_capacity((n_window + 1) * indices.len());
    let mut continuation = Vec::with_capacity((truth.len() - n_window - 1) * indices.len());
    for (t, row) in truth.iter().enumerate() {
        let dst = if t <= n_window { &mut values } else { &mut continuation };
        for &i in indices {
            dst.push(draw(row[i]));
        }
    }
    Observations::new(indices.to_vec(), values, continuation)
}

pub fn truth_csv(truth: &[Vec<f64>]) -> CsvWriter {
    let dim = truth.first().map_or(0, |r| r.len());
    let header: Vec<String> =
        std::iter::once("t".to_string()).chain((0..dim).map(|i| format!("x_{i}"))).collect();
    let mut w = CsvWriter::new(&header);
    for (t, row) in truth.iter().enumerate() {
        w.row(&[t as i64], row);
    }
    w
}

pub fn read_truth_csv(path: &FsPath) -> Result<Vec<Vec<f64>>> {
    let table = read_table(path)?;
    Ok(table.rows.into_iter().map(|r| r[1..].to_vec()).collect())
}

//! The standard-model action
//!
//! ```text
//! A(X, p) = sum_t sum_{a measured} r_m/2 (x_a(t) - y_a(t))^2
//!         + sum_{t<N} sum_a r_f/2 (x_a(t+1) - f_a(x(t), p))^2
//! ```
//!
//! and its exact gradient with respect to every state and parameter.

use std::sync::Arc;

use crate::csvio::{read_table, CsvWriter};
use crate::dynamics::{ModelSpec, Rk4Workspace};
use crate::error::{contract, Result};
use crate::twin::Observations;

/// States `x(t_0) .. x(t_N)` followed by the parameters, stored contiguously.
///
/// The flat layout (`values()`) is the coordinate system shared by the
/// optimizer, the gradient and the sampler.
#[derive(Debug, Clone, PartialEq)]
pub struct Path {
    n_times: usize,
    dim: usize,
    n_params: usize,
    values: Vec<f64>,
}

impl Path {
    pub fn zeros(n_times: usize, dim: usize, n_params: usize) -> Self {
        Path { n_times, dim, n_params, values: vec![0.0; n_times * dim + n_params] }
    }

    pub fn from_rows(rows: &[Vec<f64>], params: &[f64]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != dim) {
            return Err(contract("ragged state rows"));
        }
        let mut values: Vec<f64> = rows.iter().flatten().copied().collect();
        values.extend_from_slice(params);
        Ok(Path { n_times: rows.len(), dim, n_params: params.len(), values })
    }

    pub fn from_flat(n_times: usize, dim: usize, n_params: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_times * dim + n_params {
            return Err(contract(format!(
                "flat path has {} values, shape needs {}",
                values.len(),
                n_times * dim + n_params
            )));
        }
        Ok(Path { n_times, dim, n_params, values })
    }

    /// A path with no states, used when only parameters are of interest
    /// (parameter-only chain snapshots, low-dimensional toy targets).
    pub fn params_only(params: Vec<f64>) -> Self {
        Path { n_times: 0, dim: 0, n_params: params.len(), values: params }
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_shape(&self, other: &Path) -> bool {
        self.n_times == other.n_times && self.dim == other.dim && self.n_params == other.n_params
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn states(&self) -> &[f64] {
        &self.values[..self.n_times * self.dim]
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn state_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.values[t * self.dim..(t + 1) * self.dim]
    }

    pub fn params(&self) -> &[f64] {
        &self.values[self.n_times * self.dim..]
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        let k = self.n_times * self.dim;
        &mut self.values[k..]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.n_times).map(|t| self.state(t).to_vec()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Trajectory CSV (`t,x_0,..`); parameters go to a separate sidecar.
    pub fn states_csv(&self) -> CsvWriter {
        crate::twin::truth_csv(&self.rows())
    }

    pub fn read_csv(states: &std::path::Path, params: Vec<f64>) -> Result<Self> {
        let table = read_table(states)?;
        let rows: Vec<Vec<f64>> = table.rows.into_iter().map(|r| r[1..].to_vec()).collect();
        Path::from_rows(&rows, &params)
    }
}

#[derive(Debug, Clone)]
pub struct ActionConfig {
    pub model: ModelSpec,
    /// Measurement precision (inverse variance), uniform over components and times.
    pub r_m: f64,
    /// Model precision, uniform over components.
    pub r_f: f64,
    pub observations: Arc<Observations>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionValue {
    pub total: f64,
    pub measurement_term: f64,
    pub model_term: f64,
}

impl ActionConfig {
    pub fn new(model: ModelSpec, r_m: f64, r_f: f64, observations: Arc<Observations>) -> Result<Self> {
        model.validate()?;
        if !(r_m > 0.0 && r_m.is_finite()) {
            return Err(contract(format!("r_m must be > 0, got {r_m}")));
        }
        if !(r_f >= 0.0 && r_f.is_finite()) {
            return Err(contract(format!("r_f must be >= 0, got {r_f}")));
        }
        observations.check_against(model.dim)?;
        if observations.n_times() < 2 {
            return Err(contract("the window needs at least two time points"));
        }
        Ok(ActionConfig { model, r_m, r_f, observations })
    }

    pub fn with_r_f(&self, r_f: f64) -> Result<Self> {
        ActionConfig::new(self.model, self.r_m, r_f, self.observations.clone())
    }

    /// Window length `N + 1` and the total coordinate count.
    pub fn n_times(&self) -> usize {
        self.observations.n_times()
    }

    pub fn n_coords(&self) -> usize {
        self.n_times() * self.model.dim + self.model.n_params
    }

    pub fn check_path(&self, path: &Path) -> Result<()> {
        if path.n_times != self.n_times() || path.dim != self.model.dim || path.n_params != self.model.n_params {
            return Err(contract(format!(
                "path shape ({}, {}, {}) does not match the problem ({}, {}, {})",
                path.n_times,
                path.dim,
                path.n_params,
                self.n_times(),
                self.model.dim,
                self.model.n_params
            )));
        }
        Ok(())
    }

    pub fn measurement_term(&self, path: &Path) -> f64 {
        let obs = &self.observations;
        let mut sum = 0.0;
        for t in 0..obs.n_times() {
            let x = path.state(t);
            for (y, &i) in obs.row(t).iter().zip(&obs.measured_indices) {
                let r = x[i] - y;
                sum += r * r;
            }
        }
        0.5 * self.r_m * sum
    }

    pub fn model_term(&self, path: &Path) -> f64 {
        if self.r_f == 0.0 {
            return 0.0;
        }
        let d = self.model.dim;
        let g = path.params()[0];
        let mut ws = Rk4Workspace::new(d);
        let mut fx = vec![0.0; d];
        let mut sum = 0.0;
        for t in 0..path.n_times - 1 {
            ws.step(path.state(t), g, self.model.dt, &mut fx);
            sum += path.state(t + 1).iter().zip(&fx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        0.5 * self.r_f * sum
    }

    pub fn action(&self, path: &Path) -> Result<ActionValue> {
        self.check_path(path)?;
        Ok(self.eval(path))
    }

    /// Unchecked evaluation for hot loops; the caller guarantees the shape.
    pub(crate) fn eval(&self, path: &Path) -> ActionValue {
        let measurement_term = self.measurement_term(path);
        let model_term = self.model_term(path);
        ActionValue { total: measurement_term + model_term, measurement_term, model_term }
    }

    pub fn action_gradient(&self, path: &Path) -> Result<Vec<f64>> {
        self.check_path(path)?;
        let mut grad = vec![0.0; path.len()];
        self.eval_with_gradient(path, &mut grad);
        Ok(grad)
    }

    /// Action and gradient in one forward/reverse sweep; `grad` is overwritten.
    pub(crate) fn eval_with_gradient(&self, path: &Path, grad: &mut [f64]) -> ActionValue {
        let d = self.model.dim;
        let obs = &self.observations;
        grad.iter_mut().for_each(|g| *g = 0.0);

        let mut meas = 0.0;
        for t in 0..obs.n_times() {
            let x = path.state(t);
            for (y, &i) in obs.row(t).iter().zip(&obs.measured_indices) {
                let r = x[i] - y;
                meas += r * r;
                grad[t * d + i] += self.r_m * r;
            }
        }
        let meas = 0.5 * self.r_m * meas;

        let mut model = 0.0;
        if self.r_f != 0.0 {
            let g = path.params()[0];
            let mut ws = Rk4Workspace::new(d);
            let mut fx = vec![0.0; d];
            let mut resid = vec![0.0; d];
            let mut gp = 0.0;
            let n_states = path.n_times * d;
            for t in 0..path.n_times - 1 {
                ws.step(path.state(t), g, self.model.dt, &mut fx);
                let next = path.state(t + 1);
                for a in 0..d {
                    let r = next[a] - fx[a];
                    model += r * r;
                    resid[a] = self.r_f * r;
                    grad[(t + 1) * d + a] += resid[a];
                }
                // d/dx(t) and d/dp of -r_f r . f(x(t), p)
                for v in resid.iter_mut() {
                    *v = -*v;
                }
                let (head, _) = grad.split_at_mut(n_states);
                gp += ws.vjp(self.model.dt, &resid, &mut head[t * d..(t + 1) * d]);
            }
            grad[n_states] += gp;
            model *= 0.5 * self.r_f;
        }
        ActionValue { total: meas + model, measurement_term: meas, model_term: model }
    }

    /// Unnormalized log posterior density, `-A`.
    pub fn log_prob(&self, path: &Path) -> Result<f64> {
        Ok(-self.action(path)?.total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stage};
    use crate::twin::{apply_noise, generate_truth, measured_indices, NoiseSpec};
    use rand::Rng;

    fn problem(l: usize, n_window: usize, r_f: f64) -> (ActionConfig, Vec<Vec<f64>>) {
        let model = ModelSpec::lorenz96(11, 0.025).unwrap();
        let truth = generate_truth(&model, &[10.0], n_window, 0, 17).unwrap();
        let idx = measured_indices(11, l).unwrap();
        let obs = apply_noise(&truth, &idx, &NoiseSpec { seed: 5, ..Default::default() }, n_window).unwrap();
        (ActionConfig::new(model, 6.49, r_f, Arc::new(obs)).unwrap(), truth)
    }

    fn random_path(cfg: &ActionConfig, seed: u64) -> Path {
        let mut rng = stream(seed, Stage::Test, 0);
        let mut p = Path::zeros(cfg.n_times(), 11, 1);
        for v in p.values_mut() {
            *v = rng.random_range(-10.0..10.0);
        }
        p.params_mut()[0] = rng.random_range(5.0..15.0);
        p
    }

    #[test]
    fn zero_action_when_matching_data_without_model() {
        let (cfg, _) = problem(4, 20, 0.0);
        let mut path = random_path(&cfg, 1);
        for t in 0..cfg.n_times() {
            let row = cfg.observations.row(t).to_vec();
            for (k, &i) in cfg.observations.measured_indices.iter().enumerate() {
                path.state_mut(t)[i] = row[k];
            }
        }
        let a = cfg.action(&path).unwrap();
        assert_eq!(a.total, 0.0);
        assert_eq!(cfg.log_prob(&path).unwrap(), 0.0);
        assert!(cfg.action_gradient(&path).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_residual_hand_value() {
        let model = ModelSpec::lorenz96(4, 0.025).unwrap();
        let obs = Observations::new(vec![2], vec![1.0, 0.0], vec![]).unwrap();
        let cfg = ActionConfig::new(model, 2.0, 0.0, Arc::new(obs)).unwrap();
        let mut path = Path::zeros(2, 4, 1);
        path.state_mut(0)[2] = 2.0;
        let a = cfg.action(&path).unwrap();
        assert_eq!(a.total, 1.0);
        assert_eq!(cfg.log_prob(&path).unwrap(), -1.0);
    }

    #[test]
    fn exact_model_trajectory_has_zero_model_term() {
        let (cfg, truth) = problem(2, 40, 1e4);
        let path = Path::from_rows(&truth, &[10.0]).unwrap();
        assert_eq!(cfg.action(&path).unwrap().model_term, 0.0);
    }

    #[test]
    fn terms_are_additive_and_monotone_in_model_precision() {
        let (cfg, _) = problem(7, 30, 1.0);
        let path = random_path(&cfg, 4);
        let a = cfg.action(&path).unwrap();
        assert_eq!(a.total, cfg.measurement_term(&path) + cfg.model_term(&path));
        let mut last = -1.0;
        for r_f in [0.0, 0.5, 1.0, 10.0, 1e3] {
            let v = cfg.with_r_f(r_f).unwrap().action(&path).unwrap();
            assert!(v.measurement_term >= 0.0 && v.model_term >= 0.0);
            assert!(v.total > last);
            last = v.total;
        }
    }

    #[test]
    fn unmeasured_gradient_vanishes_without_model() {
        let (cfg, _) = problem(4, 25, 0.0);
        let path = random_path(&cfg, 8);
        let grad = cfg.action_gradient(&path).unwrap();
        let measured = &cfg.observations.measured_indices;
        for t in 0..cfg.n_times() {
            for a in 0..11 {
                if !measured.contains(&a) {
                    assert_eq!(grad[t * 11 + a], 0.0);
                }
            }
        }
        assert_eq!(*grad.last().unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (base, _) = problem(7, 165, 1.0);
        for (k, r_f) in [0.0, 1.0, 100.0].into_iter().enumerate() {
            let cfg = base.with_r_f(r_f).unwrap();
            let path = random_path(&cfg, 30 + k as u64);
            let grad = cfg.action_gradient(&path).unwrap();
            let h = 1e-6;
            let mut p = path.clone();
            let mut err: f64 = 0.0;
            let mut scale: f64 = 0.0;
            for j in 0..path.len() {
                let orig = p.values()[j];
                p.values_mut()[j] = orig + h;
                let up = cfg.action(&p).unwrap().total;
                p.values_mut()[j] = orig - h;
                let dn = cfg.action(&p).unwrap().total;
                p.values_mut()[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                err = err.max((fd - grad[j]).abs());
                scale = scale.max(fd.abs());
            }
            assert!(err / scale < 1e-5, "r_f={r_f}: rel err {}", err / scale);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (cfg, _) = problem(2, 10, 1.0);
        let path = Path::zeros(5, 11, 1);
        assert!(cfg.action(&path).is_err());
        assert!(cfg.action_gradient(&path).is_err());
        assert!(ActionConfig::new(cfg.model, 0.0, 1.0, cfg.observations.clone()).is_err());
        assert!(ActionConfig::new(cfg.model, 1.0, -1.0, cfg.observations.clone()).is_err());
    }
}

//! Variational annealing: minimize the action while the model precision is
//! raised geometrically, each initialization warm-starting from its own
//! previous minimum. Prediction past the window then ranks the minima and
//! picks the endpoints that shape the sampler's bias.

use rand::Rng;
use rayon::prelude::*;

use crate::action::{ActionConfig, ActionValue, Path};
use crate::csvio::{fmt_real, CsvWriter};
use crate::dynamics::ModelSpec;
use crate::error::{contract, Error, Result};
use crate::optimizer::{minimize, OptimResult, OptimizerSettings};
use crate::rng::{stream, Stage};
use crate::twin::Observations;

/// Relative action gap separating two minima when counting levels.
pub const LEVEL_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealSchedule {
    pub r_f0: f64,
    pub alpha: f64,
    pub beta_max: u32,
}

impl AnnealSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_f0 > 0.0 && self.r_f0.is_finite()) {
            return Err(contract(format!("r_f0 must be > 0, got {}", self.r_f0)));
        }
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(contract(format!("alpha must be > 1, got {}", self.alpha)));
        }
        Ok(())
    }

    pub fn betas(&self) -> impl Iterator<Item = u32> {
        0..=self.beta_max
    }

    pub fn n_levels(&self) -> usize {
        self.beta_max as usize + 1
    }

    /// `R_f(0) = 0`, then `r_f0 * alpha^beta`.
    pub fn r_f(&self, beta: u32) -> f64 {
        if beta == 0 {
            0.0
        } else {
            self.r_f0 * self.alpha.powi(beta as i32)
        }
    }
}

/// Where the β = 0 paths start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitRanges {
    pub state: (f64, f64),
    pub param: (f64, f64),
}

impl Default for InitRanges {
    fn default() -> Self {
        InitRanges { state: (-10.0, 10.0), param: (5.0, 15.0) }
    }
}

#[derive(Debug, Clone)]
pub struct AnnealResult {
    pub schedule: AnnealSchedule,
    pub n_inits: usize,
    /// `cells[beta][init]`.
    pub cells: Vec<Vec<OptimResult>>,
}

impl AnnealResult {
    pub fn cell(&self, beta: u32, init_id: usize) -> &OptimResult {
        &self.cells[beta as usize][init_id]
    }
}

/// Measured components set to the data; everything else uniform in range.
pub fn initial_path(obs: &Observations, model: &ModelSpec, ranges: &InitRanges, rng: &mut impl Rng) -> Path {
    let mut path = Path::zeros(obs.n_times(), model.dim, model.n_params);
    for t in 0..obs.n_times() {
        let row = path.state_mut(t);
        for v in row.iter_mut() {
            *v = rng.random_range(ranges.state.0..=ranges.state.1);
        }
        for (k, &i) in obs.measured_indices.iter().enumerate() {
            row[i] = obs.row(t)[k];
        }
    }
    for p in path.params_mut() {
        *p = rng.random_range(ranges.param.0..=ranges.param.1);
    }
    path
}

/// Runs the full annealing grid. `base` supplies the model, `r_m` and the
/// observations; its `r_f` is ignored.
pub fn anneal(
    base: &ActionConfig,
    schedule: &AnnealSchedule,
    n_inits: usize,
    settings: &OptimizerSettings,
    ranges: &InitRanges,
    seed: u64,
) -> Result<AnnealResult> {
    schedule.validate()?;
    settings.validate()?;
    if n_inits < 2 {
        return Err(contract(format!("annealing needs at least 2 initializations, got {n_inits}")));
    }
    let mut current: Vec<Path> = (0..n_inits)
        .map(|i| {
            let mut rng = stream(seed, Stage::AnnealInit, i as u64);
            initial_path(&base.observations, &base.model, ranges, &mut rng)
        })
        .collect();
    let mut cells = Vec::with_capacity(schedule.n_levels());
    for beta in schedule.betas() {
        let cfg = base.with_r_f(schedule.r_f(beta))?;
        let level: Vec<OptimResult> = current
            .par_iter()
            .map(|start| minimize(start, &cfg, settings))
            .collect::<Result<_>>()?;
        let n_conv = level.iter().filter(|c| c.converged).count();
        log::info!(
            "beta {beta:>3}  R_f/R_m = {:.3e}  converged {n_conv}/{n_inits}  best action {:.6e}",
            cfg.r_f / cfg.r_m,
            level.iter().map(|c| c.action.total).fold(f64::INFINITY, f64::min)
        );
        for (slot, res) in current.iter_mut().zip(&level) {
            slot.clone_from(&res.path);
        }
        cells.push(level);
    }
    Ok(AnnealResult { schedule: *schedule, n_inits, cells })
}

/// Per β, the `(init_id, action)` pairs sorted by ascending total action.
pub fn action_levels(result: &AnnealResult) -> Vec<Vec<(usize, ActionValue)>> {
    result
        .cells
        .iter()
        .map(|level| {
            let mut v: Vec<(usize, ActionValue)> =
                level.iter().enumerate().map(|(i, c)| (i, c.action)).collect();
            v.sort_by(|a, b| a.1.total.total_cmp(&b.1.total).then(a.0.cmp(&b.0)));
            v
        })
        .collect()
}

/// Number of distinct levels in a list of action values: sorted values are
/// chained into one cluster while consecutive relative gaps stay within
/// `rel_tol`.
pub fn count_levels(actions: &[f64], rel_tol: f64) -> usize {
    let mut v: Vec<f64> = actions.iter().copied().filter(|a| a.is_finite()).collect();
    if v.is_empty() {
        return 0;
    }
    v.sort_by(f64::total_cmp);
    1 + v
        .windows(2)
        .filter(|w| (w[1] - w[0]) > rel_tol * w[0].abs().max(w[1].abs()))
        .count()
}

pub fn action_levels_csv(result: &AnnealResult, r_m: f64) -> CsvWriter {
    let mut w = CsvWriter::new(&[
        "beta",
        "log10_rf_over_rm",
        "init_id",
        "action_total",
        "action_meas",
        "action_model",
    ]);
    for (beta, level) in action_levels(result).iter().enumerate() {
        // log10(0) = -inf at β = 0.
        let ratio = (result.schedule.r_f(beta as u32) / r_m).log10();
        for (init, a) in level {
            w.raw_row(&[
                beta.to_string(),
                fmt_real(ratio),
                init.to_string(),
                fmt_real(a.total),
                fmt_real(a.measurement_term),
                fmt_real(a.model_term),
            ]);
        }
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionScore {
    pub init_id: usize,
    pub beta: u32,
    pub mse: f64,
    pub t_pred: usize,
}

/// Per-measurement mean squared prediction error over `t_pred` steps past
/// the window, starting from the path's final state and parameters.
/// A prediction that blows up scores `+inf`.
pub fn predict_mse(model: &ModelSpec, path: &Path, obs: &Observations, t_pred: usize) -> Result<f64> {
    if t_pred == 0 {
        return Err(contract("t_pred must be >= 1"));
    }
    if obs.continuation_len() < t_pred {
        return Err(contract(format!(
            "continuation has {} steps, prediction needs {t_pred}",
            obs.continuation_len()
        )));
    }
    let last = path.state(path.n_times() - 1);
    let traj = match model.integrate_trajectory(last, path.params(), t_pred) {
        Ok(t) => t,
        Err(Error::NonFinite { .. }) => return Ok(f64::INFINITY),
        Err(e) => return Err(e),
    };
    let mut sum = 0.0;
    for k in 1..=t_pred {
        let y = obs.continuation_row(k);
        for (yv, &i) in y.iter().zip(&obs.measured_indices) {
            let r = yv - traj[k][i];
            sum += r * r;
        }
    }
    let mse = sum / (t_pred * obs.n_measured()) as f64;
    Ok(if mse.is_finite() { mse } else { f64::INFINITY })
}

pub fn score_all(result: &AnnealResult, model: &ModelSpec, obs: &Observations, t_pred: usize) -> Result<Vec<PredictionScore>> {
    let mut scores = Vec::with_capacity(result.cells.len() * result.n_inits);
    for (beta, level) in result.cells.iter().enumerate() {
        for (init_id, cell) in level.iter().enumerate() {
            let mse = predict_mse(model, &cell.path, obs, t_pred)?;
            scores.push(PredictionScore { init_id, beta: beta as u32, mse, t_pred });
        }
    }
    Ok(scores)
}

pub fn scores_csv(scores: &[PredictionScore]) -> CsvWriter {
    let mut w = CsvWriter::new(&["beta", "init_id", "mse"]);
    for s in scores {
        w.row(&[s.beta as i64, s.init_id as i64], &[s.mse]);
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellRef {
    pub beta: u32,
    pub init_id: usize,
    pub mse: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Endpoints {
    pub best: CellRef,
    pub worst: CellRef,
    /// Model precision of the best cell; the sampler's working `R_f`.
    pub r_f_star: f64,
}

/// Best = lowest prediction error, worst = highest finite prediction error;
/// ties go to the lower action, then the lower initialization id.
pub fn select_endpoints(result: &AnnealResult, scores: &[PredictionScore]) -> Result<Endpoints> {
    let action_of = |s: &PredictionScore| result.cell(s.beta, s.init_id).action.total;
    let tie = |a: &PredictionScore, b: &PredictionScore| {
        action_of(a)
            .total_cmp(&action_of(b))
            .then(a.init_id.cmp(&b.init_id))
            .then(a.beta.cmp(&b.beta))
    };
    let finite: Vec<&PredictionScore> = scores.iter().filter(|s| s.mse.is_finite()).collect();
    let best = finite
        .iter()
        .min_by(|a, b| a.mse.total_cmp(&b.mse).then_with(|| tie(a, b)))
        .ok_or(Error::NoFiniteScore)?;
    let worst = finite
        .iter()
        .min_by(|a, b| b.mse.total_cmp(&a.mse).then_with(|| tie(a, b)))
        .ok_or(Error::NoFiniteScore)?;
    let as_ref = |s: &PredictionScore| CellRef { beta: s.beta, init_id: s.init_id, mse: s.mse };
    Ok(Endpoints {
        best: as_ref(best),
        worst: as_ref(worst),
        r_f_star: result.schedule.r_f(best.beta),
    })
}

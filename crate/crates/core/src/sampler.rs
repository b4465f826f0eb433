//! VA-informed Metropolis sampling of the path/parameter posterior.
//!
//! A Gaussian bias built from the best and worst annealing endpoints shapes
//! the walk: walkers start in a box around the best path, proposals are
//! Gaussian steps scaled per coordinate by the bias widths, and the chain's
//! stationary law is the posterior times the bias. Recorded states are
//! reweighted by `1 / P_bias`, which recovers posterior expectations.
//!
//! Weights are carried in log form. Over thousands of coordinates the bias
//! normalization alone under- or overflows `f64`, so every estimator works
//! with weights rescaled by their maximum.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::action::{ActionConfig, Path};
use crate::dynamics::Rk4Workspace;
use crate::error::{contract, Error, Result};
use crate::rng::{stream, Stage};

/// Replacement width for coordinates where the endpoints coincide.
pub const SIGMA_FLOOR: f64 = 1e-2;
/// Multiplier from endpoint distance to bias width.
pub const WIDTH_FACTOR: f64 = 4.0;
pub const DEFAULT_BINS: usize = 50;
/// Burn-in steps between step-size adjustments.
const ADAPT_WINDOW: usize = 50;
const TARGET_ACCEPTANCE: (f64, f64) = (0.2, 0.5);

/// An unnormalized log density over paths.
///
/// `Cache` is per-walker state that lets [`LogDensity::coordinate_delta`]
/// price a one-coordinate change without a full evaluation.
pub trait LogDensity: Sync {
    type Cache: Send;

    fn log_density(&self, path: &Path) -> f64;

    fn check(&self, _path: &Path) -> Result<()> {
        Ok(())
    }

    fn cache(&self, path: &Path) -> Self::Cache;

    /// Change in log density when flat coordinate `k` of `path` is set to
    /// `value`.
    fn coordinate_delta(&self, path: &Path, _cache: &mut Self::Cache, k: usize, value: f64) -> f64 {
        let mut moved = path.clone();
        moved.values_mut()[k] = value;
        self.log_density(&moved) - self.log_density(path)
    }

    /// Called with `path` already updated after the change priced by the
    /// immediately preceding `coordinate_delta` was accepted.
    fn commit(&self, _path: &Path, _cache: &mut Self::Cache, _k: usize) {}
}

/// One-step map images `f(x(t), p)` for every `t < N`, kept in sync with the
/// walker's path.
#[derive(Debug, Clone)]
pub struct ActionCache {
    images: Vec<f64>,
    trial: Vec<f64>,
    scratch: Vec<f64>,
    ws: Rk4Workspace,
}

impl ActionConfig {
    fn fill_images(&self, path: &Path, cache: &mut ActionCache) {
        let d = self.model.dim;
        let g = path.params()[0];
        for t in 0..path.n_times() - 1 {
            cache.ws.step(path.state(t), g, self.model.dt, &mut cache.images[t * d..(t + 1) * d]);
        }
    }
}

impl LogDensity for ActionConfig {
    type Cache = ActionCache;

    fn log_density(&self, path: &Path) -> f64 {
        let a = self.eval(path).total;
        if a.is_nan() {
            f64::NEG_INFINITY
        } else {
            -a
        }
    }

    fn check(&self, path: &Path) -> Result<()> {
        self.check_path(path)
    }

    fn cache(&self, path: &Path) -> ActionCache {
        let d = self.model.dim;
        let mut cache = ActionCache {
            images: vec![0.0; (path.n_times() - 1) * d],
            trial: vec![0.0; d],
            scratch: vec![0.0; d],
            ws: Rk4Workspace::new(d),
        };
        self.fill_images(path, &mut cache);
        cache
    }

    fn coordinate_delta(&self, path: &Path, cache: &mut ActionCache, k: usize, value: f64) -> f64 {
        let d = self.model.dim;
        let n_states = path.n_times() * d;
        if k >= n_states {
            let mut moved = path.clone();
            moved.values_mut()[k] = value;
            return self.log_density(&moved) - self.log_density(path);
        }
        let (t, i) = (k / d, k % d);
        let old = path.values()[k];
        let sq = |a: f64, b: f64| (a - b) * (a - b);
        let mut delta = 0.0;
        let obs = &self.observations;
        if let Some(m) = obs.measured_indices.iter().position(|&j| j == i) {
            let y = obs.row(t)[m];
            delta += 0.5 * self.r_m * (sq(value, y) - sq(old, y));
        }
        if self.r_f != 0.0 {
            if t >= 1 {
                let f = cache.images[(t - 1) * d + i];
                delta += 0.5 * self.r_f * (sq(value, f) - sq(old, f));
            }
            if t + 1 < path.n_times() {
                cache.scratch.copy_from_slice(path.state(t));
                cache.scratch[i] = value;
                cache.ws.step(&cache.scratch, path.params()[0], self.model.dt, &mut cache.trial);
                let old_img = &cache.images[t * d..(t + 1) * d];
                let next = path.state(t + 1);
                let mut s = 0.0;
                for a in 0..d {
                    s += sq(next[a], cache.trial[a]) - sq(next[a], old_img[a]);
                }
                delta += 0.5 * self.r_f * s;
            }
        }
        if delta.is_nan() {
            f64::NEG_INFINITY
        } else {
            -delta
        }
    }

    fn commit(&self, path: &Path, cache: &mut ActionCache, k: usize) {
        let d = self.model.dim;
        let n_states = path.n_times() * d;
        if k >= n_states {
            self.fill_images(path, cache);
        } else if k / d + 1 < path.n_times() {
            let t = k / d;
            cache.images[t * d..(t + 1) * d].copy_from_slice(&cache.trial);
        }
    }
}

/// Uncorrelated Gaussian centered on a path. State widths are per component
/// and shared across time.
#[derive(Debug, Clone)]
pub struct BiasSpec {
    center: Path,
    sigma_state: Vec<f64>,
    sigma_param: Vec<f64>,
    coord_sigma: Vec<f64>,
    log_norm: f64,
}

impl BiasSpec {
    pub fn new(center: Path, sigma_state: Vec<f64>, sigma_param: Vec<f64>) -> Result<Self> {
        if sigma_state.len() != center.dim() || sigma_param.len() != center.n_params() {
            return Err(contract("bias widths do not match the center's shape"));
        }
        if sigma_state.iter().chain(&sigma_param).any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(contract("bias widths must be positive and finite"));
        }
        let mut coord_sigma = Vec::with_capacity(center.len());
        for _ in 0..center.n_times() {
            coord_sigma.extend_from_slice(&sigma_state);
        }
        coord_sigma.extend_from_slice(&sigma_param);
        let log_norm = coord_sigma
            .iter()
            .map(|s| -0.5 * (2.0 * std::f64::consts::PI * s * s).ln())
            .sum();
        Ok(BiasSpec { center, sigma_state, sigma_param, coord_sigma, log_norm })
    }

    pub fn center(&self) -> &Path {
        &self.center
    }

    pub fn sigma_state(&self) -> &[f64] {
        &self.sigma_state
    }

    pub fn sigma_param(&self) -> &[f64] {
        &self.sigma_param
    }

    /// Width of every flat coordinate, in [`Path::values`] order.
    pub fn coordinate_sigmas(&self) -> &[f64] {
        &self.coord_sigma
    }

    /// Normalized log density at `path`.
    pub fn log_density(&self, path: &Path) -> f64 {
        let quad: f64 = path
            .values()
            .iter()
            .zip(self.center.values())
            .zip(&self.coord_sigma)
            .map(|((x, c), s)| {
                let z = (x - c) / s;
                z * z
            })
            .sum();
        self.log_norm - 0.5 * quad
    }
}

/// Bias centered on `best` with widths four times the largest per-component
/// distance to `worst`.
pub fn build_bias(best: &Path, worst: &Path) -> Result<BiasSpec> {
    if !best.same_shape(worst) {
        return Err(contract("bias endpoints have different shapes"));
    }
    let mut sigma_state = vec![0.0f64; best.dim()];
    for t in 0..best.n_times() {
        for (s, (a, b)) in sigma_state.iter_mut().zip(best.state(t).iter().zip(worst.state(t))) {
            *s = s.max((a - b).abs());
        }
    }
    let mut sigma_param: Vec<f64> = best.params().iter().zip(worst.params()).map(|(a, b)| (a - b).abs()).collect();
    let floor = |v: &mut Vec<f64>| {
        for s in v.iter_mut() {
            *s = if *s > 0.0 { WIDTH_FACTOR * *s } else { SIGMA_FLOOR };
        }
    };
    floor(&mut sigma_state);
    floor(&mut sigma_param);
    if best == worst {
        log::warn!("bias endpoints coincide; every width falls back to {SIGMA_FLOOR}");
    }
    BiasSpec::new(best.clone(), sigma_state, sigma_param)
}

pub fn log_bias(path: &Path, bias: &BiasSpec) -> Result<f64> {
    if !path.same_shape(bias.center()) {
        return Err(contract("path shape does not match the bias"));
    }
    Ok(bias.log_density(path))
}

/// Which density the Metropolis test compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcceptanceRule {
    /// Target `P * P_bias`; recorded states reweighted by `1 / P_bias`
    /// estimate posterior expectations.
    PosteriorTimesBias,
    /// Target `P` alone. The chain then samples the posterior directly and
    /// the `1 / P_bias` weights over-correct; kept for comparison.
    Posterior,
}

/// `min(1, exp(proposed - current))`; a non-finite proposal is never accepted.
pub fn accept_prob(current: f64, proposed: f64) -> f64 {
    if !proposed.is_finite() {
        0.0
    } else if !current.is_finite() {
        1.0
    } else {
        (proposed - current).exp().min(1.0)
    }
}

#[derive(Debug, Clone)]
pub struct WalkerState {
    pub path: Path,
    /// Cached `-A(path)`.
    pub log_p: f64,
    /// Cached bias log density at `path`.
    pub log_bias: f64,
    /// Index of this walker's random stream.
    pub stream_id: u64,
    scratch: Path,
}

impl WalkerState {
    pub fn new(path: Path, target: &impl LogDensity, bias: &BiasSpec, stream_id: u64) -> Result<Self> {
        target.check(&path)?;
        let log_p = target.log_density(&path);
        let log_bias = log_bias(&path, bias)?;
        let scratch = path.clone();
        Ok(WalkerState { path, log_p, log_bias, stream_id, scratch })
    }

    pub fn log_target(&self, rule: AcceptanceRule) -> f64 {
        match rule {
            AcceptanceRule::PosteriorTimesBias => self.log_p + self.log_bias,
            AcceptanceRule::Posterior => self.log_p,
        }
    }
}

/// One Metropolis step with per-coordinate Gaussian proposal width
/// `step_scale * sigma`. Returns whether the proposal was accepted; on
/// rejection the walker is left untouched.
pub fn mh_step<R: Rng + ?Sized>(
    walker: &mut WalkerState,
    bias: &BiasSpec,
    step_scale: f64,
    target: &impl LogDensity,
    rule: AcceptanceRule,
    rng: &mut R,
) -> bool {
    let sig = bias.coordinate_sigmas();
    for ((p, x), s) in walker.scratch.values_mut().iter_mut().zip(walker.path.values()).zip(sig) {
        let z: f64 = rng.sample(StandardNormal);
        *p = x + step_scale * s * z;
    }
    let log_p = target.log_density(&walker.scratch);
    let lb = bias.log_density(&walker.scratch);
    let proposed = match rule {
        AcceptanceRule::PosteriorTimesBias => log_p + lb,
        AcceptanceRule::Posterior => log_p,
    };
    let prob = accept_prob(walker.log_target(rule), proposed);
    let u: f64 = rng.random();
    if prob > 0.0 && u < prob {
        std::mem::swap(&mut walker.path, &mut walker.scratch);
        walker.log_p = log_p;
        walker.log_bias = lb;
        true
    } else {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub walkers: usize,
    pub burn_in: usize,
    pub steps: usize,
    pub thin: usize,
    /// Initial proposal width as a fraction of the bias widths.
    pub step_scale: f64,
    /// Tune the step scales during burn-in towards acceptance in [0.2, 0.5].
    pub adapt: bool,
    pub rule: AcceptanceRule,
    pub scheme: ProposalScheme,
    /// Keep full paths in the recorded samples (otherwise parameters only).
    pub record_states: bool,
    /// Abort when the post burn-in acceptance rate falls below this.
    pub min_acceptance: f64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            walkers: 20,
            burn_in: 2000,
            steps: 100_000,
            thin: 80,
            step_scale: 0.02,
            adapt: true,
            rule: AcceptanceRule::PosteriorTimesBias,
            scheme: ProposalScheme::Componentwise,
            record_states: false,
            min_acceptance: 0.01,
        }
    }
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        if self.walkers == 0 || self.steps == 0 || self.thin == 0 {
            return Err(contract("walkers, steps and thin must be positive"));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(contract("step_scale must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ChainSample {
    pub walker_id: usize,
    /// Post burn-in step at which the state was recorded (1-based).
    pub step_index: usize,
    pub path: Path,
    /// `-log P_bias` at the recorded state.
    pub log_weight: f64,
}

impl ChainSample {
    /// `1 / P_bias`; may overflow for high-dimensional paths, see
    /// [`normalized_weights`].
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// Weights rescaled so the largest is 1.
pub fn normalized_weights(samples: &[ChainSample]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(contract("no samples"));
    }
    let max = samples.iter().map(|s| s.log_weight).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::ZeroWeight);
    }
    Ok(samples.iter().map(|s| (s.log_weight - max).exp()).collect())
}

/// Weighted running mean with log-domain weights.
#[derive(Debug, Clone)]
struct WeightedMean {
    max_lw: f64,
    sum_w: f64,
    sum: Vec<f64>,
}

impl WeightedMean {
    fn new(n: usize) -> Self {
        WeightedMean { max_lw: f64::NEG_INFINITY, sum_w: 0.0, sum: vec![0.0; n] }
    }

    fn rescale(&mut self, new_max: f64) {
        if new_max > self.max_lw {
            let f = if self.max_lw.is_finite() { (self.max_lw - new_max).exp() } else { 0.0 };
            self.sum_w *= f;
            self.sum.iter_mut().for_each(|v| *v *= f);
            self.max_lw = new_max;
        }
    }

    fn add(&mut self, lw: f64, x: &[f64]) {
        self.rescale(lw);
        let w = (lw - self.max_lw).exp();
        self.sum_w += w;
        for (s, v) in self.sum.iter_mut().zip(x) {
            *s += w * v;
        }
    }

    fn merge(&mut self, other: &WeightedMean) {
        if other.sum_w == 0.0 {
            return;
        }
        self.rescale(other.max_lw);
        let f = (other.max_lw - self.max_lw).exp();
        self.sum_w += f * other.sum_w;
        for (s, v) in self.sum.iter_mut().zip(&other.sum) {
            *s += f * v;
        }
    }

    fn mean(&self) -> Option<Vec<f64>> {
        (self.sum_w > 0.0).then(|| self.sum.iter().map(|s| s / self.sum_w).collect())
    }
}

#[derive(Debug, Clone)]
pub struct EnsembleOutput {
    /// Ordered by `(walker_id, step_index)`.
    pub samples: Vec<ChainSample>,
    pub acceptance_rate: f64,
    /// Post burn-in acceptance rate of each walker.
    pub walker_acceptance: Vec<f64>,
    /// Frozen step scales of each walker after burn-in, one per coordinate
    /// group (a single entry for the joint scheme).
    pub step_scales: Vec<Vec<f64>>,
    /// Importance-weighted mean of every recorded path coordinate.
    pub mean_path: Path,
}

struct WalkerRun {
    samples: Vec<ChainSample>,
    acceptance: f64,
    step_scales: Vec<f64>,
    mean: WeightedMean,
}

/// How a walker moves in one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalScheme {
    /// Every coordinate moves at once under a single accept/reject test.
    Joint,
    /// A sweep of single-coordinate moves in path order. Each state component
    /// and each parameter has its own step scale.
    Componentwise,
}

/// Step-scale group of every flat coordinate: state component `i` maps to
/// `i`, parameter `j` to `dim + j`.
fn coordinate_groups(path: &Path) -> Vec<usize> {
    let (d, n_states) = (path.dim(), path.n_times() * path.dim());
    (0..path.len()).map(|k| if k < n_states { k % d } else { d + k - n_states }).collect()
}

/// One componentwise sweep. `scales` and `accepted` are indexed by
/// coordinate group.
#[allow(clippy::too_many_arguments)]
pub fn site_sweep<T: LogDensity, R: Rng + ?Sized>(
    walker: &mut WalkerState,
    cache: &mut T::Cache,
    bias: &BiasSpec,
    scales: &[f64],
    target: &T,
    rule: AcceptanceRule,
    rng: &mut R,
    accepted: &mut [usize],
) {
    let sig = bias.coordinate_sigmas();
    let center = bias.center().values();
    let (d, n_states) = (walker.path.dim(), walker.path.n_times() * walker.path.dim());
    for k in 0..walker.path.len() {
        let group = if k < n_states { k % d } else { d + k - n_states };
        let old = walker.path.values()[k];
        let z: f64 = rng.sample(StandardNormal);
        let value = old + scales[group] * sig[k] * z;
        let d_log_p = target.coordinate_delta(&walker.path, cache, k, value);
        let d_log_bias = -0.5 * ((value - center[k]).powi(2) - (old - center[k]).powi(2)) / (sig[k] * sig[k]);
        let d_target = match rule {
            AcceptanceRule::PosteriorTimesBias => d_log_p + d_log_bias,
            AcceptanceRule::Posterior => d_log_p,
        };
        let prob = accept_prob(0.0, d_target);
        let u: f64 = rng.random();
        if prob > 0.0 && u < prob {
            walker.path.values_mut()[k] = value;
            target.commit(&walker.path, cache, k);
            accepted[group] += 1;
        }
    }
    walker.log_p = target.log_density(&walker.path);
    walker.log_bias = bias.log_density(&walker.path);
}

struct Mover<'a, T: LogDensity> {
    target: &'a T,
    bias: &'a BiasSpec,
    run: &'a RunSettings,
    cache: T::Cache,
    scales: Vec<f64>,
    /// Attempted moves per group in one step.
    group_size: Vec<usize>,
}

impl<T: LogDensity> Mover<'_, T> {
    fn step<R: Rng + ?Sized>(&mut self, walker: &mut WalkerState, rng: &mut R, accepted: &mut [usize]) {
        match self.run.scheme {
            ProposalScheme::Joint => {
                if mh_step(walker, self.bias, self.scales[0], self.target, self.run.rule, rng) {
                    accepted[0] += 1;
                }
            }
            ProposalScheme::Componentwise => site_sweep(
                walker,
                &mut self.cache,
                self.bias,
                &self.scales,
                self.target,
                self.run.rule,
                rng,
                accepted,
            ),
        }
    }
}

fn run_walker<T: LogDensity>(
    walker_id: usize,
    target: &T,
    bias: &BiasSpec,
    run: &RunSettings,
    seed: u64,
) -> Result<WalkerRun> {
    let mut rng = stream(seed, Stage::Walker, walker_id as u64);
    let center = bias.center();
    let mut start = center.clone();
    for (v, s) in start.values_mut().iter_mut().zip(bias.coordinate_sigmas()) {
        let half = 0.25 * s;
        *v += rng.random_range(-half..=half);
    }
    let mut walker = WalkerState::new(start, target, bias, walker_id as u64)?;
    let group_size = match run.scheme {
        ProposalScheme::Joint => vec![1],
        ProposalScheme::Componentwise => {
            let mut sizes = vec![0; center.dim() + center.n_params()];
            coordinate_groups(center).into_iter().for_each(|g| sizes[g] += 1);
            sizes
        }
    };
    let mut mover = Mover {
        target,
        bias,
        run,
        cache: target.cache(&walker.path),
        scales: vec![run.step_scale; group_size.len()],
        group_size,
    };

    let mut window = vec![0; mover.scales.len()];
    for i in 0..run.burn_in {
        mover.step(&mut walker, &mut rng, &mut window);
        if run.adapt && (i + 1) % ADAPT_WINDOW == 0 {
            for ((scale, acc), size) in mover.scales.iter_mut().zip(&mut window).zip(&mover.group_size) {
                let rate = *acc as f64 / (ADAPT_WINDOW * size) as f64;
                if rate < TARGET_ACCEPTANCE.0 || rate > TARGET_ACCEPTANCE.1 {
                    *scale *= (3.0 * (rate - 0.35)).exp().clamp(0.2, 5.0);
                }
                *acc = 0;
            }
        }
    }

    let mut samples = Vec::with_capacity(run.steps / run.thin);
    let mut mean = WeightedMean::new(center.len());
    let mut accepted = vec![0; mover.scales.len()];
    for step in 1..=run.steps {
        mover.step(&mut walker, &mut rng, &mut accepted);
        if step % run.thin == 0 {
            let log_weight = -walker.log_bias;
            mean.add(log_weight, walker.path.values());
            let path = if run.record_states {
                walker.path.clone()
            } else {
                Path::params_only(walker.path.params().to_vec())
            };
            samples.push(ChainSample { walker_id, step_index: step, path, log_weight });
        }
    }
    let attempted = run.steps * mover.group_size.iter().sum::<usize>();
    Ok(WalkerRun {
        samples,
        acceptance: accepted.iter().sum::<usize>() as f64 / attempted as f64,
        step_scales: mover.scales,
        mean,
    })
}

/// Runs `run.walkers` independent walkers, each on its own random stream.
pub fn run_ensemble<T: LogDensity>(target: &T, bias: &BiasSpec, run: &RunSettings, seed: u64) -> Result<EnsembleOutput> {
    run.validate()?;
    target.check(bias.center())?;
    let runs: Vec<WalkerRun> = (0..run.walkers)
        .into_par_iter()
        .map(|w| run_walker(w, target, bias, run, seed))
        .collect::<Result<_>>()?;

    let walker_acceptance: Vec<f64> = runs.iter().map(|r| r.acceptance).collect();
    let acceptance_rate = walker_acceptance.iter().sum::<f64>() / run.walkers as f64;
    if acceptance_rate < run.min_acceptance {
        return Err(Error::StuckEnsemble { rate: acceptance_rate, threshold: run.min_acceptance });
    }
    let mut mean = WeightedMean::new(bias.center().len());
    for r in &runs {
        mean.merge(&r.mean);
    }
    let mean_values = mean.mean().ok_or(Error::ZeroWeight)?;
    let c = bias.center();
    let mean_path = Path::from_flat(c.n_times(), c.dim(), c.n_params(), mean_values)?;
    let step_scales = runs.iter().map(|r| r.step_scales.clone()).collect();
    let samples = runs.into_iter().flat_map(|r| r.samples).collect();
    Ok(EnsembleOutput { samples, acceptance_rate, walker_acceptance, step_scales, mean_path })
}

/// Self-normalized importance estimate of `E[f(path)]`.
pub fn expectation(samples: &[ChainSample], f: impl Fn(&Path) -> f64) -> Result<f64> {
    let w = normalized_weights(samples)?;
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeight);
    }
    let acc: f64 = samples.iter().zip(&w).map(|(s, wi)| wi * f(&s.path)).sum();
    Ok(acc / total)
}

/// Same estimate with every weight set to one.
pub fn unweighted_expectation(samples: &[ChainSample], f: impl Fn(&Path) -> f64) -> Result<f64> {
    if samples.is_empty() {
        return Err(contract("no samples"));
    }
    Ok(samples.iter().map(|s| f(&s.path)).sum::<f64>() / samples.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalHistogram {
    pub param_index: usize,
    pub bin_edges: Vec<f64>,
    /// Normalized to sum to one.
    pub mass: Vec<f64>,
    pub mean: f64,
    pub rms: f64,
    pub n_samples: usize,
    /// Sum of the max-rescaled weights.
    pub total_weight: f64,
}

pub fn marginalize(samples: &[ChainSample], param_index: usize) -> Result<MarginalHistogram> {
    marginalize_with_bins(samples, param_index, DEFAULT_BINS)
}

/// Weighted histogram of one parameter over `mean ± 5 rms`; samples outside
/// the range are counted in the end bins.
pub fn marginalize_with_bins(samples: &[ChainSample], param_index: usize, bins: usize) -> Result<MarginalHistogram> {
    if bins == 0 {
        return Err(contract("histogram needs at least one bin"));
    }
    let w = normalized_weights(samples)?;
    if let Some(s) = samples.iter().find(|s| param_index >= s.path.n_params()) {
        return Err(contract(format!(
            "parameter index {param_index} out of range for {} parameters",
            s.path.n_params()
        )));
    }
    let vals: Vec<f64> = samples.iter().map(|s| s.path.params()[param_index]).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return Err(Error::ZeroWeight);
    }
    let mean = vals.iter().zip(&w).map(|(v, wi)| wi * v).sum::<f64>() / total;
    let var = vals.iter().zip(&w).map(|(v, wi)| wi * (v - mean).powi(2)).sum::<f64>() / total;
    let rms = var.sqrt();
    let half = if rms > 0.0 { 5.0 * rms } else { 0.5 };
    let lo = mean - half;
    let width = 2.0 * half / bins as f64;
    let bin_edges: Vec<f64> = (0..=bins).map(|k| lo + k as f64 * width).collect();
    let mut mass = vec![0.0; bins];
    for (v, wi) in vals.iter().zip(&w) {
        let k = ((v - lo) / width).floor();
        let k = if k.is_nan() { 0 } else { (k.max(0.0) as usize).min(bins - 1) };
        mass[k] += wi;
    }
    mass.iter_mut().for_each(|m| *m /= total);
    Ok(MarginalHistogram { param_index, bin_edges, mass, mean, rms, n_samples: samples.len(), total_weight: total })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl LogDensity for Quadratic {
        type Cache = ();
        fn cache(&self, _: &Path) {}
        fn log_density(&self, path: &Path) -> f64 {
            -0.5 * path
                .values()
                .iter()
                .zip(&self.mean)
                .zip(&self.sd)
                .map(|((x, m), s)| ((x - m) / s).powi(2))
                .sum::<f64>()
        }
    }

    struct Flat;
    impl LogDensity for Flat {
        type Cache = ();
        fn cache(&self, _: &Path) {}
        fn log_density(&self, path: &Path) -> f64 {
            if path.values()[0] > 1e300 {
                f64::NAN
            } else {
                0.0
            }
        }
    }

    struct Wall;
    impl LogDensity for Wall {
        type Cache = ();
        fn cache(&self, _: &Path) {}
        fn log_density(&self, _: &Path) -> f64 {
            f64::NEG_INFINITY
        }
    }

    fn sample(g: f64, lw: f64) -> ChainSample {
        ChainSample { walker_id: 0, step_index: 1, path: Path::params_only(vec![g]), log_weight: lw }
    }

    fn rows(n: usize, d: usize, v: f64) -> Vec<Vec<f64>> {
        vec![vec![v; d]; n]
    }

    #[test]
    fn bias_from_constant_offset() {
        let best = Path::from_rows(&rows(4, 5, 1.0), &[10.0]).unwrap();
        let worst = Path::from_rows(&rows(4, 5, 2.0), &[11.0]).unwrap();
        let b = build_bias(&best, &worst).unwrap();
        assert_eq!(b.sigma_state(), &[4.0; 5]);
        assert_eq!(b.sigma_param(), &[4.0]);
    }

    #[test]
    fn bias_uses_max_over_time() {
        let best = Path::from_rows(&rows(6, 5, 0.0), &[10.0]).unwrap();
        let mut worst = best.clone();
        worst.state_mut(3)[2] = 0.5;
        worst.params_mut()[0] = 10.25;
        let b = build_bias(&best, &worst).unwrap();
        assert_eq!(b.sigma_state()[2], 2.0);
        assert_eq!(b.sigma_state()[0], SIGMA_FLOOR);
        assert_eq!(b.sigma_param(), &[1.0]);
    }

    #[test]
    fn identical_endpoints_fall_back_to_floor() {
        let best = Path::from_rows(&rows(3, 4, 0.3), &[9.0]).unwrap();
        let b = build_bias(&best, &best).unwrap();
        assert!(b.sigma_state().iter().chain(b.sigma_param()).all(|s| *s == SIGMA_FLOOR));
        let other = Path::from_rows(&rows(2, 4, 0.3), &[9.0]).unwrap();
        assert!(build_bias(&best, &other).is_err());
    }

    #[test]
    fn bias_density_mode_and_one_sigma_drop() {
        let center = Path::from_rows(&rows(3, 4, 1.0), &[10.0]).unwrap();
        let b = BiasSpec::new(center.clone(), vec![0.5, 1.0, 2.0, 3.0], vec![0.7]).unwrap();
        let mode = log_bias(&center, &b).unwrap();
        let expected: f64 = b
            .coordinate_sigmas()
            .iter()
            .map(|s| -0.5 * (2.0 * std::f64::consts::PI * s * s).ln())
            .sum();
        assert!((mode - expected).abs() < 1e-12);
        let mut moved = center.clone();
        moved.state_mut(2)[3] += 3.0;
        assert!((mode - log_bias(&moved, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bias_slice_matches_normalized_density() {
        // The 1-D slice through the center, with the other coordinates'
        // normalization removed, integrates to one.
        let center = Path::params_only(vec![2.0]);
        let b = BiasSpec::new(center, vec![], vec![0.8]).unwrap();
        let (lo, hi, n) = (2.0 - 12.0, 2.0 + 12.0, 200_000);
        let h = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for k in 0..=n {
            let x = lo + k as f64 * h;
            let wgt = if k == 0 || k == n { 0.5 } else { 1.0 };
            integral += wgt * b.log_density(&Path::params_only(vec![x])).exp() * h;
        }
        assert!((integral - 1.0).abs() < 1e-12, "{integral}");
        let closed = |x: f64| -((x - 2.0) / 0.8).powi(2) / 2.0 - (0.8 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        for x in [-1.0, 0.3, 2.0, 5.5] {
            assert!((b.log_density(&Path::params_only(vec![x])) - closed(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn acceptance_probabilities() {
        assert_eq!(accept_prob(-3.0, -3.0), 1.0);
        assert!((accept_prob(-3.0, -3.0 - 2f64.ln()) - 0.5).abs() < 1e-15);
        assert_eq!(accept_prob(-3.0, 1.0), 1.0);
        assert_eq!(accept_prob(-3.0, f64::NEG_INFINITY), 0.0);
        assert_eq!(accept_prob(-3.0, f64::NAN), 0.0);
        assert_eq!(accept_prob(f64::NEG_INFINITY, -1e6), 1.0);
    }

    #[test]
    fn acceptance_matches_log_prob_ratio_of_action() {
        use crate::dynamics::ModelSpec;
        use crate::twin::Observations;
        use std::sync::Arc;
        let model = ModelSpec::lorenz96(4, 0.025).unwrap();
        let obs = Observations::new(vec![0], vec![1.0, 2.0, 3.0], vec![]).unwrap();
        let cfg = ActionConfig::new(model, 2.0, 0.5, Arc::new(obs)).unwrap();
        let a = Path::from_rows(&rows(3, 4, 1.0), &[8.0]).unwrap();
        let b = Path::from_rows(&rows(3, 4, 1.5), &[8.0]).unwrap();
        let (la, lb) = (cfg.log_prob(&a).unwrap(), cfg.log_prob(&b).unwrap());
        let ratio = (lb - la).exp();
        assert!((accept_prob(la, lb) - ratio.min(1.0)).abs() < 1e-15);
        assert_eq!(cfg.log_density(&a), la);
    }

    #[test]
    fn rejected_step_leaves_walker_identical() {
        let bias = BiasSpec::new(Path::params_only(vec![0.0, 0.0]), vec![], vec![1.0, 1.0]).unwrap();
        let mut w = WalkerState::new(Path::params_only(vec![0.1, -0.2]), &Quadratic { mean: vec![0.0; 2], sd: vec![1.0; 2] }, &bias, 0).unwrap();
        let before = w.clone();
        let mut rng = stream(1, Stage::Test, 0);
        assert!(!mh_step(&mut w, &bias, 0.5, &Wall, AcceptanceRule::Posterior, &mut rng));
        assert_eq!(w.path, before.path);
        assert_eq!(w.log_p.to_bits(), before.log_p.to_bits());
        assert_eq!(w.log_bias.to_bits(), before.log_bias.to_bits());
    }

    #[test]
    fn flat_target_always_accepts_finite_and_rejects_nan() {
        let bias = BiasSpec::new(Path::params_only(vec![0.0]), vec![], vec![1.0]).unwrap();
        let mut w = WalkerState::new(Path::params_only(vec![0.0]), &Flat, &bias, 0).unwrap();
        let mut rng = stream(2, Stage::Test, 0);
        for _ in 0..100 {
            assert!(mh_step(&mut w, &bias, 0.5, &Flat, AcceptanceRule::Posterior, &mut rng));
        }
        let far = BiasSpec::new(Path::params_only(vec![0.0]), vec![], vec![1e301]).unwrap();
        let mut w = WalkerState::new(Path::params_only(vec![2e300]), &Flat, &far, 0).unwrap();
        let before = w.path.clone();
        let mut hits = 0;
        for _ in 0..50 {
            if mh_step(&mut w, &far, 1e-3, &Flat, AcceptanceRule::Posterior, &mut rng) {
                hits += 1;
            }
        }
        assert_eq!(hits, 0);
        assert_eq!(w.path, before);
    }

    #[test]
    fn recording_contract_and_determinism() {
        let target = Quadratic { mean: vec![1.0, -1.0], sd: vec![0.5, 2.0] };
        let bias = BiasSpec::new(Path::params_only(vec![1.0, -1.0]), vec![], vec![1.0, 4.0]).unwrap();
        let run = RunSettings { walkers: 3, burn_in: 10, steps: 5, thin: 1, step_scale: 0.5, ..Default::default() };
        let a = run_ensemble(&target, &bias, &run, 9).unwrap();
        assert_eq!(a.samples.len(), 15);
        for w in 0..3 {
            let steps: Vec<usize> = a.samples.iter().filter(|s| s.walker_id == w).map(|s| s.step_index).collect();
            assert_eq!(steps, vec![1, 2, 3, 4, 5]);
        }
        let b = run_ensemble(&target, &bias, &run, 9).unwrap();
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.path == y.path && x.log_weight == y.log_weight));
        let thinned = run_ensemble(&target, &bias, &RunSettings { steps: 83, thin: 8, ..run }, 9).unwrap();
        assert_eq!(thinned.samples.len(), 3 * 10);
    }

    #[test]
    fn stuck_ensemble_is_reported() {
        let bias = BiasSpec::new(Path::params_only(vec![0.0]), vec![], vec![1.0]).unwrap();
        let run = RunSettings { walkers: 2, burn_in: 0, steps: 50, thin: 10, ..Default::default() };
        assert!(matches!(run_ensemble(&Wall, &bias, &run, 1), Err(Error::StuckEnsemble { .. })));
    }

    #[test]
    fn two_point_marginal() {
        let h = marginalize(&[sample(9.0, 0.0), sample(11.0, 0.0)], 0).unwrap();
        assert!((h.mean - 10.0).abs() < 1e-15);
        assert!((h.rms - 1.0).abs() < 1e-15);
        assert_eq!(h.bin_edges.len(), DEFAULT_BINS + 1);
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_marginal_mean() {
        let s = [sample(0.0, 0.0), sample(4.0, 3f64.ln())];
        let h = marginalize(&s, 0).unwrap();
        assert!((h.mean - 3.0).abs() < 1e-12);
        assert!((expectation(&s, |p| p.params()[0]).unwrap() - h.mean).abs() < 1e-12);
    }

    #[test]
    fn identical_samples_have_zero_rms() {
        let s = vec![sample(7.5, -2.0); 4];
        let h = marginalize(&s, 0).unwrap();
        assert_eq!(h.rms, 0.0);
        assert_eq!(h.mean, 7.5);
        assert!((h.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_log_weights_stay_finite() {
        let s = [sample(1.0, 5000.0), sample(3.0, 5000.0)];
        assert!((expectation(&s, |p| p.params()[0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(s[0].weight().is_infinite());
    }

    #[test]
    fn estimator_errors() {
        assert!(expectation(&[], |_| 1.0).is_err());
        let dead = [sample(1.0, f64::NEG_INFINITY)];
        assert!(matches!(expectation(&dead, |_| 1.0), Err(Error::ZeroWeight)));
        assert!(matches!(marginalize(&dead, 0), Err(Error::ZeroWeight)));
        assert!(marginalize(&[sample(1.0, 0.0)], 1).is_err());
    }

    #[test]
    fn constant_function_expectation_is_one() {
        let s: Vec<ChainSample> = (0..10).map(|k| sample(k as f64, -(k as f64) * 0.37)).collect();
        assert_eq!(expectation(&s, |_| 1.0).unwrap(), 1.0);
    }

    #[test]
    fn weighted_mean_accumulator_merges_like_batch() {
        let mut a = WeightedMean::new(1);
        let mut b = WeightedMean::new(1);
        let mut all = WeightedMean::new(1);
        for (k, lw) in [3.0, -1.0, 700.0, 2.0].iter().enumerate() {
            let x = [k as f64];
            all.add(*lw, &x);
            if k % 2 == 0 { a.add(*lw, &x) } else { b.add(*lw, &x) }
        }
        a.merge(&b);
        assert!((a.mean().unwrap()[0] - all.mean().unwrap()[0]).abs() < 1e-12);
    }

    fn small_action(r_f: f64) -> (ActionConfig, Path) {
        use crate::dynamics::ModelSpec;
        use crate::twin::Observations;
        use std::sync::Arc;
        let mut rng = stream(4, Stage::Test, 0);
        let n = 6;
        let values: Vec<f64> = (0..n * 2).map(|_| rng.random_range(-5.0..5.0)).collect();
        let obs = Observations::new(vec![0, 3], values, vec![]).unwrap();
        let model = ModelSpec::lorenz96(5, 0.025).unwrap();
        let cfg = ActionConfig::new(model, 6.5, r_f, Arc::new(obs)).unwrap();
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| rng.random_range(-8.0..8.0)).collect()).collect();
        (cfg, Path::from_rows(&rows, &[9.5]).unwrap())
    }

    #[test]
    fn coordinate_delta_matches_full_evaluation() {
        for r_f in [0.0, 1.0, 100.0] {
            let (cfg, path) = small_action(r_f);
            let mut cache = cfg.cache(&path);
            for k in 0..path.len() {
                let v = path.values()[k] + 0.37;
                let mut moved = path.clone();
                moved.values_mut()[k] = v;
                let full = cfg.log_density(&moved) - cfg.log_density(&path);
                let local = cfg.coordinate_delta(&path, &mut cache, k, v);
                assert!((full - local).abs() <= 1e-9 * (1.0 + full.abs()), "k {k} r_f {r_f}: {full} vs {local}");
            }
        }
    }

    #[test]
    fn committed_moves_keep_cache_fresh() {
        let (cfg, mut path) = small_action(10.0);
        let mut cache = cfg.cache(&path);
        let mut rng = stream(5, Stage::Test, 0);
        for _ in 0..200 {
            let k = rng.random_range(0..path.len());
            let v = path.values()[k] + rng.random_range(-0.5..0.5);
            let _ = cfg.coordinate_delta(&path, &mut cache, k, v);
            path.values_mut()[k] = v;
            cfg.commit(&path, &mut cache, k);
        }
        let fresh = cfg.cache(&path);
        assert!(cache.images.iter().zip(&fresh.images).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn componentwise_sweep_recovers_correlated_gaussian() {
        // Two coordinates with correlation: log p = -(x^2 - x y + y^2) / (2 * 0.75).
        struct Corr;
        impl LogDensity for Corr {
            type Cache = ();
            fn cache(&self, _: &Path) {}
            fn log_density(&self, p: &Path) -> f64 {
                let v = p.values();
                -(v[0] * v[0] - v[0] * v[1] + v[1] * v[1]) / 1.5
            }
        }
        let bias = BiasSpec::new(Path::params_only(vec![0.0, 0.0]), vec![], vec![100.0, 100.0]).unwrap();
        let run = RunSettings { walkers: 4, burn_in: 2000, steps: 40_000, thin: 4, step_scale: 0.01, ..Default::default() };
        let out = run_ensemble(&Corr, &bias, &run, 3).unwrap();
        let mean = expectation(&out.samples, |p| p.params()[0]).unwrap();
        let var = expectation(&out.samples, |p| p.params()[0].powi(2)).unwrap() - mean * mean;
        let cov = expectation(&out.samples, |p| p.params()[0] * p.params()[1]).unwrap();
        // Covariance matrix [[1, 0.5], [0.5, 1]].
        assert!(mean.abs() < 0.05, "{mean}");
        assert!((var - 1.0).abs() < 0.05, "{var}");
        assert!((cov - 0.5).abs() < 0.05, "{cov}");
        assert!(out.step_scales.iter().all(|s| s.len() == 2));
    }
}

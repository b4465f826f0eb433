//! Limited-memory BFGS with Armijo backtracking, used to minimize the action
//! over the whole path at each annealing level.

use std::collections::VecDeque;

use crate::action::{ActionConfig, ActionValue, Path};
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerSettings {
    /// Convergence threshold on the sup-norm of the gradient.
    pub grad_tolerance: f64,
    pub max_iterations: usize,
    /// Number of curvature pairs kept.
    pub memory: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings { grad_tolerance: 1e-8, max_iterations: 5000, memory: 10 }
    }
}

impl OptimizerSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tolerance > 0.0) {
            return Err(contract("grad_tolerance must be > 0"));
        }
        if self.max_iterations < 1 {
            return Err(contract("max_iterations must be >= 1"));
        }
        if self.memory < 1 {
            return Err(contract("memory must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// No step satisfying the sufficient-decrease condition was found; the
    /// best point so far is returned.
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub path: Path,
    pub action: ActionValue,
    pub converged: bool,
    pub iterations: usize,
    pub termination: Termination,
    pub grad_norm: f64,
}

/// Outcome of the generic minimizer on a flat vector.
#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub grad_norm: f64,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sup_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Two-loop recursion: writes `-H g` into `dir`.
fn search_direction(history: &VecDeque<Pair>, g: &[f64], dir: &mut [f64], alphas: &mut Vec<f64>) {
    dir.copy_from_slice(g);
    alphas.clear();
    for pair in history.iter().rev() {
        let a = pair.rho * dot(&pair.s, dir);
        for (d, y) in dir.iter_mut().zip(&pair.y) {
            *d -= a * y;
        }
        alphas.push(a);
    }
    let gamma = match history.back() {
        Some(p) => dot(&p.s, &p.y) / dot(&p.y, &p.y),
        None => 1.0 / sup_norm(g).max(1.0),
    };
    for d in dir.iter_mut() {
        *d *= gamma;
    }
    for (pair, a) in history.iter().zip(alphas.iter().rev()) {
        let b = pair.rho * dot(&pair.y, dir);
        for (d, s) in dir.iter_mut().zip(&pair.s) {
            *d += (a - b) * s;
        }
    }
    for d in dir.iter_mut() {
        *d = -*d;
    }
}

/// Minimizes `f`, which returns the value and writes the gradient.
pub fn lbfgs<F>(x0: &[f64], mut f: F, settings: &OptimizerSettings) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut history: VecDeque<Pair> = VecDeque::with_capacity(settings.memory);
    let mut dir = vec![0.0; n];
    let mut alphas = Vec::with_capacity(settings.memory);
    let mut x_new = vec![0.0; n];
    let mut g_new = vec![0.0; n];
    let mut iterations = 0;

    let finish = |x: Vec<f64>, value: f64, g: &[f64], iterations, termination| Minimum {
        x,
        value,
        iterations,
        termination,
        grad_norm: sup_norm(g),
    };

    if !fx.is_finite() {
        return finish(x, fx, &g, 0, Termination::LineSearchFailed);
    }

    loop {
        if sup_norm(&g) < settings.grad_tolerance {
            return finish(x, fx, &g, iterations, Termination::Converged);
        }
        if iterations >= settings.max_iterations {
            return finish(x, fx, &g, iterations, Termination::MaxIterations);
        }

        search_direction(&history, &g, &mut dir, &mut alphas);
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            // Stale curvature information; restart from steepest descent.
            history.clear();
            search_direction(&history, &g, &mut dir, &mut alphas);
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                x_new[i] = x[i] + step * dir[i];
            }
            let f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + ARMIJO_C1 * step * slope {
                accepted = Some(f_new);
                break;
            }
            step *= 0.5;
        }
        let f_new = match accepted {
            Some(v) if v < fx => v,
            // Either no acceptable step or no representable decrease left.
            _ => {
                if history.is_empty() {
                    return finish(x, fx, &g, iterations, Termination::LineSearchFailed);
                }
                history.clear();
                continue;
            }
        };
        iterations += 1;

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        // Zero or negative curvature (flat directions): skip the update.
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == settings.memory {
                history.pop_front();
            }
            history.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
    }
}

/// Minimizes the action starting from `initial`.
pub fn minimize(initial: &Path, config: &ActionConfig, settings: &OptimizerSettings) -> Result<OptimResult> {
    settings.validate()?;
    config.check_path(initial)?;
    if !initial.is_finite() {
        return Err(contract("initial path must be finite"));
    }
    let mut scratch = initial.clone();
    let min = lbfgs(
        initial.values(),
        |x, g| {
            scratch.values_mut().copy_from_slice(x);
            config.eval_with_gradient(&scratch, g).total
        },
        settings,
    );
    let path = Path::from_flat(initial.n_times(), initial.dim(), initial.n_params(), min.x)?;
    let action = config.eval(&path);
    Ok(OptimResult {
        path,
        action,
        converged: min.termination == Termination::Converged,
        iterations: min.iterations,
        termination: min.termination,
        grad_norm: min.grad_norm,
    })
}

//! Lorenz96 dynamics and the fixed-step RK4 map used as the model `f(x, p)`.
//!
//! The vector field is
//!
//! ```text
//! dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + G
//! ```
//!
//! with cyclic indices. The discrete map advances one classical RK4 step of
//! length `dt`; its exact derivatives are obtained by differentiating through
//! the four stages, either as full Jacobians or as vector-Jacobian products
//! (the latter is what the action gradient uses).

use nalgebra::DMatrix;

use crate::error::{contract, Error, Result};

/// Soft bound on the magnitude of attractor states for the `G = 10` regime.
pub const ATTRACTOR_BOUND: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSpec {
    pub dim: usize,
    pub dt: f64,
    pub n_params: usize,
}

impl ModelSpec {
    /// Lorenz96 with `dim` sites and a single forcing parameter.
    pub fn lorenz96(dim: usize, dt: f64) -> Result<Self> {
        let spec = ModelSpec { dim, dt, n_params: 1 };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 4 {
            return Err(contract(format!("model dimension must be >= 4, got {}", self.dim)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(contract(format!("dt must be positive, got {}", self.dt)));
        }
        if self.n_params != 1 {
            return Err(contract(format!(
                "Lorenz96 takes exactly one parameter, got n_params = {}",
                self.n_params
            )));
        }
        Ok(())
    }

    fn check(&self, x: &[f64], p: &[f64]) -> Result<()> {
        if x.len() != self.dim {
            return Err(contract(format!("state has length {}, expected {}", x.len(), self.dim)));
        }
        if p.len() != self.n_params {
            return Err(contract(format!(
                "parameter vector has length {}, expected {}",
                p.len(),
                self.n_params
            )));
        }
        Ok(())
    }

    pub fn vector_field(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        self.check(x, p)?;
        let mut out = vec![0.0; self.dim];
        rhs_into(x, p[0], &mut out);
        Ok(out)
    }

    /// Analytic `(dF/dx, dF/dp)` of the vector field.
    pub fn jacobians(&self, x: &[f64], p: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(x, p)?;
        let d = self.dim;
        let mut fx = DMatrix::zeros(d, d);
        for i in 0..d {
            let ip1 = wrap(i as isize + 1, d);
            let im1 = wrap(i as isize - 1, d);
            let im2 = wrap(i as isize - 2, d);
            fx[(i, ip1)] += x[im1];
            fx[(i, im2)] -= x[im1];
            fx[(i, im1)] += x[ip1] - x[im2];
            fx[(i, i)] -= 1.0;
        }
        let fp = DMatrix::from_element(d, 1, 1.0);
        Ok((fx, fp))
    }

    /// One RK4 step of length `dt`.
    pub fn discrete_map(&self, x: &[f64], p: &[f64]) -> Result<Vec<f64>> {
        self.check(x, p)?;
        let mut ws = Rk4Workspace::new(self.dim);
        let mut out = vec![0.0; self.dim];
        ws.step(x, p[0], self.dt, &mut out);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(Error::NonFinite { step: 1 })
        }
    }

    /// Exact `(df/dx, df/dp)` of [`ModelSpec::discrete_map`], assembled row by
    /// row from vector-Jacobian products.
    pub fn jacobians_map(&self, x: &[f64], p: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check(x, p)?;
        let d = self.dim;
        let mut ws = Rk4Workspace::new(d);
        let mut out = vec![0.0; d];
        ws.step(x, p[0], self.dt, &mut out);
        if !out.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { step: 1 });
        }
        let mut mx = DMatrix::zeros(d, d);
        let mut mp = DMatrix::zeros(d, 1);
        let mut e = vec![0.0; d];
        let mut gx = vec![0.0; d];
        for i in 0..d {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[i] = 1.0;
            gx.iter_mut().for_each(|v| *v = 0.0);
            let gp = ws.vjp(self.dt, &e, &mut gx);
            for j in 0..d {
                mx[(i, j)] = gx[j];
            }
            mp[(i, 0)] = gp;
        }
        Ok((mx, mp))
    }

    /// Returns `n_steps + 1` states, the first being `x0`.
    pub fn integrate_trajectory(&self, x0: &[f64], p: &[f64], n_steps: usize) -> Result<Vec<Vec<f64>>> {
        self.check(x0, p)?;
        let mut ws = Rk4Workspace::new(self.dim);
        let mut traj = Vec::with_capacity(n_steps + 1);
        traj.push(x0.to_vec());
        for step in 1..=n_steps {
            let mut next = vec![0.0; self.dim];
            ws.step(&traj[step - 1], p[0], self.dt, &mut next);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { step });
            }
            traj.push(next);
        }
        Ok(traj)
    }
}

#[inline]
fn wrap(i: isize, d: usize) -> usize {
    i.rem_euclid(d as isize) as usize
}

/// Lorenz96 right-hand side with forcing `g`.
#[inline]
pub(crate) fn rhs_into(x: &[f64], g: f64, out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let ip1 = if i + 1 == d { 0 } else { i + 1 };
        let im1 = if i == 0 { d - 1 } else { i - 1 };
        let im2 = if i >= 2 { i - 2 } else { i + d - 2 };
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + g;
    }
}

/// Accumulates `(dF/dx)^T w` at state `x` into `gx`; returns `(dF/dG)^T w`.
#[inline]
fn rhs_vjp_acc(x: &[f64], w: &[f64], gx: &mut [f64]) -> f64 {
    let d = x.len();
    let mut gp = 0.0;
    for i in 0..d {
        let ip1 = if i + 1 == d { 0 } else { i + 1 };
        let im1 = if i == 0 { d - 1 } else { i - 1 };
        let im2 = if i >= 2 { i - 2 } else { i + d - 2 };
        let wi = w[i];
        gx[ip1] += wi * x[im1];
        gx[im2] -= wi * x[im1];
        gx[im1] += wi * (x[ip1] - x[im2]);
        gx[i] -= wi;
        gp += wi;
    }
    gp
}

/// Scratch buffers for one RK4 step. After [`Rk4Workspace::step`] the stage
/// states are retained so that [`Rk4Workspace::vjp`] can differentiate the
/// same step.
#[derive(Debug, Clone)]
pub(crate) struct Rk4Workspace {
    stages: [Vec<f64>; 4],
    k: [Vec<f64>; 4],
    adj: [Vec<f64>; 3],
    w: Vec<f64>,
}

impl Rk4Workspace {
    pub(crate) fn new(d: usize) -> Self {
        let z = || vec![0.0; d];
        Rk4Workspace {
            stages: [z(), z(), z(), z()],
            k: [z(), z(), z(), z()],
            adj: [z(), z(), z()],
            w: z(),
        }
    }

    pub(crate) fn step(&mut self, x: &[f64], g: f64, h: f64, out: &mut [f64]) {
        let d = x.len();
        let [s1, s2, s3, s4] = &mut self.stages;
        let [k1, k2, k3, k4] = &mut self.k;
        s1.copy_from_slice(x);
        rhs_into(s1, g, k1);
        for i in 0..d {
            s2[i] = x[i] + 0.5 * h * k1[i];
        }
        rhs_into(s2, g, k2);
        for i in 0..d {
            s3[i] = x[i] + 0.5 * h * k2[i];
        }
        rhs_into(s3, g, k3);
        for i in 0..d {
            s4[i] = x[i] + h * k3[i];
        }
        rhs_into(s4, g, k4);
        for i in 0..d {
            out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }

    /// Reverse pass through the last `step`: accumulates `(df/dx)^T v` into
    /// `gx` and returns `(df/dG)^T v`.
    pub(crate) fn vjp(&mut self, h: f64, v: &[f64], gx: &mut [f64]) -> f64 {
        let d = v.len();
        let [s1, s2, s3, s4] = &self.stages;
        let [a2, a3, a4] = &mut self.adj;
        let w = &mut self.w;
        for i in 0..d {
            gx[i] += v[i];
        }
        // Stage 4: k4 = F(x + h k3), weight h/6.
        for i in 0..d {
            w[i] = h / 6.0 * v[i];
        }
        a4.iter_mut().for_each(|a| *a = 0.0);
        let mut gp = rhs_vjp_acc(s4, w, a4);
        // The adjoint of k3 collects h/3 v plus h times the stage-4 state adjoint.
        for i in 0..d {
            w[i] = h / 3.0 * v[i] + h * a4[i];
        }
        a3.iter_mut().for_each(|a| *a = 0.0);
        gp += rhs_vjp_acc(s3, w, a3);
        for i in 0..d {
            w[i] = h / 3.0 * v[i] + 0.5 * h * a3[i];
        }
        a2.iter_mut().for_each(|a| *a = 0.0);
        gp += rhs_vjp_acc(s2, w, a2);
        for i in 0..d {
            w[i] = h / 6.0 * v[i] + 0.5 * h * a2[i];
            gx[i] += a4[i] + a3[i] + a2[i];
        }
        gp += rhs_vjp_acc(s1, w, gx);
        gp
    }
}

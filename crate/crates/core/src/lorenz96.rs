//! Lorenz-96 vector field on an `m`-node ring and a fixed-step RK4 integrator.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Header};
use crate::series::Series;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub m: usize,
    pub forcing: f64,
    pub dt: f64,
}

impl ModelParams {
    pub fn new(m: usize, forcing: f64, dt: f64) -> Result<Self> {
        let p = Self { m, forcing, dt };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 4 {
            return Err(Error::invalid(format!("m must be >= 4, got {}", self.m)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !self.forcing.is_finite() {
            return Err(Error::invalid("forcing must be finite"));
        }
        Ok(())
    }

    pub fn with_forcing(self, forcing: f64) -> Self {
        Self { forcing, ..self }
    }
}

impl Default for ModelParams {
    /// The 8-node, F = 8, dt = 0.005 configuration used throughout.
    fn default() -> Self {
        Self {
            m: 8,
            forcing: 8.0,
            dt: 0.005,
        }
    }
}

/// A point on the ring. Node `i` neighbours `i ± 1 (mod m)`.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn uniform(m: usize, value: f64) -> Self {
        Self(vec![value; m])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<Vec<f64>> for StateVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl AsRef<[f64]> for StateVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for StateVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Uniformly sampled model states. State `k` sits at time `t0 + k * dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    states: Series,
    forcing: f64,
    dt: f64,
    t0: f64,
}

impl Trajectory {
    pub fn new(states: Series, forcing: f64, dt: f64, t0: f64) -> Self {
        Self {
            states,
            forcing,
            dt,
            t0,
        }
    }

    pub fn m(&self) -> usize {
        self.states.dim()
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn forcing(&self) -> f64 {
        self.forcing
    }

    pub fn state(&self, k: usize) -> &[f64] {
        self.states.row(k)
    }

    pub fn states(&self) -> &Series {
        &self.states
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn last(&self) -> Option<&[f64]> {
        (!self.is_empty()).then(|| self.state(self.len() - 1))
    }

    pub fn write_csv<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let mut h = Header::new("trajectory");
        h.set(io::CONFIG_HASH_KEY, config_hash)
            .set("m", self.m())
            .set("forcing", io::fmt_f64(self.forcing))
            .set("dt", io::fmt_f64(self.dt))
            .set("t0", io::fmt_f64(self.t0));
        let cols = node_columns(self.m());
        io::write_table(w, &h, &cols, self.states.rows().map(<[f64]>::to_vec))
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, Header)> {
        let t = io::read_table(r)?;
        io::expect_kind(&t.header, "trajectory")?;
        let m: usize = t.header.parse("m")?;
        if t.columns.len() != m {
            return Err(Error::format("trajectory", "column count differs from m"));
        }
        let mut states = Series::with_capacity(m, t.rows.len());
        for row in &t.rows {
            states.push(row);
        }
        let traj = Trajectory::new(
            states,
            t.header.parse("forcing")?,
            t.header.parse("dt")?,
            t.header.parse("t0")?,
        );
        Ok((traj, t.header))
    }
}

pub(crate) fn node_columns(m: usize) -> Vec<String> {
    (1..=m).map(|i| format!("x{i}")).collect()
}

/// Writes `dx/dt` for state `x` into `out`. Both slices must have length `m >= 4`.
#[inline]
pub fn tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let m = x.len();
    debug_assert!(m >= 4 && out.len() == m);
    for i in 0..m {
        let ip1 = if i + 1 == m { 0 } else { i + 1 };
        let im1 = (i + m - 1) % m;
        let im2 = (i + m - 2) % m;
        out[i] = (x[ip1] - x[im2]) * x[im1] - x[i] + forcing;
    }
}

pub fn tendency(x: &StateVector, params: &ModelParams) -> Result<StateVector> {
    check_dim(x.as_slice(), params)?;
    let mut out = vec![0.0; params.m];
    tendency_into(x.as_slice(), params.forcing, &mut out);
    Ok(StateVector(out))
}

/// Reusable stage buffers for allocation-free RK4 stepping.
#[derive(Clone, Debug)]
pub struct Rk4Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Workspace {
    pub fn new(m: usize) -> Self {
        Self {
            k1: vec![0.0; m],
            k2: vec![0.0; m],
            k3: vec![0.0; m],
            k4: vec![0.0; m],
            tmp: vec![0.0; m],
        }
    }

    /// Advances `x` in place by one classical RK4 step.
    pub fn step(&mut self, x: &mut [f64], forcing: f64, dt: f64) {
        let half = 0.5 * dt;
        tendency_into(x, forcing, &mut self.k1);
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k1) {
            *t = xi + half * k;
        }
        tendency_into(&self.tmp, forcing, &mut self.k2);
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k2) {
            *t = xi + half * k;
        }
        tendency_into(&self.tmp, forcing, &mut self.k3);
        for ((t, &xi), &k) in self.tmp.iter_mut().zip(x.iter()).zip(&self.k3) {
            *t = xi + dt * k;
        }
        tendency_into(&self.tmp, forcing, &mut self.k4);
        let sixth = dt / 6.0;
        for i in 0..x.len() {
            x[i] += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

pub fn rk4_step(x: &StateVector, params: &ModelParams) -> Result<StateVector> {
    check_dim(x.as_slice(), params)?;
    let mut out = x.0.clone();
    Rk4Workspace::new(params.m).step(&mut out, params.forcing, params.dt);
    if out.iter().all(|v| v.is_finite()) {
        Ok(StateVector(out))
    } else {
        Err(Error::BlowUp { step: 1 })
    }
}

/// Advances `x0` by `n_steps` and returns only the final state.
pub fn integrate(x0: &StateVector, params: &ModelParams, n_steps: usize) -> Result<StateVector> {
    check_dim(x0.as_slice(), params)?;
    let mut x = x0.0.clone();
    integrate_in_place(&mut x, params, n_steps)?;
    Ok(StateVector(x))
}

pub(crate) fn integrate_in_place(x: &mut [f64], params: &ModelParams, n_steps: usize) -> Result<()> {
    let mut ws = Rk4Workspace::new(params.m);
    for step in 1..=n_steps {
        ws.step(x, params.forcing, params.dt);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp { step });
        }
    }
    Ok(())
}

/// Advances `x0` by `n_steps`, recording `x0` and every intermediate state
/// (`n_steps + 1` states). `t0` is the model time of `x0`.
pub fn integrate_recorded(
    x0: &StateVector,
    params: &ModelParams,
    n_steps: usize,
    t0: f64,
) -> Result<Trajectory> {
    check_dim(x0.as_slice(), params)?;
    let mut states = Series::with_capacity(params.m, n_steps + 1);
    let mut x = x0.0.clone();
    states.push(&x);
    let mut ws = Rk4Workspace::new(params.m);
    for step in 1..=n_steps {
        ws.step(&mut x, params.forcing, params.dt);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::BlowUp { step });
        }
        states.push(&x);
    }
    Ok(Trajectory::new(states, params.forcing, params.dt, t0))
}

/// Spin-up initial condition: the fixed point `F` with `+0.008` on the first node.
pub fn perturbed_fixed_point(params: &ModelParams) -> StateVector {
    let mut x = vec![params.forcing; params.m];
    x[0] += 0.008;
    StateVector(x)
}

fn check_dim(x: &[f64], params: &ModelParams) -> Result<()> {
    if x.len() != params.m {
        return Err(Error::DimensionMismatch {
            expected: params.m,
            got: x.len(),
        });
    }
    Ok(())
}

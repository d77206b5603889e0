//! Local ensemble transform Kalman filter with R-localization and
//! multiplicative inflation.
//!
//! Each grid node gets its own analysis in the `N_e`-dimensional ensemble
//! space. With forecast deviations `X` (m x N_e), observed deviations
//! `Y = H X` and localized precision `R_loc^{-1}` the node solves
//!
//! ```text
//! P~  = [ (N_e - 1)/inflation I + Y^T R_loc^{-1} Y ]^{-1}
//! w   = P~ Y^T R_loc^{-1} (y - H x_mean)
//! W   = [ (N_e - 1) P~ ]^{1/2}              (symmetric square root)
//! x_k = x_mean + X (w + W e_k)
//! ```
//!
//! and keeps only its own row of the result.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{self, Header};
use crate::lorenz96::{self, ModelParams, StateVector, Trajectory};
use crate::osse::{self, ObservationBatch, Observations};
use crate::series::Series;

/// Localization factors below this drop the observation from a node's analysis.
pub const MIN_LOCALIZATION_WEIGHT: f64 = 1e-10;

/// Consecutive cycles above the divergence threshold before aborting.
pub const DIVERGENCE_CYCLES: usize = 100;

/// Ensemble members are the columns of an m x N_e matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: DMatrix<f64>,
    step: usize,
}

impl Ensemble {
    pub fn from_matrix(members: DMatrix<f64>, step: usize) -> Result<Self> {
        if members.ncols() < 2 {
            return Err(Error::invalid("ensemble needs at least two members"));
        }
        Ok(Self { members, step })
    }

    pub fn from_members(members: &[StateVector], step: usize) -> Result<Self> {
        let m = members.first().map_or(0, StateVector::len);
        if let Some(bad) = members.iter().find(|x| x.len() != m) {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: bad.len(),
            });
        }
        let flat: Vec<f64> = members.iter().flat_map(|x| x.as_slice().iter().copied()).collect();
        Self::from_matrix(DMatrix::from_vec(m, members.len(), flat), step)
    }

    /// `center` plus i.i.d. Gaussian noise of standard deviation `std` on
    /// every node of every member.
    pub fn perturbed(center: &[f64], size: usize, std: f64, seed: u64, step: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let members: Vec<StateVector> = (0..size).map(|_| osse::perturb(center, std, &mut rng)).collect();
        Self::from_members(&members, step)
    }

    pub fn m(&self) -> usize {
        self.members.nrows()
    }

    pub fn size(&self) -> usize {
        self.members.ncols()
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.members
    }

    pub fn member(&self, i: usize) -> StateVector {
        self.members.column(i).iter().copied().collect::<Vec<_>>().into()
    }

    pub fn mean(&self) -> DVector<f64> {
        self.members.column_mean()
    }

    /// Deviations from the mean, one column per member.
    pub fn deviations(&self) -> DMatrix<f64> {
        let mean = self.mean();
        let mut x = self.members.clone();
        for mut col in x.column_iter_mut() {
            col -= &mean;
        }
        x
    }

    /// Sample covariance `X X^T / (N_e - 1)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let x = self.deviations();
        &x * x.transpose() / (self.size() as f64 - 1.0)
    }

    /// Trace of the sample covariance.
    pub fn spread(&self) -> f64 {
        self.covariance().trace()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LetkfConfig {
    pub ensemble_size: usize,
    /// Multiplicative factor on the ensemble-space analysis covariance.
    pub inflation: f64,
    /// Denominator of the Gaussian localization exponent, in squared grid
    /// units. `f64::INFINITY` disables localization.
    pub localization_scale: f64,
    /// Model steps between analyses.
    pub assimilation_window: usize,
}

impl Default for LetkfConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 20,
            inflation: 1.05,
            localization_scale: 18.0,
            assimilation_window: 1,
        }
    }
}

impl LetkfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ensemble_size < 2 {
            return Err(Error::invalid("ensemble size must be >= 2"));
        }
        if !(self.inflation >= 1.0) || !self.inflation.is_finite() {
            return Err(Error::invalid("inflation must be >= 1"));
        }
        if !(self.localization_scale > 0.0) {
            return Err(Error::invalid("localization scale must be > 0"));
        }
        if self.assimilation_window == 0 {
            return Err(Error::invalid("assimilation window must be >= 1"));
        }
        Ok(())
    }
}

/// Advances every member by `window` model steps. No additive model error.
pub fn forecast_step(
    ens: &Ensemble,
    params: &ModelParams,
    window: usize,
    exec: Execution,
) -> Result<Ensemble> {
    if window == 0 {
        return Err(Error::invalid("forecast window must be >= 1"));
    }
    if ens.m() != params.m {
        return Err(Error::DimensionMismatch {
            expected: params.m,
            got: ens.m(),
        });
    }
    let m = ens.m();
    let cols = exec.try_map_range(ens.size(), |i| {
        let mut x: Vec<f64> = ens.members.column(i).iter().copied().collect();
        lorenz96::integrate_in_place(&mut x, params, window).map_err(|e| Error::MemberBlowUp {
            member: i,
            source: Box::new(e),
        })?;
        Ok::<_, Error>(x)
    })?;
    let flat: Vec<f64> = cols.into_iter().flatten().collect();
    Ok(Ensemble {
        members: DMatrix::from_vec(m, ens.size(), flat),
        step: ens.step + window,
    })
}

/// Minimal hop count between two nodes on an `m`-node ring.
pub fn ring_distance(i: usize, j: usize, m: usize) -> usize {
    let d = i.abs_diff(j) % m;
    d.min(m - d)
}

/// Factor multiplying `R^{-1}` for an observation at `obs_node` when
/// analysing `grid_node` (both zero-based): `exp(-r^2 / scale)`.
pub fn localization_weight(grid_node: usize, obs_node: usize, m: usize, scale: f64) -> Result<f64> {
    if grid_node >= m || obs_node >= m {
        return Err(Error::invalid(format!(
            "node index out of range for ring of {m}: {grid_node}, {obs_node}"
        )));
    }
    Ok(weight(ring_distance(grid_node, obs_node, m), scale))
}

fn weight(r: usize, scale: f64) -> f64 {
    let r = r as f64;
    (-(r * r) / scale).exp()
}

/// Ensemble-space quantities of one local analysis.
#[derive(Clone, Debug)]
pub struct LocalTransform {
    /// `w` (N_e).
    pub mean_weights: DVector<f64>,
    /// `W = [(N_e - 1) P~]^{1/2}` (N_e x N_e).
    pub transform: DMatrix<f64>,
    /// `P~` (N_e x N_e), inflation included.
    pub covariance: DMatrix<f64>,
}

/// Observation-space data shared by every node's local analysis.
struct ObsSpace {
    /// `H X`, h x N_e.
    y: DMatrix<f64>,
    innovation: DVector<f64>,
    precision: f64,
}

impl ObsSpace {
    fn new(mean: &DVector<f64>, dev: &DMatrix<f64>, batch: &ObservationBatch) -> Result<Self> {
        let op = &batch.operator;
        if op.m() != dev.nrows() {
            return Err(Error::DimensionMismatch {
                expected: dev.nrows(),
                got: op.m(),
            });
        }
        if batch.values.len() != op.h() {
            return Err(Error::DimensionMismatch {
                expected: op.h(),
                got: batch.values.len(),
            });
        }
        if !(batch.error_std > 0.0) {
            return Err(Error::invalid(
                "observation error must be > 0 for assimilation (R would be singular)",
            ));
        }
        let h = op.h();
        let n = dev.ncols();
        let y = DMatrix::from_fn(h, n, |r, c| dev[(op.nodes()[r], c)]);
        let innovation = DVector::from_fn(h, |r, _| batch.values[r] - mean[op.nodes()[r]]);
        Ok(Self {
            y,
            innovation,
            precision: 1.0 / (batch.error_std * batch.error_std),
        })
    }
}

fn local_transform_in(
    space: &ObsSpace,
    batch: &ObservationBatch,
    node: usize,
    cfg: &LetkfConfig,
) -> Result<Option<LocalTransform>> {
    let op = &batch.operator;
    let m = op.m();
    let n = space.y.ncols();
    let mut pinv = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DVector::<f64>::zeros(n);
    let mut used = 0usize;
    for (r, &obs_node) in op.nodes().iter().enumerate() {
        let loc = weight(ring_distance(node, obs_node, m), cfg.localization_scale);
        let w = loc * space.precision;
        if loc < MIN_LOCALIZATION_WEIGHT || w == 0.0 {
            continue;
        }
        used += 1;
        let yr = space.y.row(r);
        // rank-one update with the observed deviation row
        for a in 0..n {
            let wa = w * yr[a];
            rhs[a] += wa * space.innovation[r];
            for b in 0..=a {
                pinv[(a, b)] += wa * yr[b];
            }
        }
    }
    if used == 0 {
        return Ok(None);
    }
    let scaled = (n as f64 - 1.0) / cfg.inflation;
    for a in 0..n {
        pinv[(a, a)] += scaled;
        for b in 0..a {
            pinv[(b, a)] = pinv[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(pinv);
    if eig.eigenvalues.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(Error::DegenerateEnsemble { node });
    }
    let q = &eig.eigenvectors;
    let inv = DVector::from_iterator(n, eig.eigenvalues.iter().map(|l| 1.0 / l));
    let root = inv.map(|l| ((n as f64 - 1.0) * l).sqrt());
    let covariance = q * DMatrix::from_diagonal(&inv) * q.transpose();
    let transform = q * DMatrix::from_diagonal(&root) * q.transpose();
    let mean_weights = &covariance * rhs;
    Ok(Some(LocalTransform {
        mean_weights,
        transform,
        covariance,
    }))
}

/// Ensemble-space analysis for one grid node; `None` when no observation
/// carries weight there.
pub fn local_transform(
    ens: &Ensemble,
    batch: &ObservationBatch,
    node: usize,
    cfg: &LetkfConfig,
) -> Result<Option<LocalTransform>> {
    if node >= ens.m() {
        return Err(Error::invalid(format!("node {node} outside ring of {}", ens.m())));
    }
    let space = ObsSpace::new(&ens.mean(), &ens.deviations(), batch)?;
    local_transform_in(&space, batch, node, cfg)
}

pub fn analysis_step(
    ens: &Ensemble,
    batch: &ObservationBatch,
    cfg: &LetkfConfig,
    exec: Execution,
) -> Result<Ensemble> {
    if batch.step != ens.step {
        return Err(Error::invalid(format!(
            "observation at step {} but ensemble at step {}",
            batch.step, ens.step
        )));
    }
    let mean = ens.mean();
    let dev = ens.deviations();
    let space = ObsSpace::new(&mean, &dev, batch)?;
    let n = ens.size();
    let rows = exec.try_map_range(ens.m(), |node| {
        let Some(t) = local_transform_in(&space, batch, node, cfg)? else {
            return Ok::<_, Error>(ens.members.row(node).iter().copied().collect::<Vec<_>>());
        };
        let xi = dev.row(node);
        Ok((0..n)
            .map(|k| {
                let mut v = mean[node];
                for j in 0..n {
                    v += xi[j] * (t.mean_weights[j] + t.transform[(j, k)]);
                }
                v
            })
            .collect())
    })?;
    let members = DMatrix::from_fn(ens.m(), n, |i, k| rows[i][k]);
    Ok(Ensemble {
        members,
        step: ens.step,
    })
}

/// Per-cycle analysis means (and optionally full ensembles).
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisSeries {
    pub first_step: usize,
    pub window: usize,
    pub means: Series,
    pub ensembles: Option<Vec<DMatrix<f64>>>,
    pub ensemble_size: usize,
    pub inflation: f64,
    pub localization_scale: f64,
}

impl AnalysisSeries {
    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn m(&self) -> usize {
        self.means.dim()
    }

    pub fn step_of(&self, cycle: usize) -> usize {
        self.first_step + cycle * self.window
    }

    pub fn cycle_of(&self, step: usize) -> Option<usize> {
        if step < self.first_step || (step - self.first_step) % self.window != 0 {
            return None;
        }
        let c = (step - self.first_step) / self.window;
        (c < self.len()).then_some(c)
    }

    pub fn mean_at_step(&self, step: usize) -> Option<&[f64]> {
        self.cycle_of(step).map(|c| self.means.row(c))
    }

    pub fn write_csv<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let mut h = Header::new("analysis");
        h.set(io::CONFIG_HASH_KEY, config_hash)
            .set("m", self.m())
            .set("first_step", self.first_step)
            .set("window", self.window)
            .set("ensemble_size", self.ensemble_size)
            .set("inflation", io::fmt_f64(self.inflation))
            .set("localization_scale", io::fmt_f64(self.localization_scale));
        let cols = lorenz96::node_columns(self.m());
        io::write_table(w, &h, &cols, self.means.rows().map(<[f64]>::to_vec))
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, Header)> {
        let t = io::read_table(r)?;
        io::expect_kind(&t.header, "analysis")?;
        let m: usize = t.header.parse("m")?;
        if t.columns.len() != m {
            return Err(Error::format("analysis", "column count differs from m"));
        }
        let mut means = Series::with_capacity(m, t.rows.len());
        for row in &t.rows {
            means.push(row);
        }
        let a = AnalysisSeries {
            first_step: t.header.parse("first_step")?,
            window: t.header.parse("window")?,
            means,
            ensembles: None,
            ensemble_size: t.header.parse("ensemble_size")?,
            inflation: t.header.parse("inflation")?,
            localization_scale: t.header.parse("localization_scale")?,
        };
        Ok((a, t.header))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct AssimilationOptions<'a> {
    /// Nature run indexed by model step, enables divergence detection.
    pub truth: Option<&'a Trajectory>,
    pub keep_ensembles: bool,
    pub exec: Execution,
}

/// Alternates forecasts over each assimilation window with analyses at
/// every observation batch.
pub fn run_assimilation(
    obs: &Observations,
    params: &ModelParams,
    cfg: &LetkfConfig,
    initial: Ensemble,
    opts: AssimilationOptions<'_>,
) -> Result<AnalysisSeries> {
    cfg.validate()?;
    params.validate()?;
    if obs.is_empty() {
        return Err(Error::invalid("no observations to assimilate"));
    }
    if initial.size() != cfg.ensemble_size {
        return Err(Error::invalid(format!(
            "initial ensemble has {} members, config expects {}",
            initial.size(),
            cfg.ensemble_size
        )));
    }
    if obs.len() > 1 && obs.schedule.frequency != cfg.assimilation_window {
        return Err(Error::invalid(format!(
            "observation frequency {} differs from assimilation window {}",
            obs.schedule.frequency, cfg.assimilation_window
        )));
    }
    let first_step = obs.batches[0].step;
    if initial.step() > first_step {
        return Err(Error::invalid("initial ensemble is later than the first observation"));
    }

    let threshold = opts.truth.map(|t| 10.0 * climatological_std(t));
    let mut above = 0usize;
    let mut means = Series::with_capacity(params.m, obs.len());
    let mut ensembles = opts.keep_ensembles.then(Vec::new);
    let mut ens = initial;
    let mut prev_step: Option<usize> = None;
    for batch in &obs.batches {
        if let Some(p) = prev_step {
            if batch.step <= p {
                return Err(Error::invalid("observations are not sorted by step"));
            }
        }
        prev_step = Some(batch.step);
        if batch.step > ens.step() {
            ens = forecast_step(&ens, params, batch.step - ens.step(), opts.exec)?;
        }
        ens = analysis_step(&ens, batch, cfg, opts.exec)?;
        let mean = ens.mean();
        means.push(mean.as_slice());
        if let Some(e) = ensembles.as_mut() {
            e.push(ens.matrix().clone());
        }
        if let (Some(thr), Some(truth)) = (threshold, opts.truth) {
            if batch.step < truth.len() {
                let rmse = rmse(mean.as_slice(), truth.state(batch.step));
                if rmse > thr {
                    above += 1;
                    if above >= DIVERGENCE_CYCLES {
                        return Err(Error::FilterDivergence {
                            step: batch.step,
                            rmse,
                            threshold: thr,
                            cycles: above,
                        });
                    }
                } else {
                    above = 0;
                }
            }
        }
    }
    Ok(AnalysisSeries {
        first_step,
        window: obs.schedule.frequency,
        means,
        ensembles,
        ensemble_size: cfg.ensemble_size,
        inflation: cfg.inflation,
        localization_scale: cfg.localization_scale,
    })
}

/// Standard deviation of all node values of a trajectory.
pub fn climatological_std(t: &Trajectory) -> f64 {
    let v = t.states().as_flat();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

pub(crate) fn rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

//! The three prediction frameworks and the mean-RMSE skill metric.
//!
//! | framework | initial value       | predictor                    |
//! |-----------|---------------------|------------------------------|
//! | LETKF-Ext | analysis mean       | the (possibly biased) model  |
//! | RC-Obs    | raw observation     | reservoir trained on obs     |
//! | RC-Anl    | analysis mean       | reservoir trained on analyses|
//!
//! All frameworks forecast from the same initial steps so their prediction
//! sets cover identical truth slices.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::io::{self, Header};
use crate::letkf::AnalysisSeries;
use crate::lorenz96::{self, ModelParams, Trajectory};
use crate::osse::Observations;
use crate::reservoir::{self, ReservoirNet, ReservoirParams};
use crate::series::Series;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    LetkfExt,
    RcObs,
    RcAnl,
}

impl Framework {
    pub const ALL: [Framework; 3] = [Framework::LetkfExt, Framework::RcObs, Framework::RcAnl];

    pub fn label(self) -> &'static str {
        match self {
            Framework::LetkfExt => "LETKF-Ext",
            Framework::RcObs => "RC-Obs",
            Framework::RcAnl => "RC-Anl",
        }
    }
}

impl std::fmt::Display for Framework {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Framework {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "letkf-ext" => Ok(Framework::LetkfExt),
            "rc-obs" => Ok(Framework::RcObs),
            "rc-anl" => Ok(Framework::RcAnl),
            _ => Err(Error::invalid(format!("unknown framework `{s}`"))),
        }
    }
}

/// One forecast and the nature-run segment it is scored against.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub initial_step: usize,
    /// Model steps between consecutive predicted states.
    pub stride: usize,
    pub predicted: Series,
    pub truth: Series,
}

impl PredictionSet {
    fn new(initial_step: usize, stride: usize, predicted: Series, truth: Series) -> Result<Self> {
        if predicted.len() != truth.len() || predicted.dim() != truth.dim() {
            return Err(Error::invalid("prediction and truth slices differ in shape"));
        }
        Ok(Self {
            initial_step,
            stride,
            predicted,
            truth,
        })
    }

    pub fn horizon(&self) -> usize {
        self.predicted.len()
    }
}

/// Evaluation layout: the last `n_sets * set_length` steps of the nature run
/// are cut into equal sets, and the `train_steps` steps just before them
/// form the training period. Each set spends `rc_spinup` observation
/// intervals synchronising the reservoir and forecasts from there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub total_steps: usize,
    pub train_steps: usize,
    pub n_sets: usize,
    pub set_length: usize,
    /// Forecast length in model steps.
    pub horizon: usize,
    pub washout: usize,
    /// Spin-up length in observation intervals.
    pub rc_spinup: usize,
    /// Observation interval in model steps.
    pub frequency: usize,
}

impl EvalProtocol {
    pub fn eval_start(&self) -> usize {
        self.total_steps.saturating_sub(self.n_sets * self.set_length)
    }

    pub fn train_start(&self) -> usize {
        self.eval_start().saturating_sub(self.train_steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_sets == 0 {
            return Err(Error::invalid("n_sets must be >= 1"));
        }
        if self.frequency == 0 {
            return Err(Error::invalid("frequency must be >= 1"));
        }
        if self.train_steps + self.n_sets * self.set_length > self.total_steps {
            return Err(Error::invalid(format!(
                "training ({}) plus evaluation ({} x {}) exceeds the {}-step nature run",
                self.train_steps, self.n_sets, self.set_length, self.total_steps
            )));
        }
        let set = self.set_length;
        if set < self.rc_spinup * self.frequency + self.horizon {
            return Err(Error::invalid(format!(
                "evaluation sets of {set} steps cannot hold a {}-interval spin-up and a {}-step horizon",
                self.rc_spinup, self.horizon
            )));
        }
        for (name, v) in [
            ("evaluation start", self.eval_start()),
            ("train_steps", self.train_steps),
            ("set length", set),
            ("horizon", self.horizon),
        ] {
            if v % self.frequency != 0 {
                return Err(Error::invalid(format!(
                    "{name} ({v}) is not a multiple of the observation frequency {}",
                    self.frequency
                )));
            }
        }
        if self.horizon == 0 {
            return Err(Error::invalid("horizon must be >= 1"));
        }
        Ok(())
    }

    /// Forecast start of every set; shared by all frameworks.
    pub fn initial_steps(&self) -> Vec<usize> {
        let start = self.eval_start();
        (0..self.n_sets)
            .map(|i| start + i * self.set_length + self.rc_spinup * self.frequency)
            .collect()
    }
}

fn truth_slice(truth: &Trajectory, start: usize, stride: usize, count: usize, cols: Option<&[usize]>) -> Result<Series> {
    let last = start + stride * count;
    if last >= truth.len() {
        return Err(Error::Missing(format!(
            "nature run ends at step {} but forecast needs step {last}",
            truth.len() - 1
        )));
    }
    let dim = cols.map_or(truth.m(), <[usize]>::len);
    let mut s = Series::with_capacity(dim, count);
    for k in 1..=count {
        let x = truth.state(start + k * stride);
        match cols {
            None => s.push(x),
            Some(c) => s.push(&c.iter().map(|&i| x[i]).collect::<Vec<_>>()),
        }
    }
    Ok(s)
}

/// Free model runs from the analysis mean at each initial step.
pub fn letkf_ext(
    analysis: &AnalysisSeries,
    model: &ModelParams,
    truth: &Trajectory,
    initial_steps: &[usize],
    horizon: usize,
    exec: Execution,
) -> Result<Vec<PredictionSet>> {
    model.validate()?;
    exec.try_map_range(initial_steps.len(), |i| {
        let start = initial_steps[i];
        let x0 = analysis
            .mean_at_step(start)
            .ok_or_else(|| Error::Missing(format!("no analysis at step {start}")))?;
        let run = lorenz96::integrate_recorded(&x0.to_vec().into(), model, horizon, 0.0)?;
        let predicted = run.states().slice(1, horizon + 1);
        PredictionSet::new(start, 1, predicted, truth_slice(truth, start, 1, horizon, None)?)
    })
}

/// A trained reservoir and its prediction sets.
#[derive(Debug)]
pub struct RcOutcome {
    pub net: ReservoirNet,
    pub sets: Vec<PredictionSet>,
}

/// Trains on the observed series over the training period and predicts the
/// observed components of every evaluation set.
pub fn rc_obs(
    obs: &Observations,
    truth: &Trajectory,
    rc: &ReservoirParams,
    protocol: &EvalProtocol,
    seed: u64,
    exec: Execution,
) -> Result<RcOutcome> {
    protocol.validate()?;
    if obs.schedule.frequency != protocol.frequency {
        return Err(Error::invalid("observation frequency differs from protocol frequency"));
    }
    let params = ReservoirParams {
        input_dim: obs.operator.h(),
        ..*rc
    };
    let range = training_range(obs.batches.iter().map(|b| b.step), protocol);
    let net = train_net(&params, seed, &obs.as_series(), range, protocol.washout, exec)?;
    let sets = rc_obs_sets(&net, obs, truth, protocol, exec)?;
    Ok(RcOutcome { net, sets })
}

/// Prediction sets of an already trained RC-Obs network.
pub fn rc_obs_sets(
    net: &ReservoirNet,
    obs: &Observations,
    truth: &Trajectory,
    protocol: &EvalProtocol,
    exec: Execution,
) -> Result<Vec<PredictionSet>> {
    protocol.validate()?;
    let index_of = |step: usize| -> Result<usize> {
        obs.at_step(step)
            .map(|_| (step - obs.schedule.start_step) / obs.schedule.frequency)
            .ok_or_else(|| Error::Missing(format!("no observation at step {step}")))
    };
    let nodes = obs.operator.nodes().to_vec();
    predict_sets(net, &obs.as_series(), protocol, &index_of, truth, Some(&nodes), exec)
}

/// Trains on analysis means over the training period; spins up on the
/// analyses preceding each initial step and predicts the full state.
pub fn rc_anl(
    analysis: &AnalysisSeries,
    truth: &Trajectory,
    rc: &ReservoirParams,
    protocol: &EvalProtocol,
    seed: u64,
    exec: Execution,
) -> Result<RcOutcome> {
    protocol.validate()?;
    if analysis.window != protocol.frequency {
        return Err(Error::invalid("analysis window differs from protocol frequency"));
    }
    let params = ReservoirParams {
        input_dim: analysis.m(),
        ..*rc
    };
    let range = training_range((0..analysis.len()).map(|c| analysis.step_of(c)), protocol);
    let net = train_net(&params, seed, &analysis.means, range, protocol.washout, exec)?;
    let sets = rc_anl_sets(&net, analysis, truth, protocol, exec)?;
    Ok(RcOutcome { net, sets })
}

/// Prediction sets of an already trained RC-Anl network.
pub fn rc_anl_sets(
    net: &ReservoirNet,
    analysis: &AnalysisSeries,
    truth: &Trajectory,
    protocol: &EvalProtocol,
    exec: Execution,
) -> Result<Vec<PredictionSet>> {
    protocol.validate()?;
    let index_of = |step: usize| -> Result<usize> {
        analysis
            .cycle_of(step)
            .ok_or_else(|| Error::Missing(format!("no analysis at step {step}")))
    };
    predict_sets(net, &analysis.means, protocol, &index_of, truth, None, exec)
}

/// Index range of the entries whose step falls in the training period.
fn training_range(steps: impl Iterator<Item = usize>, protocol: &EvalProtocol) -> std::ops::Range<usize> {
    let (lo, hi) = (protocol.train_start(), protocol.eval_start());
    let mut start = None;
    let mut end = 0;
    for (i, s) in steps.enumerate() {
        if s >= hi {
            break;
        }
        if s >= lo && start.is_none() {
            start = Some(i);
        }
        end = i + 1;
    }
    start.unwrap_or(end)..end
}

fn train_net(
    params: &ReservoirParams,
    seed: u64,
    series: &Series,
    range: std::ops::Range<usize>,
    washout: usize,
    exec: Execution,
) -> Result<ReservoirNet> {
    if range.len() < washout + 2 {
        return Err(Error::invalid(format!(
            "training series of {} steps is shorter than washout + 2 ({})",
            range.len(),
            washout + 2
        )));
    }
    let mut net = reservoir::init_network(params, seed)?;
    net.train(range.map(|k| series.row(k)), washout, exec)?;
    Ok(net)
}

fn predict_sets(
    net: &ReservoirNet,
    inputs: &Series,
    protocol: &EvalProtocol,
    index_of: &(dyn Fn(usize) -> Result<usize> + Sync),
    truth: &Trajectory,
    cols: Option<&[usize]>,
    exec: Execution,
) -> Result<Vec<PredictionSet>> {
    let starts = protocol.initial_steps();
    let n = protocol.frequency;
    let rc_horizon = protocol.horizon / n;
    exec.try_map_range(starts.len(), |i| {
        let start = starts[i];
        let k0 = index_of(start)?;
        if k0 < protocol.rc_spinup {
            return Err(Error::Missing(format!("not enough history before step {start}")));
        }
        let r0 = net.spin_up((k0 - protocol.rc_spinup..k0).map(|k| inputs.row(k)))?;
        let predicted = net.predict(&r0, inputs.row(k0), rc_horizon)?;
        PredictionSet::new(start, n, predicted, truth_slice(truth, start, n, rc_horizon, cols)?)
    })
}

/// Forecasts that always predict `mean` (reference curve).
pub fn climatology_sets(
    truth: &Trajectory,
    mean: &[f64],
    initial_steps: &[usize],
    horizon: usize,
) -> Result<Vec<PredictionSet>> {
    initial_steps
        .iter()
        .map(|&start| {
            let t = truth_slice(truth, start, 1, horizon, None)?;
            let mut p = Series::with_capacity(mean.len(), horizon);
            for _ in 0..horizon {
                p.push(mean);
            }
            PredictionSet::new(start, 1, p, t)
        })
        .collect()
}

/// mRMSE as a function of lead, in model steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkillSeries {
    pub leads: Vec<usize>,
    pub mrmse: Vec<f64>,
    pub n_sets: usize,
    /// Number of state components scored.
    pub dim: usize,
}

impl SkillSeries {
    pub fn at_lead(&self, lead: usize) -> Option<f64> {
        self.leads.iter().position(|&l| l == lead).map(|i| self.mrmse[i])
    }
}

/// Set-averaged RMSE over components at every lead.
pub fn mrmse(sets: &[PredictionSet]) -> Result<SkillSeries> {
    let first = sets.first().ok_or_else(|| Error::invalid("no prediction sets to score"))?;
    let (horizon, dim, stride) = (first.horizon(), first.predicted.dim(), first.stride);
    if sets
        .iter()
        .any(|s| s.horizon() != horizon || s.predicted.dim() != dim || s.stride != stride)
    {
        return Err(Error::invalid("prediction sets differ in horizon, stride or dimension"));
    }
    let mut acc = vec![0.0; horizon];
    for s in sets {
        for (t, a) in acc.iter_mut().enumerate() {
            let sq: f64 = s
                .predicted
                .row(t)
                .iter()
                .zip(s.truth.row(t))
                .map(|(u, x)| (u - x).powi(2))
                .sum();
            *a += (sq / dim as f64).sqrt();
        }
    }
    let n = sets.len() as f64;
    Ok(SkillSeries {
        leads: (1..=horizon).map(|t| t * stride).collect(),
        mrmse: acc.into_iter().map(|v| v / n).collect(),
        n_sets: sets.len(),
        dim,
    })
}

/// Writes labelled skill series side by side, keyed by lead step. Leads
/// missing from a series are written as NaN.
pub fn write_skill_csv<W: Write>(w: W, header: &Header, columns: &[(String, &SkillSeries)]) -> Result<()> {
    let leads: BTreeSet<usize> = columns.iter().flat_map(|(_, s)| s.leads.iter().copied()).collect();
    let mut names = vec!["lead".to_string()];
    names.extend(columns.iter().map(|(n, _)| n.clone()));
    let mut h = header.clone();
    if h.get("kind").is_none() {
        h.set("kind", "skill");
    }
    for (name, s) in columns {
        h.set(&format!("n_sets[{name}]"), s.n_sets)
            .set(&format!("dim[{name}]"), s.dim);
    }
    let rows = leads.into_iter().map(|lead| {
        let mut row = vec![lead as f64];
        row.extend(columns.iter().map(|(_, s)| s.at_lead(lead).unwrap_or(f64::NAN)));
        row
    });
    io::write_table(w, &h, &names, rows)
}

/// Inverse of [`write_skill_csv`]: `(label, series)` per column.
pub fn read_skill_csv<R: BufRead>(r: R) -> Result<(Vec<(String, SkillSeries)>, Header)> {
    let t = io::read_table(r)?;
    if t.columns.first().map(String::as_str) != Some("lead") {
        return Err(Error::format("skill table", "first column must be `lead`"));
    }
    let mut out = Vec::new();
    for (c, name) in t.columns.iter().enumerate().skip(1) {
        let (leads, vals): (Vec<usize>, Vec<f64>) = t
            .rows
            .iter()
            .filter(|row| !row[c].is_nan())
            .map(|row| (row[0] as usize, row[c]))
            .unzip();
        let n_sets = t.header.parse(&format!("n_sets[{name}]")).unwrap_or(0);
        let dim = t.header.parse(&format!("dim[{name}]")).unwrap_or(0);
        out.push((
            name.clone(),
            SkillSeries {
                leads,
                mrmse: vals,
                n_sets,
                dim,
            },
        ));
    }
    Ok((out, t.header))
}

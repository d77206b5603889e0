//! Nature run generation and synthetic observations for twin experiments.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Header};
use crate::lorenz96::{self, ModelParams, StateVector, Trajectory};
use crate::series::Series;

/// Spins the model up from the perturbed fixed point and records `run_steps`
/// states, the first of which is the state reached after spin-up.
pub fn generate_nature_run(
    params: &ModelParams,
    spinup_steps: usize,
    run_steps: usize,
) -> Result<Trajectory> {
    params.validate()?;
    if run_steps == 0 {
        return Err(Error::invalid("nature run needs at least one state"));
    }
    let x0 = lorenz96::integrate(&lorenz96::perturbed_fixed_point(params), params, spinup_steps)?;
    let t0 = spinup_steps as f64 * params.dt;
    lorenz96::integrate_recorded(&x0, params, run_steps - 1, t0).map_err(|e| match e {
        Error::BlowUp { step } => Error::BlowUp {
            step: step + spinup_steps,
        },
        other => other,
    })
}

/// Selection operator `H` (h x m, one unit entry per row). Nodes are stored
/// zero-based; files and configs use one-based node numbers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationOperator {
    nodes: Vec<usize>,
    m: usize,
}

impl ObservationOperator {
    pub fn new(nodes: Vec<usize>, m: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::invalid("observation operator needs at least one node"));
        }
        let mut seen = vec![false; m];
        for &n in &nodes {
            if n >= m {
                return Err(Error::invalid(format!("observed node {} outside ring of {m}", n + 1)));
            }
            if std::mem::replace(&mut seen[n], true) {
                return Err(Error::invalid(format!("observed node {} listed twice", n + 1)));
            }
        }
        Ok(Self { nodes, m })
    }

    pub fn from_one_based(nodes: &[usize], m: usize) -> Result<Self> {
        if nodes.contains(&0) {
            return Err(Error::invalid("node numbers are one-based"));
        }
        Self::new(nodes.iter().map(|n| n - 1).collect(), m)
    }

    pub fn full(m: usize) -> Self {
        Self {
            nodes: (0..m).collect(),
            m,
        }
    }

    /// `h` nodes spread evenly around the ring: node `floor(k m / h)` for
    /// `k = 0..h`, so `h = 4, m = 8` observes {1, 3, 5, 7} and `h = 7` drops
    /// node 8.
    pub fn evenly_spaced(h: usize, m: usize) -> Result<Self> {
        if h == 0 || h > m {
            return Err(Error::invalid(format!("cannot observe {h} of {m} nodes")));
        }
        Self::new((0..h).map(|k| k * m / h).collect(), m)
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.nodes.iter().map(|n| n + 1).collect()
    }

    pub fn h(&self) -> usize {
        self.nodes.len()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// `H x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.nodes.iter().map(|&n| x[n]).collect()
    }

    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        let mut h = nalgebra::DMatrix::zeros(self.h(), self.m);
        for (row, &n) in self.nodes.iter().enumerate() {
            h[(row, n)] = 1.0;
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObsSchedule {
    pub frequency: usize,
    pub start_step: usize,
    /// Inclusive.
    pub end_step: usize,
}

impl ObsSchedule {
    pub fn new(frequency: usize, start_step: usize, end_step: usize) -> Result<Self> {
        if frequency == 0 {
            return Err(Error::invalid("observation frequency must be >= 1"));
        }
        if end_step < start_step {
            return Err(Error::invalid("observation schedule ends before it starts"));
        }
        Ok(Self {
            frequency,
            start_step,
            end_step,
        })
    }

    pub fn count(&self) -> usize {
        (self.end_step - self.start_step) / self.frequency + 1
    }

    pub fn steps(&self) -> impl Iterator<Item = usize> {
        (self.start_step..=self.end_step).step_by(self.frequency)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationBatch {
    pub step: usize,
    pub values: Vec<f64>,
    pub operator: Arc<ObservationOperator>,
    /// Noise standard deviation `e`; the filter uses `R = e^2 I`.
    pub error_std: f64,
}

/// All batches drawn from one `observe` call.
#[derive(Clone, Debug, PartialEq)]
pub struct Observations {
    pub operator: Arc<ObservationOperator>,
    pub error_std: f64,
    pub schedule: ObsSchedule,
    pub seed: u64,
    pub batches: Vec<ObservationBatch>,
}

pub fn observe(
    truth: &Trajectory,
    op: &ObservationOperator,
    sched: &ObsSchedule,
    error_std: f64,
    seed: u64,
) -> Result<Observations> {
    if op.m() != truth.m() {
        return Err(Error::DimensionMismatch {
            expected: truth.m(),
            got: op.m(),
        });
    }
    if !(error_std >= 0.0) {
        return Err(Error::invalid("observation error must be >= 0"));
    }
    if sched.frequency == 0 {
        return Err(Error::invalid("observation frequency must be >= 1"));
    }
    if sched.end_step >= truth.len() {
        return Err(Error::invalid(format!(
            "schedule ends at step {} but truth has {} states",
            sched.end_step,
            truth.len()
        )));
    }
    let operator = Arc::new(op.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = sched
        .steps()
        .map(|step| {
            let x = truth.state(step);
            let values = op
                .nodes()
                .iter()
                .map(|&n| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[n] + error_std * z
                })
                .collect();
            ObservationBatch {
                step,
                values,
                operator: Arc::clone(&operator),
                error_std,
            }
        })
        .collect();
    Ok(Observations {
        operator,
        error_std,
        schedule: *sched,
        seed,
        batches,
    })
}

impl Observations {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    /// Batch observed at model step `step`, if the schedule hits it.
    pub fn at_step(&self, step: usize) -> Option<&ObservationBatch> {
        let s = &self.schedule;
        if step < s.start_step || step > s.end_step || (step - s.start_step) % s.frequency != 0 {
            return None;
        }
        self.batches.get((step - s.start_step) / s.frequency)
    }

    pub fn as_series(&self) -> Series {
        let mut s = Series::with_capacity(self.operator.h(), self.len());
        for b in &self.batches {
            s.push(&b.values);
        }
        s
    }

    pub fn write_csv<W: Write>(&self, w: W, config_hash: &str) -> Result<()> {
        let mut h = Header::new("observations");
        let nodes = self
            .operator
            .one_based()
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        h.set(io::CONFIG_HASH_KEY, config_hash)
            .set("m", self.operator.m())
            .set("error_std", io::fmt_f64(self.error_std))
            .set("frequency", self.schedule.frequency)
            .set("start_step", self.schedule.start_step)
            .set("end_step", self.schedule.end_step)
            .set("observed_nodes", nodes)
            .set("seed", self.seed);
        let cols = ["step_index", "node_index", "value"].map(String::from);
        let rows = self.batches.iter().flat_map(|b| {
            self.operator
                .one_based()
                .into_iter()
                .zip(b.values.iter())
                .map(move |(n, &v)| vec![b.step as f64, n as f64, v])
                .collect::<Vec<_>>()
        });
        io::write_table(w, &h, &cols, rows)
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, Header)> {
        let t = io::read_table(r)?;
        io::expect_kind(&t.header, "observations")?;
        let m: usize = t.header.parse("m")?;
        let nodes = t
            .header
            .require("observed_nodes")?
            .split_whitespace()
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("observations", e.to_string()))?;
        let operator = Arc::new(ObservationOperator::from_one_based(&nodes, m)?);
        let schedule = ObsSchedule::new(
            t.header.parse("frequency")?,
            t.header.parse("start_step")?,
            t.header.parse("end_step")?,
        )?;
        let error_std: f64 = t.header.parse("error_std")?;
        let h = operator.h();
        if t.rows.len() != schedule.count() * h {
            return Err(Error::format("observations", "row count does not match schedule"));
        }
        let batches = t
            .rows
            .chunks(h)
            .zip(schedule.steps())
            .map(|(chunk, step)| {
                if chunk.iter().any(|r| r[0] as usize != step) {
                    return Err(Error::format("observations", format!("rows out of order near step {step}")));
                }
                Ok(ObservationBatch {
                    step,
                    values: chunk.iter().map(|r| r[2]).collect(),
                    operator: Arc::clone(&operator),
                    error_std,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let obs = Observations {
            operator,
            error_std,
            schedule,
            seed: t.header.parse("seed")?,
            batches,
        };
        Ok((obs, t.header))
    }
}

/// Convenience: a fresh perturbed copy of `x` for ensemble initialisation.
pub(crate) fn perturb(x: &[f64], std: f64, rng: &mut ChaCha8Rng) -> StateVector {
    x.iter()
        .map(|&v| {
            let z: f64 = StandardNormal.sample(rng);
            v + std * z
        })
        .collect::<Vec<_>>()
        .into()
}

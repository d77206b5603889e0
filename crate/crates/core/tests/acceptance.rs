//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Experiment criteria run the desk-scale presets (full training length,
//! 20 evaluation sets, full-size reservoir) and take about a quarter of an
//! hour on one core in the optimized test profile.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::DVector;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use osse_lab::forecast::{self, Framework, PredictionSet};
use osse_lab::harness::{ExperimentConfig, RunArtifact, RunOptions, Runner};
use osse_lab::letkf::{self, LetkfConfig};
use osse_lab::lorenz96::{self, ModelParams, StateVector};
use osse_lab::osse::{ObsSchedule, ObservationBatch};
use osse_lab::reservoir::{self, ReservoirParams, ReservoirState, TrainAccumulator};
use osse_lab::{Execution, Series};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rk4_order() -> Outcome {
    let p = ModelParams::default();
    let x0 = lorenz96::integrate(&lorenz96::perturbed_fixed_point(&p), &p, 20_000).map_err(|e| e.to_string())?;
    let at_one = |dt: f64| {
        let q = ModelParams { dt, ..p };
        lorenz96::integrate(&x0, &q, (1.0 / dt).round() as usize).unwrap()
    };
    let reference = at_one(0.00025);
    let dts = [0.01, 0.005, 0.0025];
    let errs: Vec<f64> = dts
        .iter()
        .map(|&dt| {
            let x = at_one(dt);
            x.as_slice()
                .iter()
                .zip(reference.as_slice())
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    // least-squares slope of log(err) against log(dt)
    let lx: Vec<f64> = dts.iter().map(|d| d.ln()).collect();
    let ly: Vec<f64> = errs.iter().map(|e| e.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / 3.0, ly.iter().sum::<f64>() / 3.0);
    let slope = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>()
        / lx.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    check((3.7..=4.3).contains(&slope), format!("order {slope:.3} in [3.7, 4.3]"))
}

fn letkf_equals_kf() -> Outcome {
    let (mean, cov) = common::kf_oracle_worst(Execution::default());
    check(
        mean <= 1e-8 && cov <= 1e-8,
        format!("50 ensembles: worst mean rel err {mean:.1e}, covariance {cov:.1e} (limit 1e-8)"),
    )
}

fn reservoir_construction() -> Outcome {
    let p = ReservoirParams::default();
    let net = reservoir::init_network(&p, 2024).map_err(|e| e.to_string())?;
    let w_in = net.input_triplets();
    let mut rows: Vec<usize> = w_in.iter().map(|t| t.0).collect();
    rows.sort_unstable();
    rows.dedup();
    let one_per_row = w_in.len() == p.size && rows.len() == p.size;
    let in_range = w_in.iter().all(|t| t.2.abs() <= 0.5);
    let n = p.size as f64;
    let nnz = net.adjacency().nnz() as f64;
    let mean = p.density * n * n;
    let sigmas = (nnz - mean).abs() / (mean * (1.0 - p.density)).sqrt();
    let rho = perron_root(net.adjacency());
    check(
        one_per_row && in_range && sigmas <= 5.0 && (rho - 0.1).abs() <= 1e-6,
        format!(
            "D_r=5000: spectral radius {rho:.9}, W_in one nonzero per row {one_per_row} within [-0.5, 0.5] {in_range}, nnz {nnz} is {sigmas:.2} sigma from {mean:.0}"
        ),
    )
}

/// Averaged log-growth of power iteration on `A^T`.
fn perron_root(a: &reservoir::SparseMatrix) -> f64 {
    let n = a.nrows();
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, c, v) in a.triplets() {
        cols[c].push((r, v));
    }
    let step = |x: &[f64]| -> (Vec<f64>, f64) {
        let y: Vec<f64> = cols.iter().map(|c| c.iter().map(|&(r, v)| v * x[r]).sum()).collect();
        let s = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        (y.into_iter().map(|v| v / s).collect(), s)
    };
    let mut x = vec![1.0 / (n as f64).sqrt(); n];
    for _ in 0..2000 {
        x = step(&x).0;
    }
    let mut log = 0.0;
    for _ in 0..4000 {
        let (y, s) = step(&x);
        log += s.ln();
        x = y;
    }
    (log / 4000.0).exp()
}

fn ridge_oracle() -> Outcome {
    let p = ReservoirParams {
        size: 200,
        input_dim: 3,
        density: 0.02,
        ..Default::default()
    };
    let series = common::random_series(1, 3, 500);
    let mut net = reservoir::init_network(&p, 5).map_err(|e| e.to_string())?;
    net.train(series.rows(), 100, Execution::default()).map_err(|e| e.to_string())?;
    let (f, u) = common::teacher_forced(&net, &series, 100);
    let stream = common::rel_err(&common::readout_matrix(&net), &common::batch_ridge(&f, &u, p.ridge));

    let fit = ReservoirParams {
        size: 40,
        input_dim: 2,
        density: 0.05,
        ridge: 1e-12,
        ..Default::default()
    };
    let net = reservoir::init_network(&fit, 8).map_err(|e| e.to_string())?;
    let c = nalgebra::DMatrix::from_fn(5, 40, |i, j| ((i * 40 + j) as f64 * 0.37).sin());
    let drive = common::random_series(3, 2, 3000);
    let mut acc = TrainAccumulator::new(40, 5);
    let mut r = ReservoirState::zeros(40);
    for (k, u) in drive.rows().enumerate() {
        let u: Vec<f64> = u.iter().map(|v| 3.0 * v).collect();
        r = net.advance(&r, &u).unwrap();
        if k >= 50 {
            let feat = DVector::from_vec(reservoir::readout_transform(r.as_slice()));
            acc.push(feat.as_slice(), (&c * &feat).as_slice(), Execution::Sequential);
        }
    }
    let w = nalgebra::DMatrix::from_row_slice(5, 40, &acc.solve(1e-12, Execution::Sequential).map_err(|e| e.to_string())?);
    let exact = common::rel_err(&w, &c);
    check(
        stream <= 1e-8 && exact <= 1e-6,
        format!("streaming vs batch {stream:.1e} (limit 1e-8), exact fit {exact:.1e} (limit 1e-6)"),
    )
}

/// Desk-scale runs, one output directory per preset, sharing a disk cache.
struct Desk {
    root: PathBuf,
    cached: bool,
}

impl Desk {
    fn new(root: &Path, cached: bool) -> Self {
        Self {
            root: root.to_path_buf(),
            cached,
        }
    }

    fn runner(&self, preset: &str) -> Runner {
        Runner::new(RunOptions {
            out_dir: Some(self.root.join(preset)),
            cache_dir: self.cached.then(|| self.root.join("cache")),
            keep_intermediates: false,
            exec: Execution::default(),
        })
    }

    fn run(&self, preset: &str) -> Result<RunArtifact, String> {
        let cfg = ExperimentConfig::preset(preset).map_err(|e| e.to_string())?;
        self.runner(preset).run(&cfg).map_err(|e| e.to_string())
    }

    fn sweep(&self, preset: &str, values: &[f64]) -> Result<Vec<RunArtifact>, String> {
        let cfg = ExperimentConfig::preset(preset).map_err(|e| e.to_string())?;
        let p = cfg.sweep.as_ref().map(|s| s.parameter).ok_or("preset has no sweep")?;
        self.runner(preset).sweep(&cfg, p, values).map(|o| o.runs).map_err(|e| e.to_string())
    }
}

fn at80(run: &RunArtifact, fw: Framework) -> f64 {
    run.skill[&fw].at_lead(80).expect("lead 80 recorded")
}

fn fig3(desk: &Desk) -> Outcome {
    let run = desk.run("desk-fig3")?;
    let (ext, obs) = (&run.skill[&Framework::LetkfExt], &run.skill[&Framework::RcObs]);
    let worst = (10..=200)
        .map(|t| (t, ext.at_lead(t).unwrap() - obs.at_lead(t).unwrap()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    check(
        worst.1 <= 0.0,
        format!(
            "LETKF-Ext <= RC-Obs for t in [10, 200]: largest difference {:.3e} at t={}; at t=80 {:.3e} vs {:.3e}",
            worst.1,
            worst.0,
            ext.at_lead(80).unwrap(),
            obs.at_lead(80).unwrap()
        ),
    )
}

fn fig4(desk: &Desk) -> Outcome {
    let runs = desk.sweep("desk-fig4", &[8.0, 7.0, 4.0])?;
    let ext8 = at80(&runs[0], Framework::LetkfExt);
    let ext4 = at80(&runs[2], Framework::LetkfExt);
    let obs8 = at80(&runs[0], Framework::RcObs);
    let obs7 = at80(&runs[1], Framework::RcObs);
    let change = (ext4 - ext8).abs() / ext8;
    let ratio = obs7 / obs8;
    check(
        change < 0.5 && ratio >= 2.0,
        format!(
            "LETKF-Ext mRMSE(80) 8->4 nodes {ext8:.3e} -> {ext4:.3e} ({:.0}% change, limit 50%); RC-Obs 7 vs 8 nodes {obs7:.3e} / {obs8:.3e} = {ratio:.2} (need >= 2)",
            100.0 * change
        ),
    )
}

fn fig5(desk: &Desk) -> Outcome {
    let runs = desk.sweep("desk-fig5", &[8.0, 4.0])?;
    let a8 = at80(&runs[0], Framework::RcAnl);
    let a4 = at80(&runs[1], Framework::RcAnl);
    check(
        a4 <= 2.0 * a8,
        format!("RC-Anl mRMSE(80) at e=1.0: 4 nodes {a4:.3e} vs 8 nodes {a8:.3e}, ratio {:.2} (limit 2)", a4 / a8),
    )
}

fn fig7(desk: &Desk) -> Outcome {
    let forcings = [6.0, 7.0, 8.0, 9.0, 10.0];
    let runs = desk.sweep("desk-fig7", &forcings)?;
    let ext: Vec<f64> = runs.iter().map(|r| at80(r, Framework::LetkfExt)).collect();
    let anl: Vec<f64> = runs.iter().map(|r| at80(r, Framework::RcAnl)).collect();
    let argmin = |v: &[f64]| forcings[(0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()];
    let ok = ext[2] <= anl[2] && anl[4] < ext[4] && argmin(&ext) == 8.0 && argmin(&anl) == 8.0;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ");
    check(
        ok,
        format!(
            "mRMSE(80) over F=6..10: LETKF-Ext [{}] RC-Anl [{}]; F=8 {} ; F=10 {}; minima at F={} and F={}",
            fmt(&ext),
            fmt(&anl),
            if ext[2] <= anl[2] { "LETKF-Ext <= RC-Anl" } else { "LETKF-Ext > RC-Anl" },
            if anl[4] < ext[4] { "RC-Anl < LETKF-Ext" } else { "RC-Anl >= LETKF-Ext" },
            argmin(&ext),
            argmin(&anl)
        ),
    )
}

/// Re-runs presets from scratch, without any cache, next to the first runs.
fn determinism(desk: &Desk, again: &Path) -> Outcome {
    let fresh = Desk::new(again, false);
    desk.run("smoke")?;
    let mut compared = Vec::new();
    for preset in ["smoke", "desk-fig3"] {
        fresh.run(preset)?;
        let read = |root: &Path| std::fs::read(root.join(preset).join("skill.csv")).map_err(|e| e.to_string());
        let (fa, fb) = (read(&desk.root)?, read(again)?);
        if fa != fb {
            return Err(format!("{preset}: skill CSVs differ"));
        }
        compared.push(format!("{preset} ({} bytes)", fa.len()));
    }
    Ok(format!("byte-identical skill CSVs on re-run: {}", compared.join(", ")))
}

/// Compact re-run of the module invariants with fresh random cases.
fn property_suite() -> Outcome {
    let mut runner = TestRunner::new(Config {
        cases: 128,
        ..Config::default()
    });
    let mut passed = 0;
    let mut run = |name: &str, r: Result<(), String>| -> Result<(), String> {
        r.map_err(|e| format!("{name}: {e}"))?;
        passed += 1;
        Ok(())
    };

    run(
        "ring equivariance",
        runner
            .run(&(prop::collection::vec(-10.0f64..10.0, 4..20), 0usize..20, -10.0f64..20.0), |(x, k, f)| {
                let m = x.len();
                let k = k % m;
                let mut rot = x.clone();
                rot.rotate_right(k);
                let p = ModelParams::new(m, f, 0.005).unwrap();
                let mut t = lorenz96::tendency(&StateVector::new(x), &p).unwrap().into_inner();
                let tr = lorenz96::tendency(&StateVector::new(rot), &p).unwrap().into_inner();
                t.rotate_right(k);
                prop_assert_eq!(t, tr);
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;
    run(
        "fixed point and uniform closure",
        runner
            .run(&(4usize..40, -20.0f64..20.0, -5.0f64..5.0), |(m, f, c)| {
                let p = ModelParams::new(m, f, 0.005).unwrap();
                let t = lorenz96::tendency(&StateVector::uniform(m, f), &p).unwrap();
                prop_assert!(t.as_slice().iter().all(|v| *v == 0.0));
                let s = lorenz96::rk4_step(&StateVector::uniform(m, c), &p).unwrap();
                prop_assert!(s.as_slice().iter().all(|v| *v == s.as_slice()[0]));
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;
    run(
        "observation count",
        runner
            .run(&(1usize..50, 0usize..100, 0usize..2000), |(f, start, len)| {
                let s = ObsSchedule::new(f, start, start + len).unwrap();
                prop_assert_eq!(s.count(), len / f + 1);
                prop_assert_eq!(s.steps().count(), s.count());
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;
    run(
        "LETKF ensemble-space identities and KF equivalence",
        runner
            .run(&(0u64..1_000_000, 1usize..=8), |(seed, h)| {
                let c = common::kf_case(seed, h);
                let plain = LetkfConfig {
                    inflation: 1.0,
                    localization_scale: f64::INFINITY,
                    ..Default::default()
                };
                let (xa, pa) = common::kalman_update(
                    &c.ensemble,
                    &c.batch.operator.matrix(),
                    &DVector::from_vec(c.batch.values.clone()),
                    c.batch.error_std,
                );
                let a = letkf::analysis_step(&c.ensemble, &c.batch, &plain, Execution::Sequential)
                    .map_err(|e| TestCaseError::fail(e.to_string()))?;
                prop_assert!((a.mean() - &xa).norm() / xa.norm() <= 1e-8);
                prop_assert!(common::rel_err(&a.covariance(), &pa) <= 1e-8);
                let cfg = LetkfConfig::default();
                let n = c.ensemble.size() as f64;
                for node in 0..8 {
                    let t = letkf::local_transform(&c.ensemble, &c.batch, node, &cfg).unwrap().unwrap();
                    let wwt = &t.transform * t.transform.transpose();
                    prop_assert!(common::rel_err(&wwt, &(&t.covariance * (n - 1.0))) <= 1e-10);
                }
                let silent = ObservationBatch {
                    error_std: f64::INFINITY,
                    ..c.batch.clone()
                };
                let same = letkf::analysis_step(
                    &c.ensemble,
                    &silent,
                    &LetkfConfig {
                        inflation: 1.0,
                        ..cfg
                    },
                    Execution::Sequential,
                )
                .unwrap();
                prop_assert_eq!(same.matrix(), c.ensemble.matrix());
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;
    run(
        "reservoir tanh bound",
        runner
            .run(&(prop::collection::vec(-1e3f64..1e3, 2), 0u64..50), |(u, seed)| {
                let p = ReservoirParams {
                    size: 30,
                    input_dim: 2,
                    density: 0.1,
                    ..Default::default()
                };
                let net = reservoir::init_network(&p, seed).unwrap();
                let r = net.advance(&ReservoirState::zeros(30), &u).unwrap();
                prop_assert!(r.as_slice().iter().all(|v| v.abs() <= 1.0));
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;
    run(
        "mRMSE permutation invariance",
        runner
            .run(&(prop::collection::vec(-5.0f64..5.0, 48), 0usize..3), |(data, rot)| {
                let mut sets: Vec<PredictionSet> = data
                    .chunks(16)
                    .enumerate()
                    .map(|(i, c)| PredictionSet {
                        initial_step: i,
                        stride: 1,
                        predicted: Series::from_flat(4, c[..8].to_vec()),
                        truth: Series::from_flat(4, c[8..].to_vec()),
                    })
                    .collect();
                let a = forecast::mrmse(&sets).unwrap();
                sets.rotate_left(rot);
                for s in &mut sets {
                    s.predicted = s.predicted.select_columns(&[3, 1, 0, 2]);
                    s.truth = s.truth.select_columns(&[3, 1, 0, 2]);
                }
                let b = forecast::mrmse(&sets).unwrap();
                for (x, y) in a.mrmse.iter().zip(&b.mrmse) {
                    prop_assert!(*x >= 0.0 && (x - y).abs() <= 1e-12 * x.max(1.0));
                }
                Ok(())
            })
            .map_err(|e| e.to_string()),
    )?;
    Ok(format!("{passed} invariant families x 128 random cases"))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temporary directory");
    let desk = Desk::new(&dir.path().join("first"), true);
    let again = dir.path().join("again");
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        ("RK4 order", Box::new(rk4_order)),
        ("LETKF = KF oracle", Box::new(letkf_equals_kf)),
        ("Reservoir construction", Box::new(reservoir_construction)),
        ("Ridge oracle", Box::new(ridge_oracle)),
        ("desk-fig3 skill ordering", Box::new(|| fig3(&desk))),
        ("desk-fig4 sparsity sensitivity", Box::new(|| fig4(&desk))),
        ("desk-fig5 RC-Anl sparsity robustness", Box::new(|| fig5(&desk))),
        ("desk-fig7 model-bias crossover", Box::new(|| fig7(&desk))),
        ("Determinism", Box::new(|| determinism(&desk, &again))),
        ("Property suites", Box::new(property_suite)),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

use std::collections::BTreeMap;

use osse_lab::forecast::{self, Framework};
use osse_lab::harness::{self, ExperimentConfig, RunOptions, Runner, SweepParameter};
use osse_lab::{Error, Execution};

/// Small enough for debug builds; long enough training for a sane reservoir.
fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset("smoke").unwrap();
    cfg.apply_overrides(&[
        "reservoir.size=200",
        "reservoir.density=0.02",
        "protocol.spinup_steps=5000",
        "protocol.total_steps=6000",
        "protocol.train_steps=4000",
        "protocol.n_sets=4",
        "protocol.set_length=500",
        "protocol.horizon=400",
        "protocol.washout=50",
        "protocol.rc_spinup=50",
    ])
    .unwrap();
    cfg
}

fn runner(dir: Option<&std::path::Path>) -> Runner {
    Runner::new(RunOptions {
        out_dir: dir.map(|d| d.join("run")),
        cache_dir: dir.map(|d| d.join("cache")),
        keep_intermediates: true,
        exec: Execution::default(),
    })
}

#[test]
fn rerun_gives_byte_identical_outputs() {
    let cfg = tiny();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = runner(Some(a.path())).run(&cfg).unwrap();
    let rb = runner(Some(b.path())).run(&cfg).unwrap();
    for key in ["skill", "observations", "hovmoller-RC-Anl"] {
        let fa = std::fs::read(ra.path(key).unwrap()).unwrap();
        let fb = std::fs::read(rb.path(key).unwrap()).unwrap();
        assert_eq!(fa, fb, "{key}");
    }
    // a warm cache reproduces the cold result exactly
    let rc = runner(Some(a.path())).run(&cfg).unwrap();
    assert_eq!(rc.skill, ra.skill);
    assert_eq!(
        std::fs::read(rc.path("skill").unwrap()).unwrap(),
        std::fs::read(ra.path("skill").unwrap()).unwrap()
    );
}

#[test]
fn every_output_carries_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let r = runner(Some(dir.path())).run(&tiny()).unwrap();
    let line = format!("# config-hash: {}", r.config_hash);
    for key in ["skill", "observations", "hovmoller-LETKF-Ext", "hovmoller-RC-Obs", "config"] {
        let text = std::fs::read_to_string(r.path(key).unwrap()).unwrap();
        assert!(text.lines().take(20).any(|l| l == line), "{key}");
    }
    for key in ["nature", "analysis"] {
        let text = std::fs::read_to_string(r.path(key).unwrap()).unwrap();
        assert!(text.lines().take(20).any(|l| l.starts_with("# config-hash: ")), "{key}");
    }
    let manifest: harness::Manifest =
        serde_json::from_str(&std::fs::read_to_string(r.path("manifest").unwrap()).unwrap()).unwrap();
    assert_eq!(manifest.config_hash, r.config_hash);
    assert!(manifest.failed_stage().is_none());
    assert!(manifest.finished_unix >= manifest.started_unix);
}

#[test]
fn skill_invariants() {
    let cfg = tiny();
    let r = runner(None).run(&cfg).unwrap();
    assert_eq!(r.skill.len(), 3);
    for (fw, s) in &r.skill {
        assert_eq!(s.n_sets, 4);
        assert_eq!(s.leads.first(), Some(&1));
        assert!(s.mrmse.iter().all(|v| *v >= 0.0 && v.is_finite()), "{fw}");
        assert!(s.mrmse[0] < 0.25 * s.mrmse[399], "{fw}: lead 1 {} vs lead 400 {}", s.mrmse[0], s.mrmse[399]);
    }
}

#[test]
fn frameworks_share_truth_slices_and_beat_climatology_early() {
    let cfg = tiny();
    let runner = runner(None);
    let truth = runner.nature(&cfg).unwrap();
    let obs = runner.observations(&cfg, &truth).unwrap();
    let analysis = runner.analysis(&cfg, &truth, &obs).unwrap();
    let protocol = cfg.eval_protocol();
    let starts = protocol.initial_steps();
    let ext = forecast::letkf_ext(
        &analysis,
        &cfg.forecast_model().unwrap(),
        &truth,
        &starts,
        protocol.horizon,
        Execution::Sequential,
    )
    .unwrap();
    let anl = forecast::rc_anl(&analysis, &truth, &cfg.reservoir_params(8), &protocol, 3, Execution::Sequential)
        .unwrap()
        .sets;
    for (a, b) in ext.iter().zip(&anl) {
        assert_eq!(a.initial_step, b.initial_step);
        assert_eq!(a.truth, b.truth);
    }
    let states = truth.states();
    let mean: Vec<f64> = (0..8)
        .map(|j| states.rows().map(|r| r[j]).sum::<f64>() / states.len() as f64)
        .collect();
    let clim = forecast::mrmse(&forecast::climatology_sets(&truth, &mean, &starts, protocol.horizon).unwrap()).unwrap();
    let std = osse_lab::letkf::climatological_std(&truth);
    let level = clim.mrmse.iter().sum::<f64>() / clim.mrmse.len() as f64;
    assert!(level > 0.6 * std && level < 1.1 * std, "climatology {level} vs std {std}");
    for sets in [&ext, &anl] {
        let s = forecast::mrmse(sets).unwrap();
        assert!(s.mrmse[0] < 0.1 * clim.mrmse[0], "{} vs climatology {}", s.mrmse[0], clim.mrmse[0]);
    }
}

#[test]
fn stage_failures_are_recorded() {
    let mut cfg = tiny();
    cfg.frameworks = vec![Framework::RcObs];
    cfg.protocol.train_steps = 40;
    let dir = tempfile::tempdir().unwrap();
    let err = runner(Some(dir.path())).run(&cfg).unwrap_err();
    match &err {
        Error::Stage { stage, .. } => assert_eq!(stage, harness::STAGE_RC_OBS),
        other => panic!("unexpected error {other}"),
    }
    let manifest: harness::Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    let failed = manifest.failed_stage().unwrap();
    assert_eq!(failed.stage, harness::STAGE_RC_OBS);
    assert!(failed.error.as_deref().unwrap().contains("washout"));
}

#[test]
fn sweeps_share_the_nature_run() {
    let mut cfg = tiny();
    cfg.frameworks = vec![Framework::LetkfExt, Framework::RcObs];
    let dir = tempfile::tempdir().unwrap();
    let runner = runner(Some(dir.path()));
    assert!(runner.sweep(&cfg, SweepParameter::NodeCount, &[]).is_err());
    let out = runner.sweep(&cfg, SweepParameter::NodeCount, &[8.0, 4.0]).unwrap();
    assert_eq!(out.runs.len(), 2);
    assert_eq!(out.runs[0].path("nature"), out.runs[1].path("nature"));
    assert_ne!(out.runs[0].config_hash, out.runs[1].config_hash);
    assert_eq!(out.runs[1].skill[&Framework::RcObs].dim, 4);
    assert_eq!(out.runs[1].skill[&Framework::LetkfExt].dim, 8);
    let text = std::fs::read_to_string(out.combined.as_ref().unwrap()).unwrap();
    let (cols, header) = forecast::read_skill_csv(text.as_bytes()).unwrap();
    assert_eq!(header.get("config-hash"), Some(cfg.hash().as_str()));
    let names: Vec<&str> = cols.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(
        names,
        ["LETKF-Ext@node_count=8", "RC-Obs@node_count=8", "LETKF-Ext@node_count=4", "RC-Obs@node_count=4"]
    );
    let table = harness::evaluate_columns(&cols.iter().map(|(n, s)| (n.clone(), s)).collect::<Vec<_>>(), 80).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert_eq!(table.columns, ["LETKF-Ext", "RC-Obs"]);
    let direct = harness::evaluate(&out.runs, 80).unwrap();
    assert_eq!(direct.column("RC-Obs"), table.column("RC-Obs"));
    assert!(harness::evaluate(&out.runs, 401).is_err());
    assert!(harness::evaluate(&out.runs, 0).is_err());
}

#[test]
fn config_hash_tracks_every_parameter() {
    let base = tiny();
    let mut seen = BTreeMap::new();
    seen.insert(base.hash(), "base".to_string());
    let overrides = [
        "seed=8",
        "model.forcing_truth=8.5",
        "model.forcing_model=9",
        "model.dt=0.01",
        "observation.node_count=6",
        "observation.frequency=2",
        "observation.error_std=0.2",
        "letkf.ensemble_size=10",
        "letkf.inflation=1.1",
        "letkf.localization_scale=10",
        "letkf.initial_spread=2",
        "reservoir.size=201",
        "reservoir.input_scale=0.4",
        "reservoir.density=0.03",
        "reservoir.spectral_radius=0.2",
        "reservoir.ridge=1e-3",
        "protocol.spinup_steps=5001",
        "protocol.total_steps=6500",
        "protocol.train_steps=3900",
        "protocol.n_sets=3",
        "protocol.horizon=390",
        "protocol.washout=40",
        "protocol.rc_spinup=40",
        "frameworks=[\"rc-obs\"]",
    ];
    for o in overrides {
        let mut c = base.clone();
        c.apply_overrides(&[o]).unwrap_or_else(|e| panic!("{o}: {e}"));
        let prev = seen.insert(c.hash(), o.to_string());
        assert!(prev.is_none(), "{o} collides with {prev:?}");
    }
}

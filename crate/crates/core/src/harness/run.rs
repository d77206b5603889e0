use std::any::Any;
use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{derive_seed, digest_json, ExperimentConfig};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::forecast::{self, Framework, PredictionSet, SkillSeries};
use crate::io::{self, Header};
use crate::letkf::{self, AnalysisSeries, AssimilationOptions, Ensemble};
use crate::lorenz96::Trajectory;
use crate::osse::{self, ObsSchedule, Observations};
use crate::reservoir::ReservoirNet;

/// Stage labels double as seed-derivation labels.
pub const STAGE_NATURE: &str = "nature-run";
pub const STAGE_OBSERVE: &str = "observe";
pub const STAGE_ENSEMBLE: &str = "ensemble";
pub const STAGE_ASSIMILATE: &str = "assimilate";
pub const STAGE_RC_OBS: &str = "rc-obs";
pub const STAGE_RC_ANL: &str = "rc-anl";
pub const STAGE_LETKF_EXT: &str = "letkf-ext";
pub const STAGE_SKILL: &str = "skill";

/// Child seeds of every randomized stage, all derived with index 0.
pub fn stage_seeds(master: u64) -> BTreeMap<String, u64> {
    [STAGE_OBSERVE, STAGE_ENSEMBLE, STAGE_RC_OBS, STAGE_RC_ANL]
        .into_iter()
        .map(|s| (s.to_string(), derive_seed(master, s, 0)))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Run outputs go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Persistent cache of nature runs, analyses and trained nets.
    pub cache_dir: Option<PathBuf>,
    /// Also write the observations file into the run directory.
    pub keep_intermediates: bool,
    pub exec: Execution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub ok: bool,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub seed: u64,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub stages: Vec<StageRecord>,
    pub paths: BTreeMap<String, PathBuf>,
}

impl Manifest {
    pub fn failed_stage(&self) -> Option<&StageRecord> {
        self.stages.iter().find(|s| !s.ok)
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub skill: BTreeMap<Framework, SkillSeries>,
    pub manifest: Manifest,
}

impl RunArtifact {
    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.manifest.paths.get(key).map(PathBuf::as_path)
    }

    pub fn skill_header(&self) -> Header {
        skill_header(&self.config, &self.config_hash, &self.manifest.seeds)
    }
}

fn skill_header(cfg: &ExperimentConfig, hash: &str, seeds: &BTreeMap<String, u64>) -> Header {
    let mut h = Header::new("skill");
    h.set(io::CONFIG_HASH_KEY, hash).set("name", &cfg.name).set("seed", cfg.seed);
    for (stage, s) in seeds {
        h.set(&format!("seed[{stage}]"), s);
    }
    h
}

/// Memoizes expensive stages in memory and, optionally, on disk. Entries
/// are keyed by a hash of exactly the inputs that determine them.
#[derive(Default)]
pub struct Cache {
    dir: Option<PathBuf>,
    slots: Mutex<HashMap<String, Arc<Mutex<Option<Arc<dyn Any + Send + Sync>>>>>>,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self {
            dir,
            slots: Mutex::default(),
        }
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn file(&self, kind: &str, key: &str, ext: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{kind}-{}.{ext}", &key[..16])))
    }

    /// Concurrent callers with the same key wait for a single computation.
    fn get_or<T: Any + Send + Sync>(
        &self,
        kind: &str,
        key: &str,
        compute: impl FnOnce() -> Result<T>,
    ) -> Result<Arc<T>> {
        let slot = {
            let mut slots = self.slots.lock().expect("cache lock");
            Arc::clone(slots.entry(format!("{kind}/{key}")).or_default())
        };
        let mut guard = slot.lock().expect("cache slot lock");
        if let Some(v) = guard.as_ref() {
            return Arc::clone(v)
                .downcast::<T>()
                .map_err(|_| Error::invalid(format!("cache entry {kind}/{key} has the wrong type")));
        }
        let v = Arc::new(compute()?);
        *guard = Some(Arc::clone(&v) as Arc<dyn Any + Send + Sync>);
        Ok(v)
    }
}

/// Executes experiments and sweeps sharing one cache.
pub struct Runner {
    pub opts: RunOptions,
    cache: Cache,
}

impl Runner {
    pub fn new(opts: RunOptions) -> Self {
        let cache = Cache::new(opts.cache_dir.clone());
        Self { opts, cache }
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn nature_key(cfg: &ExperimentConfig) -> String {
        digest_json(&(
            STAGE_NATURE,
            cfg.model.m,
            cfg.model.forcing_truth,
            cfg.model.dt,
            cfg.protocol.spinup_steps,
            cfg.protocol.total_steps,
        ))
    }

    fn observation_key(cfg: &ExperimentConfig) -> String {
        digest_json(&(
            STAGE_OBSERVE,
            Self::nature_key(cfg),
            &cfg.observation,
            derive_seed(cfg.seed, STAGE_OBSERVE, 0),
        ))
    }

    fn analysis_key(cfg: &ExperimentConfig) -> String {
        digest_json(&(
            STAGE_ASSIMILATE,
            Self::observation_key(cfg),
            &cfg.letkf,
            cfg.model.forcing_model,
            derive_seed(cfg.seed, STAGE_ENSEMBLE, 0),
        ))
    }

    fn net_key(cfg: &ExperimentConfig, source: &str, stage: &str) -> String {
        let p = &cfg.protocol;
        digest_json(&(
            stage,
            source,
            &cfg.reservoir,
            (p.train_steps, p.total_steps, p.n_sets, p.set_length, p.washout),
            derive_seed(cfg.seed, stage, 0),
        ))
    }

    pub fn nature(&self, cfg: &ExperimentConfig) -> Result<Arc<Trajectory>> {
        let key = Self::nature_key(cfg);
        self.cache.get_or(STAGE_NATURE, &key, || {
            let file = self.cache.file("nature", &key, "csv");
            if let Some(t) = file.as_deref().and_then(|f| load_csv(f, &key, Trajectory::read_csv)) {
                return Ok(t);
            }
            let t = osse::generate_nature_run(&cfg.truth_model()?, cfg.protocol.spinup_steps, cfg.protocol.total_steps)?;
            if let Some(f) = file {
                save(&f, |w| t.write_csv(w, &key))?;
            }
            Ok(t)
        })
    }

    pub fn observations(&self, cfg: &ExperimentConfig, truth: &Trajectory) -> Result<Arc<Observations>> {
        let key = Self::observation_key(cfg);
        self.cache.get_or(STAGE_OBSERVE, &key, || {
            let f = cfg.observation.frequency;
            let last = (truth.len() - 1) / f * f;
            let sched = ObsSchedule::new(f, 0, last)?;
            osse::observe(
                truth,
                &cfg.operator()?,
                &sched,
                cfg.observation.error_std,
                derive_seed(cfg.seed, STAGE_OBSERVE, 0),
            )
        })
    }

    pub fn analysis(&self, cfg: &ExperimentConfig, truth: &Trajectory, obs: &Observations) -> Result<Arc<AnalysisSeries>> {
        let key = Self::analysis_key(cfg);
        self.cache.get_or(STAGE_ASSIMILATE, &key, || {
            let file = self.cache.file("analysis", &key, "csv");
            if let Some(a) = file.as_deref().and_then(|f| load_csv(f, &key, AnalysisSeries::read_csv)) {
                return Ok(a);
            }
            let initial = Ensemble::perturbed(
                truth.state(0),
                cfg.letkf.ensemble_size,
                cfg.letkf.initial_spread,
                derive_seed(cfg.seed, STAGE_ENSEMBLE, 0),
                0,
            )?;
            let a = letkf::run_assimilation(
                obs,
                &cfg.forecast_model()?,
                &cfg.letkf_config(),
                initial,
                AssimilationOptions {
                    truth: Some(truth),
                    keep_ensembles: false,
                    exec: self.opts.exec,
                },
            )?;
            if let Some(f) = file {
                save(&f, |w| a.write_csv(w, &key))?;
            }
            Ok(a)
        })
    }

    fn net(
        &self,
        stage: &str,
        key: String,
        train: impl FnOnce() -> Result<forecast::RcOutcome>,
    ) -> Result<(Arc<ReservoirNet>, Option<Vec<PredictionSet>>, Option<PathBuf>)> {
        let file = self.cache.file(stage, &key, "net");
        let mut fresh = None;
        let net = self.cache.get_or(stage, &key, || {
            if let Some(f) = file.as_deref().filter(|f| f.exists()) {
                return ReservoirNet::read_binary(BufReader::new(File::open(f)?));
            }
            let out = train()?;
            if let Some(f) = &file {
                save(f, |w| out.net.write_binary(w))?;
            }
            fresh = Some(out.sets);
            Ok(out.net)
        })?;
        Ok((net, fresh, file))
    }

    /// Full pipeline for every framework in `cfg`.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunArtifact> {
        self.run_in(cfg, self.opts.out_dir.as_deref())
    }

    /// [`Runner::run`] writing into `out` instead of the configured directory.
    pub fn run_in(&self, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunArtifact> {
        cfg.validate()?;
        let hash = cfg.hash();
        let seeds = stage_seeds(cfg.seed);
        let mut rec = Recorder::new(cfg, &hash, &seeds);
        if let Some(d) = out {
            std::fs::create_dir_all(d)?;
            let path = d.join("config.toml");
            std::fs::write(&path, format!("# {}: {hash}\n{}", io::CONFIG_HASH_KEY, cfg.to_toml()?))?;
            rec.manifest.paths.insert("config".into(), path);
        }
        let result = self.pipeline(cfg, &hash, out, &mut rec);
        rec.manifest.finished_unix = unix_now();
        if let Some(d) = out {
            let path = d.join("manifest.json");
            rec.manifest.paths.insert("manifest".into(), path.clone());
            let json = serde_json::to_string_pretty(&rec.manifest)
                .map_err(|e| Error::format("manifest", e.to_string()))?;
            std::fs::write(path, json)?;
        }
        let skill = result?;
        Ok(RunArtifact {
            config: cfg.clone(),
            config_hash: hash,
            skill,
            manifest: rec.manifest,
        })
    }

    fn pipeline(
        &self,
        cfg: &ExperimentConfig,
        hash: &str,
        out: Option<&Path>,
        rec: &mut Recorder,
    ) -> Result<BTreeMap<Framework, SkillSeries>> {
        let exec = self.opts.exec;
        let protocol = cfg.eval_protocol();
        let truth = rec.stage(STAGE_NATURE, || self.nature(cfg))?;
        if let Some(f) = self.cache.file("nature", &Self::nature_key(cfg), "csv") {
            rec.manifest.paths.insert("nature".into(), f);
        }
        let obs = rec.stage(STAGE_OBSERVE, || {
            let obs = self.observations(cfg, &truth)?;
            if let (Some(d), true) = (out, self.opts.keep_intermediates) {
                let path = d.join("observations.csv");
                save(&path, |w| obs.write_csv(w, hash))?;
            }
            Ok(obs)
        })?;
        if let (Some(d), true) = (out, self.opts.keep_intermediates) {
            rec.manifest.paths.insert("observations".into(), d.join("observations.csv"));
        }
        let analysis = if cfg.needs_analysis() {
            let a = rec.stage(STAGE_ASSIMILATE, || self.analysis(cfg, &truth, &obs))?;
            if let Some(f) = self.cache.file("analysis", &Self::analysis_key(cfg), "csv") {
                rec.manifest.paths.insert("analysis".into(), f);
            }
            Some(a)
        } else {
            None
        };

        let mut sets: BTreeMap<Framework, Vec<PredictionSet>> = BTreeMap::new();
        for &fw in &cfg.frameworks {
            let s = match fw {
                Framework::LetkfExt => rec.stage(STAGE_LETKF_EXT, || {
                    let a = analysis.as_deref().expect("analysis computed for LETKF-Ext");
                    forecast::letkf_ext(a, &cfg.forecast_model()?, &truth, &protocol.initial_steps(), protocol.horizon, exec)
                })?,
                Framework::RcObs => {
                    let key = Self::net_key(cfg, &Self::observation_key(cfg), STAGE_RC_OBS);
                    let seed = derive_seed(cfg.seed, STAGE_RC_OBS, 0);
                    let params = cfg.reservoir_params(obs.operator.h());
                    let (sets, file) = rec.stage(STAGE_RC_OBS, || {
                        let (net, fresh, file) =
                            self.net(STAGE_RC_OBS, key, || forecast::rc_obs(&obs, &truth, &params, &protocol, seed, exec))?;
                        let sets = match fresh {
                            Some(s) => s,
                            None => forecast::rc_obs_sets(&net, &obs, &truth, &protocol, exec)?,
                        };
                        Ok((sets, file))
                    })?;
                    if let Some(f) = file {
                        rec.manifest.paths.insert("net-rc-obs".into(), f);
                    }
                    sets
                }
                Framework::RcAnl => {
                    let a = analysis.as_deref().expect("analysis computed for RC-Anl");
                    let key = Self::net_key(cfg, &Self::analysis_key(cfg), STAGE_RC_ANL);
                    let seed = derive_seed(cfg.seed, STAGE_RC_ANL, 0);
                    let params = cfg.reservoir_params(cfg.model.m);
                    let (sets, file) = rec.stage(STAGE_RC_ANL, || {
                        let (net, fresh, file) =
                            self.net(STAGE_RC_ANL, key, || forecast::rc_anl(a, &truth, &params, &protocol, seed, exec))?;
                        let sets = match fresh {
                            Some(s) => s,
                            None => forecast::rc_anl_sets(&net, a, &truth, &protocol, exec)?,
                        };
                        Ok((sets, file))
                    })?;
                    if let Some(f) = file {
                        rec.manifest.paths.insert("net-rc-anl".into(), f);
                    }
                    sets
                }
            };
            sets.insert(fw, s);
        }

        let seeds = rec.manifest.seeds.clone();
        let skill = rec.stage(STAGE_SKILL, || {
            let mut skill = BTreeMap::new();
            for (fw, s) in &sets {
                skill.insert(*fw, forecast::mrmse(s)?);
            }
            Ok(skill)
        })?;
        if let Some(d) = out {
            let header = skill_header(cfg, hash, &seeds);
            let columns: Vec<(String, &SkillSeries)> =
                skill.iter().map(|(fw, s)| (fw.label().to_string(), s)).collect();
            let path = d.join("skill.csv");
            save(&path, |w| forecast::write_skill_csv(w, &header, &columns))?;
            rec.manifest.paths.insert("skill".into(), path);
            for (fw, s) in &sets {
                if let Some(first) = s.first() {
                    let path = d.join(format!("hovmoller-{}.csv", fw.label().to_ascii_lowercase()));
                    save(&path, |w| write_prediction_csv(w, cfg, hash, *fw, first))?;
                    rec.manifest.paths.insert(format!("hovmoller-{}", fw.label()), path);
                }
            }
        }
        Ok(skill)
    }
}

/// Convenience wrapper: a fresh [`Runner`] for one experiment.
pub fn run_experiment(cfg: &ExperimentConfig, opts: RunOptions) -> Result<RunArtifact> {
    Runner::new(opts).run(cfg)
}

struct Recorder {
    manifest: Manifest,
}

impl Recorder {
    fn new(cfg: &ExperimentConfig, hash: &str, seeds: &BTreeMap<String, u64>) -> Self {
        Self {
            manifest: Manifest {
                name: cfg.name.clone(),
                config_hash: hash.to_string(),
                seed: cfg.seed,
                seeds: seeds.clone(),
                started_unix: unix_now(),
                finished_unix: f64::NAN,
                stages: Vec::new(),
                paths: BTreeMap::new(),
            },
        }
    }

    fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let t = Instant::now();
        log::info!("{}: {stage}", self.manifest.name);
        let r = f();
        self.manifest.stages.push(StageRecord {
            stage: stage.to_string(),
            ok: r.is_ok(),
            seconds: t.elapsed().as_secs_f64(),
            error: r.as_ref().err().map(ToString::to_string),
        });
        r.map_err(|e| Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        })
    }
}

/// First prediction set with its truth slice, one row per lead.
pub fn write_prediction_csv<W: std::io::Write>(
    w: W,
    cfg: &ExperimentConfig,
    hash: &str,
    fw: Framework,
    set: &PredictionSet,
) -> Result<()> {
    let nodes: Vec<usize> = match fw {
        Framework::RcObs => cfg.operator()?.one_based(),
        _ => (1..=cfg.model.m).collect(),
    };
    let mut h = Header::new("prediction");
    h.set(io::CONFIG_HASH_KEY, hash)
        .set("framework", fw.label())
        .set("initial_step", set.initial_step)
        .set("stride", set.stride);
    let mut cols = vec!["lead".to_string()];
    cols.extend(nodes.iter().map(|n| format!("pred{n}")));
    cols.extend(nodes.iter().map(|n| format!("truth{n}")));
    let rows = (0..set.horizon()).map(|t| {
        let mut row = vec![((t + 1) * set.stride) as f64];
        row.extend_from_slice(set.predicted.row(t));
        row.extend_from_slice(set.truth.row(t));
        row
    });
    io::write_table(w, &h, &cols, rows)
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

fn save(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("partial");
    let mut w = BufWriter::new(File::create(&tmp)?);
    f(&mut w)?;
    drop(w);
    std::fs::rename(tmp, path)?;
    Ok(())
}

/// Cached CSV whose header carries `key`; anything else is a miss.
fn load_csv<T>(path: &Path, key: &str, read: impl FnOnce(BufReader<File>) -> Result<(T, Header)>) -> Option<T> {
    let file = File::open(path).ok()?;
    match read(BufReader::new(file)) {
        Ok((v, h)) if h.get(io::CONFIG_HASH_KEY) == Some(key) => Some(v),
        Ok(_) => None,
        Err(e) => {
            log::warn!("ignoring unreadable cache file {}: {e}", path.display());
            None
        }
    }
}

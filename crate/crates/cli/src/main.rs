use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use osse_lab::forecast::{self, Framework};
use osse_lab::harness::{self, ExperimentConfig, RunOptions, Runner, SweepParameter};
use osse_lab::letkf::{self, AnalysisSeries, AssimilationOptions, Ensemble};
use osse_lab::lorenz96::Trajectory;
use osse_lab::osse::{self, ObsSchedule, Observations};
use osse_lab::reservoir::ReservoirNet;
use osse_lab::Execution;

#[derive(Parser)]
#[command(name = "osse-lab", version, about = "Lorenz-96 LETKF and reservoir-computing forecast lab")]
struct Cli {
    /// Run data-parallel loops on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Preset name or path to a TOML config.
    #[arg(long, short = 'c', default_value = "smoke")]
    config: String,
    /// Override a config key by dotted path, e.g. `reservoir.size=1000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        load_config(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Spin up and record the nature run.
    NatureRun {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Sample noisy observations of a nature run.
    Observe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        nature: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Run the LETKF over an observation file.
    Assimilate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        nature: PathBuf,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a reservoir on observations (RC-Obs) or analyses (RC-Anl).
    TrainRc {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_framework)]
        framework: Framework,
        /// Observation file for rc-obs, analysis file for rc-anl.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        nature: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Forecast every evaluation set and write the skill table.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_parser = parse_framework)]
        framework: Framework,
        #[arg(long)]
        nature: PathBuf,
        /// Observation file (rc-obs) or analysis file (letkf-ext, rc-anl).
        #[arg(long)]
        input: PathBuf,
        /// Trained network, required for the reservoir frameworks.
        #[arg(long)]
        net: Option<PathBuf>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Tabulate mRMSE at one lead from skill tables.
    Evaluate {
        #[arg(long, default_value_t = 80)]
        lead: usize,
        #[arg(required = true)]
        skill: Vec<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Run a preset or config file end to end; configs with a sweep section
    /// run every sweep point.
    Experiment {
        /// Preset name or config path.
        config: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Run one experiment per value of a parameter.
    Sweep {
        config: String,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// One of error_std, frequency, node_count, forcing_model, train_steps.
        #[arg(long)]
        parameter: Option<String>,
        /// Comma-separated values; defaults to the config's sweep section.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct OutArgs {
    #[arg(long, short, default_value = "runs")]
    out: PathBuf,
    /// Cache directory; defaults to `<out>/cache`.
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Also write the observations file of every run.
    #[arg(long)]
    keep_intermediates: bool,
    /// Lead of the printed summary table.
    #[arg(long, default_value_t = 80)]
    lead: usize,
}

fn parse_framework(s: &str) -> Result<Framework, String> {
    s.parse().map_err(|e: osse_lab::Error| e.to_string())
}

fn load_config(name: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(name)?;
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p)?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).with_context(|| format!("cannot open {}", path.display()))?,
    ))
}

fn read_nature(path: &Path) -> Result<Trajectory> {
    Ok(Trajectory::read_csv(open(path)?)
        .with_context(|| format!("reading {}", path.display()))?
        .0)
}

fn read_observations(path: &Path) -> Result<Observations> {
    Ok(Observations::read_csv(open(path)?)
        .with_context(|| format!("reading {}", path.display()))?
        .0)
}

fn read_analysis(path: &Path) -> Result<AnalysisSeries> {
    Ok(AnalysisSeries::read_csv(open(path)?)
        .with_context(|| format!("reading {}", path.display()))?
        .0)
}

fn stage_seed(cfg: &ExperimentConfig, stage: &str) -> u64 {
    harness::derive_seed(cfg.seed, stage, 0)
}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match cli.command {
        Command::NatureRun { cfg, out } => {
            let cfg = cfg.load()?;
            let t = osse::generate_nature_run(&cfg.truth_model()?, cfg.protocol.spinup_steps, cfg.protocol.total_steps)
                .context("stage `nature-run`")?;
            t.write_csv(create(&out)?, &cfg.hash())?;
            println!("wrote {} states to {}", t.len(), out.display());
        }
        Command::Observe { cfg, nature, out } => {
            let cfg = cfg.load()?;
            let truth = read_nature(&nature)?;
            let f = cfg.observation.frequency;
            let sched = ObsSchedule::new(f, 0, (truth.len() - 1) / f * f)?;
            let obs = osse::observe(
                &truth,
                &cfg.operator()?,
                &sched,
                cfg.observation.error_std,
                stage_seed(&cfg, harness::STAGE_OBSERVE),
            )
            .context("stage `observe`")?;
            obs.write_csv(create(&out)?, &cfg.hash())?;
            println!("wrote {} observation batches to {}", obs.len(), out.display());
        }
        Command::Assimilate {
            cfg,
            nature,
            observations,
            out,
        } => {
            let cfg = cfg.load()?;
            let truth = read_nature(&nature)?;
            let obs = read_observations(&observations)?;
            let initial = Ensemble::perturbed(
                truth.state(0),
                cfg.letkf.ensemble_size,
                cfg.letkf.initial_spread,
                stage_seed(&cfg, harness::STAGE_ENSEMBLE),
                0,
            )?;
            let a = letkf::run_assimilation(
                &obs,
                &cfg.forecast_model()?,
                &cfg.letkf_config(),
                initial,
                AssimilationOptions {
                    truth: Some(&truth),
                    keep_ensembles: false,
                    exec,
                },
            )
            .context("stage `assimilate`")?;
            a.write_csv(create(&out)?, &cfg.hash())?;
            println!("wrote {} analyses to {}", a.len(), out.display());
        }
        Command::TrainRc {
            cfg,
            framework,
            input,
            nature,
            out,
        } => {
            let cfg = cfg.load()?;
            let truth = read_nature(&nature)?;
            let protocol = cfg.eval_protocol();
            let outcome = match framework {
                Framework::RcObs => {
                    let obs = read_observations(&input)?;
                    let params = cfg.reservoir_params(obs.operator.h());
                    forecast::rc_obs(&obs, &truth, &params, &protocol, stage_seed(&cfg, harness::STAGE_RC_OBS), exec)
                }
                Framework::RcAnl => {
                    let a = read_analysis(&input)?;
                    let params = cfg.reservoir_params(a.m());
                    forecast::rc_anl(&a, &truth, &params, &protocol, stage_seed(&cfg, harness::STAGE_RC_ANL), exec)
                }
                Framework::LetkfExt => bail!("LETKF-Ext has no reservoir to train"),
            }
            .with_context(|| format!("stage `{}`", framework.label()))?;
            outcome.net.write_binary(create(&out)?)?;
            println!("wrote trained {} network to {}", framework, out.display());
        }
        Command::Predict {
            cfg,
            framework,
            nature,
            input,
            net,
            out,
        } => {
            let cfg = cfg.load()?;
            let truth = read_nature(&nature)?;
            let protocol = cfg.eval_protocol();
            let load_net = || -> Result<ReservoirNet> {
                let path = net.as_deref().context("--net is required for reservoir frameworks")?;
                Ok(ReservoirNet::read_binary(open(path)?)?)
            };
            let sets = match framework {
                Framework::LetkfExt => {
                    let a = read_analysis(&input)?;
                    forecast::letkf_ext(
                        &a,
                        &cfg.forecast_model()?,
                        &truth,
                        &protocol.initial_steps(),
                        protocol.horizon,
                        exec,
                    )
                }
                Framework::RcObs => forecast::rc_obs_sets(&load_net()?, &read_observations(&input)?, &truth, &protocol, exec),
                Framework::RcAnl => forecast::rc_anl_sets(&load_net()?, &read_analysis(&input)?, &truth, &protocol, exec),
            }
            .with_context(|| format!("stage `{}`", framework.label()))?;
            let skill = forecast::mrmse(&sets)?;
            let mut h = osse_lab::io::Header::new("skill");
            h.set(osse_lab::io::CONFIG_HASH_KEY, cfg.hash()).set("name", &cfg.name);
            forecast::write_skill_csv(create(&out)?, &h, &[(framework.label().to_string(), &skill)])?;
            println!("wrote {} skill over {} sets to {}", framework, skill.n_sets, out.display());
        }
        Command::Evaluate { lead, skill, out } => {
            let mut tables = Vec::new();
            for path in &skill {
                let (cols, header) =
                    forecast::read_skill_csv(open(path)?).with_context(|| format!("reading {}", path.display()))?;
                // plain framework columns take the run name as their row
                let run = header
                    .get("name")
                    .map(str::to_string)
                    .unwrap_or_else(|| path.file_stem().unwrap_or_default().to_string_lossy().into_owned());
                let cols: Vec<_> = cols
                    .into_iter()
                    .map(|(n, s)| if n.contains('@') { (n, s) } else { (format!("{n}@{run}"), s) })
                    .collect();
                tables.push(cols);
            }
            let columns: Vec<(String, &forecast::SkillSeries)> =
                tables.iter().flatten().map(|(n, s)| (n.clone(), s)).collect();
            let table = harness::evaluate_columns(&columns, lead)?;
            match out {
                Some(p) => {
                    let mut w = create(&p)?;
                    table.write_csv(&mut w)?;
                    w.flush()?;
                }
                None => table.write_csv(std::io::stdout().lock())?,
            }
        }
        Command::Experiment { config, overrides, out } => {
            let cfg = load_config(&config, &overrides)?;
            let runner = runner(&out, &cfg, exec);
            let runs = harness::run_preset(&runner, &cfg)?;
            print_summary(&runs, out.lead)?;
        }
        Command::Sweep {
            config,
            overrides,
            parameter,
            values,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let (parameter, values) = match (parameter, cfg.sweep.as_ref()) {
                (Some(p), _) => (p.parse::<SweepParameter>()?, values),
                (None, Some(s)) if values.is_empty() => (s.parameter, s.values.clone()),
                (None, Some(s)) => (s.parameter, values),
                (None, _) => bail!("--parameter is required when the config has no sweep section"),
            };
            if values.is_empty() {
                bail!("--values is empty");
            }
            let runner = runner(&out, &cfg, exec);
            let outcome = runner.sweep(&cfg, parameter, &values)?;
            if let Some(p) = &outcome.combined {
                println!("combined skill table: {}", p.display());
            }
            print_summary(&outcome.runs, out.lead)?;
        }
        Command::Presets => {
            for name in harness::PRESET_NAMES {
                let cfg = ExperimentConfig::preset(name)?;
                let first = harness::preset_source(name)
                    .and_then(|s| s.lines().next())
                    .unwrap_or("")
                    .trim_start_matches("# ");
                println!("{name:<10} {}  {first}", &cfg.hash()[..12]);
            }
        }
    }
    Ok(())
}

fn runner(out: &OutArgs, cfg: &ExperimentConfig, exec: Execution) -> Runner {
    Runner::new(RunOptions {
        out_dir: Some(out.out.join(&cfg.name)),
        cache_dir: Some(out.cache.clone().unwrap_or_else(|| out.out.join("cache"))),
        keep_intermediates: out.keep_intermediates,
        exec,
    })
}

fn print_summary(runs: &[harness::RunArtifact], lead: usize) -> Result<()> {
    for r in runs {
        if let Some(p) = r.path("skill") {
            println!("{}: {}", r.name(), p.display());
        }
    }
    let horizon = runs.iter().map(|r| r.config.protocol.horizon).min().unwrap_or(0);
    if lead >= 1 && lead <= horizon {
        harness::evaluate(runs, lead)?.write_csv(std::io::stdout().lock())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

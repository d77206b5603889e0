use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forecast::{EvalProtocol, Framework};
use crate::letkf::LetkfConfig;
use crate::lorenz96::ModelParams;
use crate::osse::ObservationOperator;
use crate::reservoir::ReservoirParams;

/// Complete description of one experiment. Everything that influences any
/// output file lives here, so its hash identifies the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub frameworks: Vec<Framework>,
    pub model: ModelSection,
    pub observation: ObservationSection,
    pub letkf: LetkfSection,
    pub reservoir: ReservoirSection,
    pub protocol: ProtocolSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub m: usize,
    /// Forcing of the nature run.
    pub forcing_truth: f64,
    /// Forcing of the forecast model used by the LETKF and LETKF-Ext.
    pub forcing_model: f64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    /// Number of observed nodes; placed evenly around the ring unless
    /// `nodes` lists them explicitly.
    pub node_count: usize,
    /// One-based node numbers. Empty means evenly spaced.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<usize>,
    /// Model steps between observations.
    pub frequency: usize,
    pub error_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LetkfSection {
    pub ensemble_size: usize,
    pub inflation: f64,
    pub localization_scale: f64,
    /// Standard deviation of the initial ensemble around the true state.
    pub initial_spread: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReservoirSection {
    pub size: usize,
    pub input_scale: f64,
    pub density: f64,
    pub spectral_radius: f64,
    pub ridge: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSection {
    pub spinup_steps: usize,
    pub total_steps: usize,
    pub train_steps: usize,
    pub n_sets: usize,
    pub set_length: usize,
    pub horizon: usize,
    pub washout: usize,
    pub rc_spinup: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    /// Lead, in model steps, at which sweep results are tabulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lead: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    ErrorStd,
    Frequency,
    NodeCount,
    ForcingModel,
    TrainSteps,
}

impl SweepParameter {
    pub const ALL: [SweepParameter; 5] = [
        SweepParameter::ErrorStd,
        SweepParameter::Frequency,
        SweepParameter::NodeCount,
        SweepParameter::ForcingModel,
        SweepParameter::TrainSteps,
    ];

    pub fn key(self) -> &'static str {
        match self {
            SweepParameter::ErrorStd => "error_std",
            SweepParameter::Frequency => "frequency",
            SweepParameter::NodeCount => "node_count",
            SweepParameter::ForcingModel => "forcing_model",
            SweepParameter::TrainSteps => "train_steps",
        }
    }

    fn integral(self) -> bool {
        matches!(
            self,
            SweepParameter::Frequency | SweepParameter::NodeCount | SweepParameter::TrainSteps
        )
    }

    /// Copy of `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        if !value.is_finite() {
            return Err(Error::invalid(format!("sweep value {value} is not finite")));
        }
        let count = || -> Result<usize> {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(Error::invalid(format!(
                    "{} needs a non-negative integer, got {value}",
                    self.key()
                )));
            }
            Ok(value as usize)
        };
        let mut out = cfg.clone();
        out.sweep = None;
        match self {
            SweepParameter::ErrorStd => out.observation.error_std = value,
            SweepParameter::Frequency => out.observation.frequency = count()?,
            SweepParameter::NodeCount => {
                out.observation.node_count = count()?;
                out.observation.nodes.clear();
            }
            SweepParameter::ForcingModel => out.model.forcing_model = value,
            SweepParameter::TrainSteps => out.protocol.train_steps = count()?,
        }
        out.name = format!("{}@{}={}", cfg.name, self.key(), format_value(self, value));
        Ok(out)
    }
}

pub(crate) fn format_value(p: SweepParameter, v: f64) -> String {
    if p.integral() {
        format!("{}", v as i64)
    } else {
        format!("{v}")
    }
}

impl std::fmt::Display for SweepParameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

impl std::str::FromStr for SweepParameter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('-', "_");
        let alias = match key.as_str() {
            "e" => "error_std",
            "n" => "frequency",
            "nodes" => "node_count",
            "f_model" | "forcing" => "forcing_model",
            "train" => "train_steps",
            other => other,
        };
        SweepParameter::ALL
            .into_iter()
            .find(|p| p.key() == alias)
            .ok_or_else(|| Error::invalid(format!("unknown sweep parameter `{s}`")))
    }
}

/// Protocol constants every full-scale `fig*` preset must respect.
pub const REFERENCE_PROTOCOL: ProtocolSection = ProtocolSection {
    spinup_steps: 1_440_000,
    total_steps: 200_000,
    train_steps: 100_000,
    n_sets: 100,
    set_length: 1000,
    horizon: 400,
    washout: 100,
    rc_spinup: 100,
};

pub const PRESET_NAMES: [&str; 14] = [
    "smoke", "fig2", "fig3", "fig4", "fig5", "fig6", "fig7", "figS1", "figS2", "figS3", "desk-fig3",
    "desk-fig4", "desk-fig5", "desk-fig7",
];

pub fn preset_source(name: &str) -> Option<&'static str> {
    Some(match name {
        "smoke" => include_str!("../../../../configs/smoke.toml"),
        "fig2" => include_str!("../../../../configs/fig2.toml"),
        "fig3" => include_str!("../../../../configs/fig3.toml"),
        "fig4" => include_str!("../../../../configs/fig4.toml"),
        "fig5" => include_str!("../../../../configs/fig5.toml"),
        "fig6" => include_str!("../../../../configs/fig6.toml"),
        "fig7" => include_str!("../../../../configs/fig7.toml"),
        "figS1" => include_str!("../../../../configs/figS1.toml"),
        "figS2" => include_str!("../../../../configs/figS2.toml"),
        "figS3" => include_str!("../../../../configs/figS3.toml"),
        "desk-fig3" => include_str!("../../../../configs/desk-fig3.toml"),
        "desk-fig4" => include_str!("../../../../configs/desk-fig4.toml"),
        "desk-fig5" => include_str!("../../../../configs/desk-fig5.toml"),
        "desk-fig7" => include_str!("../../../../configs/desk-fig7.toml"),
        _ => return None,
    })
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let src = preset_source(name).ok_or_else(|| {
            Error::Config(format!(
                "unknown preset `{name}` (available: {})",
                PRESET_NAMES.join(", ")
            ))
        })?;
        Self::from_toml(src)
    }

    pub fn from_toml(src: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(src).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A preset name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if preset_source(name_or_path).is_some() {
            return Self::preset(name_or_path);
        }
        let src = std::fs::read_to_string(name_or_path)
            .map_err(|e| Error::Config(format!("cannot read `{name_or_path}`: {e}")))?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the value at a dotted path such as `reservoir.size`. The value is
    /// parsed as a TOML literal and falls back to a bare string.
    pub fn set_override(&mut self, path: &str, raw: &str) -> Result<()> {
        let cfg = self.assigned(path, raw)?;
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    fn assigned(&self, path: &str, raw: &str) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut node = &mut root;
        let mut parts = path.split('.').peekable();
        while let Some(part) = parts.next() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{path}` does not name a table entry")))?;
            if parts.peek().is_none() {
                if !table.contains_key(part) && !optional_key(path) {
                    return Err(Error::Config(format!("unknown key `{path}`")));
                }
                table.insert(part.to_string(), coerce(table.get(part), value));
                break;
            }
            if !table.contains_key(part) && path.starts_with("sweep.") {
                table.insert(part.to_string(), toml::Value::Table(Default::default()));
            }
            node = table
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown key `{path}`")))?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Parses and applies `key=value` strings in order; only the final
    /// configuration has to validate.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let mut cfg = self.clone();
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            cfg = cfg.assigned(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        *self = cfg;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.frameworks.is_empty() {
            return Err(Error::Config("at least one framework is required".into()));
        }
        self.model_params(self.model.forcing_truth)?;
        self.model_params(self.model.forcing_model)?;
        self.operator()?;
        if !(self.observation.error_std >= 0.0) || !self.observation.error_std.is_finite() {
            return Err(Error::Config("observation.error_std must be finite and >= 0".into()));
        }
        if self.needs_analysis() && self.observation.error_std == 0.0 {
            return Err(Error::Config(
                "the LETKF needs observation.error_std > 0".into(),
            ));
        }
        self.letkf_config().validate()?;
        if !(self.letkf.initial_spread >= 0.0) {
            return Err(Error::Config("letkf.initial_spread must be >= 0".into()));
        }
        self.reservoir_params(1).validate()?;
        self.eval_protocol().validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(Error::Config("sweep.values is empty".into()));
            }
            for &v in &s.values {
                s.parameter.apply(self, v)?.validate()?;
            }
        }
        Ok(())
    }

    /// Checks the protocol section against [`REFERENCE_PROTOCOL`]; `except`
    /// names fields that the preset deliberately varies.
    pub fn check_reference_protocol(&self, except: &[&str]) -> Result<()> {
        let (p, r) = (&self.protocol, &REFERENCE_PROTOCOL);
        let fields = [
            ("spinup_steps", p.spinup_steps, r.spinup_steps),
            ("total_steps", p.total_steps, r.total_steps),
            ("train_steps", p.train_steps, r.train_steps),
            ("n_sets", p.n_sets, r.n_sets),
            ("set_length", p.set_length, r.set_length),
            ("horizon", p.horizon, r.horizon),
            ("washout", p.washout, r.washout),
            ("rc_spinup", p.rc_spinup, r.rc_spinup),
        ];
        for (name, got, want) in fields {
            if got != want && !except.contains(&name) {
                return Err(Error::Config(format!("protocol.{name} is {got}, expected {want}")));
            }
        }
        Ok(())
    }

    pub fn needs_analysis(&self) -> bool {
        self.frameworks
            .iter()
            .any(|f| matches!(f, Framework::LetkfExt | Framework::RcAnl))
    }

    pub fn model_params(&self, forcing: f64) -> Result<ModelParams> {
        ModelParams::new(self.model.m, forcing, self.model.dt)
    }

    pub fn truth_model(&self) -> Result<ModelParams> {
        self.model_params(self.model.forcing_truth)
    }

    pub fn forecast_model(&self) -> Result<ModelParams> {
        self.model_params(self.model.forcing_model)
    }

    pub fn operator(&self) -> Result<ObservationOperator> {
        let o = &self.observation;
        if o.nodes.is_empty() {
            ObservationOperator::evenly_spaced(o.node_count, self.model.m)
        } else {
            if o.nodes.len() != o.node_count {
                return Err(Error::Config(format!(
                    "observation.nodes lists {} nodes but node_count is {}",
                    o.nodes.len(),
                    o.node_count
                )));
            }
            ObservationOperator::from_one_based(&o.nodes, self.model.m)
        }
    }

    pub fn letkf_config(&self) -> LetkfConfig {
        LetkfConfig {
            ensemble_size: self.letkf.ensemble_size,
            inflation: self.letkf.inflation,
            localization_scale: self.letkf.localization_scale,
            assimilation_window: self.observation.frequency,
        }
    }

    pub fn reservoir_params(&self, input_dim: usize) -> ReservoirParams {
        let r = &self.reservoir;
        ReservoirParams {
            size: r.size,
            input_scale: r.input_scale,
            density: r.density,
            spectral_radius: r.spectral_radius,
            ridge: r.ridge,
            input_dim,
        }
    }

    pub fn eval_protocol(&self) -> EvalProtocol {
        let p = &self.protocol;
        EvalProtocol {
            total_steps: p.total_steps,
            train_steps: p.train_steps,
            n_sets: p.n_sets,
            set_length: p.set_length,
            horizon: p.horizon,
            washout: p.washout,
            rc_spinup: p.rc_spinup,
            frequency: self.observation.frequency,
        }
    }

    /// Hex SHA-256 of every field except `name`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.name.clear();
        digest_json(&c)
    }
}

fn optional_key(path: &str) -> bool {
    matches!(path, "observation.nodes" | "sweep.lead") || path.starts_with("sweep.")
}

/// Integer literals assigned to float fields stay floats.
fn coerce(existing: Option<&toml::Value>, v: toml::Value) -> toml::Value {
    match (existing, v) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

pub(crate) fn digest_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes to JSON");
    hex(&Sha256::digest(json))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-stage seed: the first eight bytes of SHA-256 over the master seed,
/// the stage label and an index.
pub fn derive_seed(master: u64, label: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    h.update(index.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

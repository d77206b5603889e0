//! Config-driven experiments: presets, seeds, caching, sweeps and tables.
//!
//! Every randomized stage draws from a child seed derived from the master
//! seed and the stage label (see [`derive_seed`]), so a run is a pure
//! function of its [`ExperimentConfig`].

mod config;
mod run;
mod sweep;

pub use config::{
    derive_seed, preset_source, ExperimentConfig, LetkfSection, ModelSection, ObservationSection, ProtocolSection,
    ReservoirSection, SweepParameter, SweepSection, PRESET_NAMES, REFERENCE_PROTOCOL,
};
pub use run::{
    run_experiment, stage_seeds, write_prediction_csv, Cache, Manifest, RunArtifact, RunOptions, Runner, StageRecord,
    STAGE_ASSIMILATE, STAGE_ENSEMBLE, STAGE_LETKF_EXT, STAGE_NATURE, STAGE_OBSERVE, STAGE_RC_ANL, STAGE_RC_OBS, STAGE_SKILL,
};
pub use sweep::{evaluate, evaluate_columns, run_preset, EvalTable, SweepOutcome};

//! Declarative run configuration (versioned JSON) and its digest.
//!
//! The digest of the canonical serialization is embedded in every
//! emitted trace; replaying a digest reproduces the trace byte for
//! byte in scripted/fixture modes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub scenario: ScenarioSpec,
    pub t_steps: usize,
    /// Prediction horizon; defaults to `ceil(log_{1/ρ̂} T)` for the
    /// model's closed-loop spectral radius, clamped to `[1, 64]`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub loss: LossChoice,
    #[serde(default)]
    pub normalizer: NormalizerChoice,
    #[serde(default)]
    pub learning_rate: LearningRateConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<String>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let Some(k) = self.k {
            if k == 0 {
                return Err(Error::Config("k must be >= 1".into()));
            }
        }
        Ok(())
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Canonical serialization (fixed field order, compact JSON).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// sha256 of the canonical serialization.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_json().as_bytes());
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossChoice {
    #[default]
    Special,
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormalizerChoice {
    /// Divide MSE/MAE by `𝒯 − t` (clamped to one for single-entry
    /// windows).
    #[default]
    WindowGap,
    /// Divide by the window length `𝒯 − t + 1`.
    WindowLen,
}

/// `η_t = D / (G √(2(2k−1)(t+1)))`. Unset `d` defaults to the
/// hypothesis-set diameter; unset `g` to the per-scenario empirical
/// gradient bound. An explicit list overrides the formula.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct LearningRateConfig {
    #[serde(default)]
    pub d: Option<f64>,
    #[serde(default)]
    pub g: Option<f64>,
    #[serde(default)]
    pub explicit: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioSpec {
    /// Trajectory tracking with uniform wind and a perfect-information
    /// wind context channel.
    Drone {
        /// Total reference path length, default 16320 length units,
        /// traversed at constant speed over the run.
        #[serde(default = "default_path_length")]
        path_length: f64,
        #[serde(default = "default_wind_lo")]
        wind_lo: f64,
        #[serde(default = "default_wind_hi")]
        wind_hi: f64,
        /// Hypothesis ball radius around zero for the two wind
        /// coefficients.
        #[serde(default = "default_drone_radius")]
        radius: f64,
    },
    /// Synthetic battery/state-of-charge management: scalar plant,
    /// planted per-channel load effects, scheduled jobs with text
    /// descriptions classified through the (fixture) LLM client.
    BatterySynthetic {
        #[serde(default)]
        predictor: PredictorVariant,
        #[serde(default)]
        encoder: BatteryEncoderSource,
        #[serde(default = "default_idle_bias")]
        idle_bias: f64,
        #[serde(default = "default_channel_effects")]
        channel_effects: [f64; 3],
        #[serde(default = "default_solar_amplitude")]
        solar_amplitude: f64,
        #[serde(default = "default_noise_halfwidth")]
        noise_halfwidth: f64,
        /// SoC-deviation (state) weight; sentence-order reading of the
        /// published cost factors.
        #[serde(default = "default_state_weight")]
        state_weight: f64,
        /// Transaction (input) weight.
        #[serde(default = "default_input_weight")]
        input_weight: f64,
        #[serde(default = "default_battery_radius")]
        radius: f64,
        /// External fixture store (JSONL). Unset: the generator's own
        /// in-memory fixtures back the llm-fixture encoder.
        #[serde(default)]
        fixture_path: Option<String>,
        /// Scripted level table, only for `encoder = "scripted_table"`.
        #[serde(default)]
        scripted_table_path: Option<String>,
    },
    /// Arbitrary small LTI plant with i.i.d. disturbances and i.i.d.
    /// embeddings (the no-signal robustness setting when they are
    /// independent).
    Custom {
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        disturbance_mean: Vec<f64>,
        disturbance_scale: Vec<f64>,
        #[serde(default)]
        embedding_dim: usize,
        #[serde(default = "default_embedding_scale")]
        embedding_scale: f64,
        /// Packed initial parameters (full layout: C row-major, then b).
        #[serde(default)]
        theta0: Option<Vec<f64>>,
        radius: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorVariant {
    /// Affine decoder over per-channel effort levels.
    #[default]
    LlmEmbedding,
    /// Linear regression over job metadata features.
    Metadata,
    /// Bias only; no context.
    BiasOnly,
    /// Constant prediction equal to the run's average disturbance.
    FixedAverage,
    /// Constant zero prediction.
    FixedZero,
}

impl std::fmt::Display for PredictorVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            PredictorVariant::LlmEmbedding => "llm_embedding",
            PredictorVariant::Metadata => "metadata",
            PredictorVariant::BiasOnly => "bias_only",
            PredictorVariant::FixedAverage => "fixed_average",
            PredictorVariant::FixedZero => "fixed_zero",
        };
        write!(f, "{name}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BatteryEncoderSource {
    /// Classification through the client in hermetic fixture mode.
    #[default]
    LlmFixture,
    /// Classification through the live client (needs
    /// `CTXMPC_LLM_ENDPOINT`).
    Llm,
    /// True job levels fed directly through the categorical encoder.
    Categorical,
    /// Level probabilities from a scripted table file.
    ScriptedTable,
}

fn default_path_length() -> f64 {
    16_320.0
}
fn default_wind_lo() -> f64 {
    -20.0
}
fn default_wind_hi() -> f64 {
    20.0
}
fn default_drone_radius() -> f64 {
    1.0
}
fn default_idle_bias() -> f64 {
    -245.0
}
fn default_channel_effects() -> [f64; 3] {
    [-40.0, -45.0, -95.0]
}
fn default_solar_amplitude() -> f64 {
    120.0
}
fn default_noise_halfwidth() -> f64 {
    10.0
}
fn default_state_weight() -> f64 {
    1e-2
}
fn default_input_weight() -> f64 {
    1e-4
}
fn default_battery_radius() -> f64 {
    600.0
}
fn default_embedding_scale() -> f64 {
    1.0
}

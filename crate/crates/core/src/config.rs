//! Model, loss and run configuration.
//!
//! A run configuration file is TOML with `[model]`, `[loss]`, `[training]`
//! and `[data]` sections; every key is optional and falls back to the
//! defaults below.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{NoiseRule, PreprocessConfig, SynthSpec};
use crate::error::{config_err, Error, Result};
use crate::modality::Modality;
use crate::training::TrainConfig;

/// Number of sleep stages (Wake, N1, N2, N3, REM).
pub const NUM_CLASSES: usize = 5;

/// Which multimodal architecture a model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum FusionVariant {
    /// A single-modality encoder and predictor.
    Unimodal(Modality),
    /// One shared encoder over the concatenated modality sequences.
    Early,
    /// Separate encoders whose outer states are summed.
    MidLate,
    /// Separate encoders coupled by cross-attention.
    CoRe,
}

impl FusionVariant {
    pub fn is_multimodal(self) -> bool {
        !matches!(self, FusionVariant::Unimodal(_))
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionVariant::Unimodal(m) => write!(f, "unimodal-{m}"),
            FusionVariant::Early => f.write_str("early"),
            FusionVariant::MidLate => f.write_str("midlate"),
            FusionVariant::CoRe => f.write_str("core"),
        }
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "early" => Ok(FusionVariant::Early),
            "midlate" | "mid-late" => Ok(FusionVariant::MidLate),
            "core" => Ok(FusionVariant::CoRe),
            other => match other.strip_prefix("unimodal-") {
                Some(m) => Ok(FusionVariant::Unimodal(m.parse()?)),
                None => Err(config_err(format!("unknown fusion variant `{other}`"))),
            },
        }
    }
}

impl TryFrom<String> for FusionVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<FusionVariant> for String {
    fn from(v: FusionVariant) -> String {
        v.to_string()
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub fusion: FusionVariant,
    pub d_model: usize,
    pub heads: usize,
    pub d_k: usize,
    pub d_u: usize,
    pub d_ff: usize,
    pub inner_layers: usize,
    pub outer_layers: usize,
    /// STFT frames per 30 s window (T).
    pub frames: usize,
    /// Frequency features per frame (D).
    pub features: usize,
    /// Longest outer sequence (L).
    pub max_windows: usize,
    pub classes: usize,
    pub dropout: f64,
    pub layernorm_eps: f64,
    /// Use one predictor head for the multimodal and unimodal outputs.
    pub share_predictors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            fusion: FusionVariant::CoRe,
            d_model: 128,
            heads: 8,
            d_k: 16,
            d_u: 128,
            d_ff: 1024,
            inner_layers: 4,
            outer_layers: 4,
            frames: 29,
            features: 128,
            max_windows: 21,
            classes: NUM_CLASSES,
            dropout: 0.3,
            layernorm_eps: 1e-5,
            share_predictors: false,
        }
    }
}

impl ModelConfig {
    /// Tiny shapes for gradient checks: d_model 16, 2 heads, 2+2 layers.
    pub fn reduced() -> Self {
        Self {
            d_model: 16,
            heads: 2,
            d_k: 8,
            d_u: 8,
            d_ff: 32,
            inner_layers: 2,
            outer_layers: 2,
            frames: 5,
            features: 8,
            max_windows: 3,
            dropout: 0.0,
            ..Self::default()
        }
    }

    /// Small width that trains on one CPU core in about a minute, on the
    /// real feature shape (29 × 128).
    pub fn desk() -> Self {
        Self {
            d_model: 16,
            heads: 2,
            d_k: 8,
            d_u: 8,
            d_ff: 32,
            inner_layers: 1,
            outer_layers: 1,
            dropout: 0.1,
            ..Self::default()
        }
    }

    pub fn with_fusion(mut self, fusion: FusionVariant) -> Self {
        self.fusion = fusion;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_k", self.d_k),
            ("d_u", self.d_u),
            ("d_ff", self.d_ff),
            ("inner_layers", self.inner_layers),
            ("outer_layers", self.outer_layers),
            ("frames", self.frames),
            ("features", self.features),
            ("max_windows", self.max_windows),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err(format!("model.{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(config_err("model.classes must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config_err("model.dropout must lie in [0, 1)"));
        }
        if self.layernorm_eps <= 0.0 {
            return Err(config_err("model.layernorm_eps must be positive"));
        }
        Ok(())
    }
}

/// Which unimodal representation feeds the alignment loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignmentSource {
    /// Per-window outer-block states.
    OuterStates,
    /// Per-window inner [CLS] summaries.
    InnerCls,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Multi-supervised unimodal cross-entropies.
    pub ms: bool,
    /// Cross-modal alignment loss.
    pub al: bool,
    pub lambda_a: f64,
    /// L2-normalize representations before the alignment product.
    pub al_normalize: bool,
    pub al_source: AlignmentSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            ms: true,
            al: true,
            lambda_a: 0.1,
            al_normalize: true,
            al_source: AlignmentSource::OuterStates,
        }
    }
}

impl LossConfig {
    /// Multimodal cross-entropy only.
    pub fn plain() -> Self {
        Self {
            ms: false,
            al: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_a >= 0.0) {
            return Err(config_err("loss.lambda_a must be non-negative"));
        }
        Ok(())
    }
}

/// Everything a CLI run needs, as read from `--config`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
}

/// Dataset-level settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub preprocess: PreprocessConfig,
    pub synth: SynthSpec,
    pub noise: NoiseRule,
    pub patients: usize,
    pub windows_per_patient: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            preprocess: PreprocessConfig::default(),
            synth: SynthSpec::default(),
            noise: NoiseRule::default(),
            patients: 200,
            windows_per_patient: 100,
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults: small model, short schedule.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            training: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.data.synth.validate()?;
        self.data.noise.validate()?;
        self.training.validate()
    }
}

/// Hex SHA-256 of a value's TOML form; used to tie checkpoints and reports
/// to the configuration that produced them.
pub fn digest_of<S: Serialize>(value: &S) -> String {
    let text = toml::to_string(value).expect("digest input serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::perturb::DEFAULT_NOISE_BOUND;

/// Which loss terms and decoders take part in training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Supervised loss plus output and feature consistency through `G`.
    Semi,
    /// Supervised loss only.
    SupervisedOnly,
    /// Output consistency without the feature term.
    OutputOnlyConsistency,
    /// No `G`: the main decoder sees both the clean and the perturbed
    /// bottleneck, consistency between the two passes.
    NoAuxDecoder,
}

impl TrainMode {
    pub const ALL: [TrainMode; 4] =
        [TrainMode::Semi, TrainMode::SupervisedOnly, TrainMode::OutputOnlyConsistency, TrainMode::NoAuxDecoder];

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Semi => "semi",
            TrainMode::SupervisedOnly => "supervised_only",
            TrainMode::OutputOnlyConsistency => "output_only_consistency",
            TrainMode::NoAuxDecoder => "no_aux_decoder",
        }
    }

    pub fn uses_unlabeled(self) -> bool {
        self != TrainMode::SupervisedOnly
    }

    pub fn uses_feature_consistency(self) -> bool {
        matches!(self, TrainMode::Semi | TrainMode::NoAuxDecoder)
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// `"auto"` (from building statistics) or a fixed encoder depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PerturbDepth {
    #[default]
    Auto,
    Fixed(usize),
}

impl Serialize for PerturbDepth {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            PerturbDepth::Auto => s.serialize_str("auto"),
            PerturbDepth::Fixed(d) => s.serialize_u64(*d as u64),
        }
    }
}

impl<'de> Deserialize<'de> for PerturbDepth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Depth(usize),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Depth(v) => Ok(PerturbDepth::Fixed(v)),
            Raw::Name(s) if s == "auto" => Ok(PerturbDepth::Auto),
            Raw::Name(s) => {
                Err(serde::de::Error::custom(format!("perturb depth must be \"auto\" or an integer, got {s:?}")))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbConfig {
    pub noise_bound: f64,
    pub depth: PerturbDepth,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        Self { noise_bound: DEFAULT_NOISE_BOUND, depth: PerturbDepth::Auto }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Checkpoint interval in iterations; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub mode: TrainMode,
    #[serde(rename = "loss")]
    pub weights: LossWeights,
    pub perturb: PerturbConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            batch_size: 4,
            lr: 0.1,
            momentum: 0.9,
            seed: 0,
            eval_every: 500,
            checkpoint_every: 0,
            mode: TrainMode::Semi,
            weights: LossWeights::default(),
            perturb: PerturbConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("invalid optimizer settings lr={} momentum={}", self.lr, self.momentum)));
        }
        if !(0.0..1.0).contains(&self.perturb.noise_bound) {
            return Err(Error::Config(format!("noise bound {} outside [0, 1)", self.perturb.noise_bound)));
        }
        if let PerturbDepth::Fixed(d) = self.perturb.depth {
            if d == 0 || d > self.model.depth {
                return Err(Error::DepthOutOfRange { depth: d, max: self.model.depth });
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

//! Lab configuration file (TOML).
//!
//! Every section is optional; keys missing from the file keep the toy-preset
//! defaults, so a config only needs to list what it changes. A table carrying
//! a `kind` key (the optimizer) replaces its default wholesale.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::audio::MelConfig;
use crate::data::{SplitSpec, ToyDatasetSpec};
use crate::error::{Error, Result};
use crate::speaker::{VerifierArch, VerifierTrainConfig};
use crate::synth::SynthArch;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_trials: 1000,
            seed: 101,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub mel: MelConfig,
    pub verifier: VerifierArch,
    pub verifier_train: VerifierTrainConfig,
    pub synthesizer: SynthArch,
    pub baseline: TrainConfig,
    pub fc: TrainConfig,
    pub eval: EvalConfig,
    pub split: SplitSpec,
    pub toy: ToyDatasetSpec,
}

impl Default for LabConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl LabConfig {
    pub fn toy() -> Self {
        Self {
            mel: MelConfig::default(),
            verifier: VerifierArch::toy(),
            verifier_train: VerifierTrainConfig::default(),
            synthesizer: SynthArch::toy(),
            baseline: TrainConfig::baseline(),
            fc: TrainConfig::fc(),
            eval: EvalConfig::default(),
            split: SplitSpec::default(),
            toy: ToyDatasetSpec::default(),
        }
    }

    /// Full-scale networks; data, training and evaluation settings as in the toy preset.
    pub fn full() -> Self {
        Self {
            verifier: VerifierArch::full(),
            synthesizer: SynthArch::full(),
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.verifier.validate()?;
        self.synthesizer.validate()?;
        self.baseline.validate()?;
        self.fc.validate()?;
        self.toy.validate()?;
        if self.verifier.n_mels != self.mel.n_mels || self.synthesizer.n_mels != self.mel.n_mels {
            return Err(Error::config(format!(
                "n_mels disagree: mel {}, verifier {}, synthesizer {}",
                self.mel.n_mels, self.verifier.n_mels, self.synthesizer.n_mels
            )));
        }
        if self.verifier.embedding_dim() != self.synthesizer.speaker_dim {
            return Err(Error::config(format!(
                "verifier embeds into {} dims but the synthesizer expects {}",
                self.verifier.embedding_dim(),
                self.synthesizer.speaker_dim
            )));
        }
        if self.eval.n_trials % 2 != 0 {
            return Err(Error::config("eval.n_trials must be even"));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::config(format!("config: {e}")))?;
        let mut base = toml::Table::try_from(Self::toy()).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut base, user, "")?;
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }
}

// Keys absent from the serialized defaults that are still legal.
const OPTIONAL_KEYS: &[&str] = &["mel.normalization"];

fn merge(base: &mut toml::Table, user: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if !u.contains_key("kind") => {
                merge(b, u, &path)?;
            }
            (Some(slot), v) => *slot = v,
            (None, v) if OPTIONAL_KEYS.contains(&path.as_str()) => {
                base.insert(k, v);
            }
            (None, _) => return Err(Error::config(format!("unknown config key {path}"))),
        }
    }
    Ok(())
}

//! Run configuration: one JSON document shared by every command.

use std::path::{Path, PathBuf};

use mceend::encoders::{ModelConfig, Variant};
use mceend::features::FeatureConfig;
use mceend::scoring::DecodeConfig;
use mceend::simulate::SessionSpec;
use mceend::trainer::TrainConfig;
use mceend::{Error, Result};
use serde::{Deserialize, Serialize};

/// File name of the resolved configuration written next to artifacts.
pub const EFFECTIVE_CONFIG: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub sessions: usize,
    /// Session ids are `<prefix><index>`.
    pub prefix: String,
    pub spec: SessionSpec,
}

impl Default for SimulateSection {
    fn default() -> Self {
        SimulateSection {
            sessions: 10,
            prefix: "sess".into(),
            spec: SessionSpec::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Dataset directory holding `manifest.json`.
    pub dir: Option<PathBuf>,
    /// Use only the first this many channels of every session.
    pub channels: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferSection {
    /// Channel indices to feed the model; all channels when unset.
    pub channel_ids: Option<Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreSection {
    /// Dataset directory whose sessions carry `ref.rttm`.
    pub reference: Option<PathBuf>,
    /// Directory of `<session>.rttm` hypotheses.
    pub hypothesis: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub frames: usize,
    pub channels: Vec<usize>,
    pub variants: Vec<Variant>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            frames: 500,
            channels: vec![1, 2, 4, 8],
            variants: vec![Variant::Transformer, Variant::SpatioTemporal, Variant::CoAttention],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Overrides the nested `train.seed` and `simulate.spec.seed`.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Input checkpoint: resume point for `train`, required by `adapt` and
    /// `infer`.
    pub checkpoint: Option<PathBuf>,
    pub model: ModelConfig,
    pub features: FeatureConfig,
    pub train: TrainConfig,
    pub simulate: SimulateSection,
    pub data: DataSection,
    pub decode: DecodeConfig,
    pub infer: InferSection,
    pub score: ScoreSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies command-line overrides and propagates the seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Self {
        if seed.is_some() {
            self.seed = seed;
        }
        if out.is_some() {
            self.out = out;
        }
        if let Some(s) = self.seed {
            self.train.seed = s;
            self.simulate.spec.seed = s;
        }
        self
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("an output directory is required (config `out` or --out)".into()))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        self.data.dir.as_deref().ok_or_else(|| Error::Config("`data.dir` is required".into()))
    }

    pub fn checkpoint_path(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| Error::Config("`checkpoint` is required".into()))
    }

    /// Checks the model against the feature layout it will be fed.
    pub fn validate_model(&self, model: &ModelConfig) -> Result<()> {
        self.features.validate()?;
        model.validate()?;
        if model.input_dim != self.features.spliced_dim() || model.multi_input_dim != self.features.n_mels {
            return Err(Error::Config(format!(
                "model expects {}/{}-dim inputs, features give {}/{}",
                model.input_dim,
                model.multi_input_dim,
                self.features.spliced_dim(),
                self.features.n_mels
            )));
        }
        Ok(())
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Config(format!("{}: {e}", dir.display())))?;
        let path = dir.join(EFFECTIVE_CONFIG);
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

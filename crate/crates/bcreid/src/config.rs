//! Run configuration: one TOML file per experiment, unknown keys rejected.
//!
//! Every field has a default, so an empty file is a valid configuration of
//! the default benchmark and the proposed method. See `configs/default.toml`
//! for the documented layout.

use std::path::{Path, PathBuf};

use bcreid_core::losses::LossWeights;
use bcreid_core::model::Consolidation;
use bcreid_core::synth::BenchmarkConfig;
use bcreid_core::trainer::{Ablation, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{read_string, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "proposed")]
    Proposed,
    /// Base loss only, no attention.
    #[serde(rename = "finetune")]
    Finetune,
    /// One model on the union of all training splits.
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "base+cmcl")]
    BaseCmcl,
    #[serde(rename = "base+pcl")]
    BasePcl,
    #[serde(rename = "base+pcl+cac")]
    BasePclCac,
    /// Flags taken from the `[ablation]` section.
    #[serde(rename = "custom")]
    Custom,
}

impl Mode {
    pub const ALL: [Mode; 7] =
        [Self::Proposed, Self::Finetune, Self::Joint, Self::BaseCmcl, Self::BasePcl, Self::BasePclCac, Self::Custom];

    pub fn name(self) -> &'static str {
        match self {
            Self::Proposed => "proposed",
            Self::Finetune => "finetune",
            Self::Joint => "joint",
            Self::BaseCmcl => "base+cmcl",
            Self::BasePcl => "base+pcl",
            Self::BasePclCac => "base+pcl+cac",
            Self::Custom => "custom",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cac {
    Off,
    Multiply,
    Average,
}

impl Cac {
    pub fn consolidation(self) -> Option<Consolidation> {
        match self {
            Self::Off => None,
            Self::Multiply => Some(Consolidation::Multiply),
            Self::Average => Some(Consolidation::Average),
        }
    }

    pub fn from_consolidation(c: Option<Consolidation>) -> Self {
        match c {
            None => Self::Off,
            Some(Consolidation::Multiply) => Self::Multiply,
            Some(Consolidation::Average) => Self::Average,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSection {
    /// Data generation seed, shared by every training seed.
    pub seed: u64,
    pub tasks: usize,
    pub ids_per_domain_train: usize,
    pub ids_per_domain_eval: usize,
    pub images_per_id: usize,
    pub camera_count: usize,
    pub noise_sigma: f64,
    pub offset_gap: f64,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let c = BenchmarkConfig::default();
        Self {
            seed: 0,
            tasks: c.tasks,
            ids_per_domain_train: c.ids_per_domain_train,
            ids_per_domain_eval: c.ids_per_domain_eval,
            images_per_id: c.images_per_id,
            camera_count: c.camera_count,
            noise_sigma: c.noise_sigma,
            offset_gap: c.offset_gap,
        }
    }
}

impl BenchmarkSection {
    pub fn config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            tasks: self.tasks,
            ids_per_domain_train: self.ids_per_domain_train,
            ids_per_domain_eval: self.ids_per_domain_eval,
            images_per_id: self.images_per_id,
            camera_count: self.camera_count,
            noise_sigma: self.noise_sigma,
            offset_gap: self.offset_gap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs_per_task: usize,
    pub p: usize,
    pub k: usize,
    pub replay_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub replay_ids_per_task: usize,
    pub replay_images_per_id: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let c = TrainConfig::default();
        Self {
            epochs_per_task: c.epochs_per_task,
            p: c.p,
            k: c.k,
            replay_batch: c.replay_batch,
            lr: c.lr,
            momentum: c.momentum,
            replay_ids_per_task: c.replay_ids_per_task,
            replay_images_per_id: c.replay_images_per_id,
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs_per_task: self.epochs_per_task,
            p: self.p,
            k: self.k,
            replay_batch: self.replay_batch,
            lr: self.lr,
            momentum: self.momentum,
            replay_ids_per_task: self.replay_ids_per_task,
            replay_images_per_id: self.replay_images_per_id,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSection {
    pub lambda_ce: f64,
    pub lambda_tri: f64,
    pub lambda_cmcl: f64,
    pub lambda_pcl: f64,
    pub margin: f64,
    pub tau: f64,
    pub parts: usize,
}

impl Default for LossSection {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            lambda_ce: w.lambda_ce,
            lambda_tri: w.lambda_tri,
            lambda_cmcl: w.lambda_cmcl,
            lambda_pcl: w.lambda_pcl,
            margin: w.margin,
            tau: w.tau,
            parts: w.parts,
        }
    }
}

impl LossSection {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_ce: self.lambda_ce,
            lambda_tri: self.lambda_tri,
            lambda_cmcl: self.lambda_cmcl,
            lambda_pcl: self.lambda_pcl,
            margin: self.margin,
            tau: self.tau,
            parts: self.parts,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub cmcl: bool,
    pub pcl: bool,
    pub cac: Cac,
    pub normalize_cmcl: bool,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self { cmcl: true, pcl: true, cac: Cac::Multiply, normalize_cmcl: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub mode: Mode,
    /// Training seeds; one run directory per seed.
    pub seeds: Vec<u64>,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub benchmark: BenchmarkSection,
    pub train: TrainSection,
    pub loss: LossSection,
    /// Used only by `mode = "custom"`.
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Proposed,
            seeds: vec![1, 2, 3, 4, 5],
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            benchmark: BenchmarkSection::default(),
            train: TrainSection::default(),
            loss: LossSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

/// What a training mode switches on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModeSpec {
    pub ablation: Ablation,
    pub joint: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_string(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: bcreid_core::Error| Error::Config(format!("[{name}] {e}"));
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds: duplicate seed".into()));
        }
        self.benchmark.config().validate().map_err(|e| field("benchmark", e))?;
        self.train.config(0).validate().map_err(|e| field("train", e))?;
        self.loss.weights().validate().map_err(|e| field("loss", e))?;
        if self.loss.parts != bcreid_core::model::PARTS {
            return Err(Error::Config(format!("[loss] parts: the model has {} parts", bcreid_core::model::PARTS)));
        }
        Ok(())
    }

    pub fn mode_spec(&self, mode: Mode) -> ModeSpec {
        let base = Ablation::FINETUNE;
        let ablation = match mode {
            Mode::Proposed => Ablation::PROPOSED,
            Mode::Finetune | Mode::Joint => base,
            Mode::BaseCmcl => Ablation { cmcl: true, ..base },
            Mode::BasePcl => Ablation { pcl: true, ..base },
            Mode::BasePclCac => Ablation { pcl: true, attention: Some(Consolidation::Multiply), ..base },
            Mode::Custom => Ablation {
                cmcl: self.ablation.cmcl,
                pcl: self.ablation.pcl,
                attention: self.ablation.cac.consolidation(),
                normalize_cmcl: self.ablation.normalize_cmcl,
            },
        };
        ModeSpec { ablation, joint: mode == Mode::Joint }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let e = RunConfig::parse("[train]\nepochs = 3\n").unwrap_err();
        assert!(e.to_string().contains("epochs"), "{e}");
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn invalid_value_is_rejected() {
        let e = RunConfig::parse("[train]\nk = 1\n").unwrap_err();
        assert!(e.to_string().contains("[train]"), "{e}");
        assert!(RunConfig::parse("mode = \"bogus\"").is_err());
        assert!(RunConfig::parse("seeds = [1, 1]").is_err());
    }

    #[test]
    fn modes_map_to_flags() {
        let c = RunConfig::default();
        assert_eq!(c.mode_spec(Mode::Finetune).ablation, Ablation::FINETUNE);
        assert_eq!(c.mode_spec(Mode::Proposed).ablation.attention, Some(Consolidation::Multiply));
        assert!(c.mode_spec(Mode::Joint).joint);
        let custom = RunConfig::parse("mode = \"custom\"\n[ablation]\ncmcl = false\ncac = \"average\"\n").unwrap();
        let a = custom.mode_spec(Mode::Custom).ablation;
        assert!(!a.cmcl && a.pcl);
        assert_eq!(a.attention, Some(Consolidation::Average));
        for m in Mode::ALL {
            assert_eq!(Mode::parse(m.name()), Some(m));
        }
    }
}

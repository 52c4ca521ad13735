//! Experiment configuration: one flat key/value document (TOML), optionally
//! overlaid by command-line flags. Every key is optional in the file; the
//! resolver methods fill stage defaults and check what a stage needs.

use std::path::{Path, PathBuf};

use affordsplat_core::affordnet::ModelConfig;
use affordsplat_core::cmsa::CmsaConfig;
use affordsplat_core::datagen::{DatasetConfig, Holdout, HoldoutLevel, SplitMode};
use affordsplat_core::evalkit::IouMode;
use affordsplat_core::optim::AdamWConfig;
use affordsplat_core::train::{Stage, StageConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum StageName {
    Datagen,
    Pretrain,
    Finetune,
    Evaluate,
    Predict,
    Report,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Seen,
    Unseen,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum HoldoutName {
    Pair,
    Category,
    Affordance,
}

/// Which part of the split an evaluation walks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    Adamw,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, clap::Args)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<StageName>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,

    /// Compact dataset file.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Checkpoint to start finetuning from.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init: Option<PathBuf>,
    /// Checkpoint to evaluate or predict with.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Gaussian PLY for `predict`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
    /// MetricReport files for `report`.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reports: Option<Vec<PathBuf>>,
    /// Checkpoints whose loss histories `report` plots.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histories: Option<Vec<PathBuf>>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub objects: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<Vec<String>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_affordances: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_gaussians: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_gaussians: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jitter: Option<f64>,

    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitName>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<HoldoutName>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout_count: Option<usize>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerName>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta1: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta2: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    /// Validate every epoch and keep the best-mIoU parameters (finetune).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub select_best: Option<bool>,

    /// Fixed questions asked per evaluated sample.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub questions: Option<usize>,
    /// Single IoU threshold instead of the default sweep.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iou_threshold: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subset: Option<Subset>,

    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_text: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n1: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n2: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n3: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub group_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_heads: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_text_len: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub decoder_layers: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_consis: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pc_points: Option<usize>,
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Keys set in `top` replace those in `self`.
    pub fn overlay(self, top: &ExperimentConfig) -> Result<Self> {
        let mut base = serde_json::to_value(self).map_err(config_err)?;
        let top = serde_json::to_value(top).map_err(config_err)?;
        if let (Some(b), Some(t)) = (base.as_object_mut(), top.as_object()) {
            for (k, v) in t {
                b.insert(k.clone(), v.clone());
            }
        }
        serde_json::from_value(base).map_err(config_err)
    }

    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::Config("`seed` is mandatory for training stages".into()))
    }

    pub fn require_path<'a>(field: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
        field.as_ref().ok_or_else(|| Error::Config(format!("`{name}` is required for this stage")))
    }

    /// True when any architecture key is set explicitly.
    pub fn sets_model(&self) -> bool {
        [
            self.d,
            self.d_text,
            self.n1,
            self.n2,
            self.n3,
            self.group_size,
            self.heads,
            self.text_heads,
            self.text_layers,
            self.answer_layers,
            self.max_text_len,
            self.encoder_layers,
            self.decoder_layers,
        ]
        .iter()
        .any(Option::is_some)
    }

    /// Architecture keys applied over `base`.
    pub fn model_on(&self, base: ModelConfig) -> Result<ModelConfig> {
        let [n1, n2, n3] = base.granularity_sizes;
        let m = ModelConfig {
            d: self.d.unwrap_or(base.d),
            d_text: self.d_text.unwrap_or(base.d_text),
            granularity_sizes: [self.n1.unwrap_or(n1), self.n2.unwrap_or(n2), self.n3.unwrap_or(n3)],
            group_size: self.group_size.unwrap_or(base.group_size),
            heads: self.heads.unwrap_or(base.heads),
            text_heads: self.text_heads.unwrap_or(base.text_heads),
            text_layers: self.text_layers.unwrap_or(base.text_layers),
            answer_layers: self.answer_layers.unwrap_or(base.answer_layers),
            max_text_len: self.max_text_len.unwrap_or(base.max_text_len),
            encoder_refine_layers: self.encoder_layers.unwrap_or(base.encoder_refine_layers),
            decoder_layers: self.decoder_layers.unwrap_or(base.decoder_layers),
            ..base
        };
        m.validate()?;
        Ok(m)
    }

    pub fn model(&self) -> Result<ModelConfig> {
        self.model_on(ModelConfig::default())
    }

    pub fn cmsa(&self, d: usize) -> Result<CmsaConfig> {
        let base = CmsaConfig::for_width(d);
        let c = CmsaConfig {
            d_consis: self.d_consis.unwrap_or(base.d_consis),
            tau: self.tau.unwrap_or(base.tau),
            pc_points: self.pc_points.unwrap_or(base.pc_points),
            ..base
        };
        c.validate()?;
        Ok(c)
    }

    pub fn stage(&self, stage: Stage) -> Result<StageConfig> {
        let seed = self.require_seed()?;
        let base = match stage {
            Stage::Pretrain => StageConfig::pretrain(seed),
            Stage::Finetune => StageConfig::finetune(seed),
        };
        let o = base.optimizer;
        let s = StageConfig {
            optimizer: AdamWConfig {
                lr: self.lr.unwrap_or(o.lr),
                beta1: self.beta1.unwrap_or(o.beta1),
                beta2: self.beta2.unwrap_or(o.beta2),
                weight_decay: self.weight_decay.unwrap_or(o.weight_decay),
                ..o
            },
            epochs: self.epochs.unwrap_or(base.epochs),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            k: self.k.unwrap_or(base.k),
            ..base
        };
        s.validate()?;
        Ok(s)
    }

    pub fn dataset(&self) -> Result<DatasetConfig> {
        let base = DatasetConfig::default();
        let (lo, hi) = base.n_gaussians_range;
        let c = DatasetConfig {
            n_objects: self.objects.unwrap_or(base.n_objects),
            seed: self.seed.unwrap_or(base.seed),
            categories: self.categories.clone().unwrap_or(base.categories),
            max_affordances: self.max_affordances.or(base.max_affordances),
            n_gaussians_range: (self.min_gaussians.unwrap_or(lo), self.max_gaussians.unwrap_or(hi)),
            n_points: self.points.unwrap_or(base.n_points),
            jitter: self.jitter.unwrap_or(base.jitter),
        };
        if c.n_gaussians_range.0 == 0 || c.n_gaussians_range.0 > c.n_gaussians_range.1 {
            return Err(Error::Config(format!("gaussian count range {:?} is empty", c.n_gaussians_range)));
        }
        Ok(c)
    }

    pub fn split_mode(&self) -> SplitMode {
        match self.split.unwrap_or(SplitName::Seen) {
            SplitName::Seen => SplitMode::Seen,
            SplitName::Unseen => SplitMode::Unseen,
        }
    }

    pub fn holdout(&self) -> Holdout {
        let level = match self.holdout.unwrap_or(HoldoutName::Pair) {
            HoldoutName::Pair => HoldoutLevel::Pair,
            HoldoutName::Category => HoldoutLevel::Category,
            HoldoutName::Affordance => HoldoutLevel::Affordance,
        };
        Holdout { level, count: self.holdout_count }
    }

    pub fn iou_mode(&self) -> Result<IouMode> {
        match self.iou_threshold {
            None => Ok(IouMode::Sweep),
            Some(t) if t > 0.0 && t < 1.0 => Ok(IouMode::Threshold(t)),
            Some(t) => Err(Error::Config(format!("iou_threshold {t} must lie in (0, 1)"))),
        }
    }

    pub fn question_count(&self) -> Result<usize> {
        match self.questions.unwrap_or(3) {
            0 => Err(Error::Config("at least one evaluation question is needed".into())),
            q => Ok(q),
        }
    }
}

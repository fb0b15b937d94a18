//! Run configuration, read from TOML with `[model]`, `[stage]`, `[schedule]`,
//! `[optimizer]` and `[data]` sections plus a mandatory top-level `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::AdamConfig;

/// Stage-2 conversion method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Replace,
    Joint,
    Freeze,
}

/// Stage-3 loss mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossMode {
    #[serde(rename = "ce")]
    Ce,
    #[serde(rename = "ce+ctc")]
    CeCtc,
    #[serde(rename = "pt-ctc+ce")]
    PtCtcCe,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replace" => Ok(Method::Replace),
            "joint" => Ok(Method::Joint),
            "freeze" => Ok(Method::Freeze),
            _ => Err(Error::Config(format!("unknown method {s:?}; expected replace, joint or freeze"))),
        }
    }
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossMode::Ce),
            "ce+ctc" => Ok(LossMode::CeCtc),
            "pt-ctc+ce" => Ok(LossMode::PtCtcCe),
            _ => Err(Error::Config(format!("unknown loss {s:?}; expected ce, ce+ctc or pt-ctc+ce"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Replace => "replace",
            Method::Joint => "joint",
            Method::Freeze => "freeze",
        })
    }
}

impl std::fmt::Display for LossMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossMode::Ce => "ce",
            LossMode::CeCtc => "ce+ctc",
            LossMode::PtCtcCe => "pt-ctc+ce",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    /// Target depth of the stage-1 character encoder.
    pub layers: usize,
    /// Depth of the randomly initialized stage-3 baseline encoder.
    pub baseline_layers: usize,
    /// ULSTM layers in the stage-2 BPE stack (joint and freeze).
    pub bpe_layers: usize,
    pub dropout: f64,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub emb_dim: usize,
    pub dec_hidden: usize,
    pub att_dim: usize,
    pub chunk_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 256,
            layers: 6,
            baseline_layers: 8,
            bpe_layers: 2,
            dropout: 0.3,
            batch_norm: true,
            bn_momentum: crate::layers::BN_MOMENTUM,
            emb_dim: 64,
            dec_hidden: 256,
            att_dim: 128,
            chunk_width: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub stage: u8,
    pub method: Option<Method>,
    pub loss: Option<LossMode>,
    /// Checkpoint to initialize from (stage 2 requires one; stage 3 without one trains a baseline).
    pub init: Option<PathBuf>,
    /// Training length in epochs.
    pub epochs: f64,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            stage: 1,
            method: None,
            loss: None,
            init: None,
            epochs: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Enables the growth and pooling pre-training schedules.
    pub pretrain: bool,
    /// Steps between layer additions in stage 1; 0 means ⌈steps_per_epoch/3⌉.
    pub layer_every: u64,
    /// Length of the stage-2 freeze window; 0 means one epoch.
    pub freeze_steps: u64,
    /// Steps between dev evaluations; 0 means ⌈steps_per_epoch/2⌉.
    pub dev_every: u64,
    pub char_weight: f64,
    pub bpe_weight: f64,
    pub ce_weight: f64,
    pub ctc_weight: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            pretrain: true,
            layer_every: 0,
            freeze_steps: 0,
            dev_every: 0,
            char_weight: 0.5,
            bpe_weight: 0.5,
            ce_weight: 0.5,
            ctc_weight: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub dev: PathBuf,
    /// Letters of the character inventory; empty means A–Z.
    pub letters: String,
    /// BPE merges file (needed from stage 2 on).
    pub bpe: Option<PathBuf>,
    pub frame_budget: usize,
    /// Cap on decoded output length in BPE tokens (eos included).
    pub max_decode_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: PathBuf::from("train.tsv"),
            dev: PathBuf::from("dev.tsv"),
            letters: String::new(),
            bpe: None,
            frame_budget: 2000,
            max_decode_len: 40,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub stage: StageConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    /// Adam settings. A `warmup` of 0 means one epoch of steps.
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default)]
    pub data: DataConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Resolves relative data and init paths against `root`.
    pub fn rebase(&mut self, root: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        };
        fix(&mut self.data.train);
        fix(&mut self.data.dev);
        if let Some(p) = self.data.bpe.as_mut() {
            fix(p);
        }
        if let Some(p) = self.stage.init.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.stage;
        match s.stage {
            1 => {}
            2 if s.method.is_none() => return Err(Error::Config("stage 2 needs a method (--method)".into())),
            2 if s.init.is_none() => return Err(Error::Config("stage 2 needs an init checkpoint (--init)".into())),
            2 => {}
            3 if s.loss.is_none() => return Err(Error::Config("stage 3 needs a loss mode (--loss)".into())),
            3 => {}
            n => return Err(Error::Config(format!("stage must be 1, 2 or 3, got {n}"))),
        }
        if !(s.epochs > 0.0) {
            return Err(Error::Config("stage.epochs must be positive".into()));
        }
        let m = &self.model;
        if m.hidden == 0 || m.layers == 0 || m.bpe_layers == 0 || m.baseline_layers < 4 {
            return Err(Error::Config("model sizes must be positive (baseline_layers ≥ 4)".into()));
        }
        if m.chunk_width == 0 {
            return Err(Error::Config("model.chunk_width must be ≥ 1".into()));
        }
        if self.data.frame_budget == 0 || self.data.max_decode_len == 0 {
            return Err(Error::Config("data.frame_budget and data.max_decode_len must be positive".into()));
        }
        Ok(())
    }
}

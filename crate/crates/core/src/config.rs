//! The run configuration file (TOML), shared by every command.
//!
//! ```toml
//! phase = "finetune"
//!
//! [data]
//! train_manifest = "data/train/manifest.jsonl"
//!
//! [backbone]
//! image_size = 32
//! patch_size = 4
//!
//! [loss]
//! preset = "paper"
//!
//! [detector]
//! kind = "oracle"
//! noise_frac = 0.0
//!
//! [train]
//! epochs = 100
//! lr0 = 1e-3
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::SceneConfig;
use crate::detector::DEFAULT_MAX_DETS;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::promptdecoder::DecoderConfig;
use crate::training::{Phase, TrainConfig, TrainOverrides};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    /// Depth normalisation ceiling in metres.
    pub depth_max: f32,
    /// Used by `gen-synth`; width and height must equal the backbone image size.
    pub synth: SceneConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_manifest: None,
            eval_manifest: None,
            depth_max: 10.0,
            synth: SceneConfig {
                width: BackboneConfig::default().image_size,
                height: BackboneConfig::default().image_size,
                ..SceneConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossBlock {
    pub preset: Option<String>,
    pub w_focal: Option<f64>,
    pub w_dice: Option<f64>,
    pub w_mse: Option<f64>,
    pub gamma: Option<f64>,
    pub alpha: Option<f64>,
    pub eps: Option<f64>,
}

impl LossBlock {
    pub fn resolve(&self) -> Result<LossConfig> {
        let mut c = LossConfig::preset(self.preset.as_deref().unwrap_or("paper"))?;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(w_focal, w_dice, w_mse, gamma, alpha, eps);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Oracle,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub noise_frac: f32,
    pub score_thresh: f32,
    pub max_dets: usize,
    /// Box file for `external`.
    pub weights_path: Option<PathBuf>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            kind: DetectorKind::Oracle,
            noise_frac: 0.0,
            score_thresh: 0.0,
            max_dets: DEFAULT_MAX_DETS,
            weights_path: None,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise_frac) {
            return Err(Error::config("detector.noise_frac", "must lie in [0, 0.5)"));
        }
        if !(0.0..=1.0).contains(&self.score_thresh) {
            return Err(Error::config("detector.score_thresh", "must lie in [0, 1]"));
        }
        if self.max_dets == 0 {
            return Err(Error::config("detector.max_dets", "must be >= 1"));
        }
        if self.kind == DetectorKind::External && self.weights_path.is_none() {
            return Err(Error::config("detector.weights_path", "required for kind = \"external\""));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub noise_sweep: Vec<f32>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            noise_sweep: vec![0.0, 0.1, 0.2, 0.3],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: Option<PathBuf>,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phase: Phase,
    /// Positional terms in encoder, prompt encoder and decoder.
    pub positional: bool,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub loss: LossBlock,
    pub detector: DetectorConfig,
    pub train: TrainOverrides,
    pub eval: EvalConfig,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            phase: Phase::Finetune,
            positional: true,
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossBlock::default(),
            detector: DetectorConfig::default(),
            train: TrainOverrides::default(),
            eval: EvalConfig::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(toml_key(&e), e.message().trim()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        let mut cfg = Self::parse(&text)?;
        // relative data paths are taken from the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.data.train_manifest, &mut cfg.data.eval_manifest, &mut cfg.detector.weights_path]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            decoder: self.decoder.clone(),
            positional: self.positional,
            depth_max: self.data.depth_max,
        }
    }

    /// Phase preset with the `train` and `loss` blocks applied.
    pub fn train_config(&self, phase: Phase) -> Result<TrainConfig> {
        let mut t = self.train.apply(TrainConfig::for_phase(phase));
        t.loss = self.loss.resolve()?;
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.data.synth.validate().map_err(|e| match e {
            Error::Config { key, msg } => Error::config(format!("data.synth.{key}"), msg),
            e => e,
        })?;
        let s = &self.data.synth;
        if s.width != self.backbone.image_size || s.height != self.backbone.image_size {
            return Err(Error::config(
                "data.synth",
                format!(
                    "scenes are {}x{} but backbone.image_size is {}",
                    s.width, s.height, self.backbone.image_size
                ),
            ));
        }
        self.loss.resolve()?;
        self.detector.validate()?;
        if self.eval.noise_sweep.iter().any(|n| !(0.0..0.5).contains(n)) {
            return Err(Error::config("eval.noise_sweep", "values must lie in [0, 0.5)"));
        }
        self.train_config(self.phase)?;
        Ok(())
    }
}

fn toml_key(e: &toml::de::Error) -> String {
    // serde reports unknown or mistyped fields in the message; the span is
    // all the structure the parser exposes
    match e.span() {
        Some(s) => format!("config (bytes {}..{})", s.start, s.end),
        None => "config".into(),
    }
}

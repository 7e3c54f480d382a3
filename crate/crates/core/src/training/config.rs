use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::nn::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Parameter groups, keyed by name prefix. Order matters: the IoU head sits
/// inside the decoder namespace and must be matched first.
pub const GROUPS: [(&str, &str); 6] = [
    ("transformer", "transformer."),
    ("cnn", "cnn."),
    ("stem", "stem."),
    ("prompt_encoder", "prompt."),
    ("iou_head", "decoder.iou_head."),
    ("mask_decoder", "decoder."),
];

pub fn group_of(name: &str) -> Option<&'static str> {
    GROUPS.iter().find(|(_, p)| name.starts_with(p)).map(|(g, _)| *g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezePolicy {
    pub prompt_encoder: bool,
    pub iou_head: bool,
    pub transformer_branch: bool,
    /// Further groups to freeze, by name from [`GROUPS`].
    pub extra: Vec<String>,
}

impl Default for FreezePolicy {
    fn default() -> Self {
        FreezePolicy {
            prompt_encoder: true,
            iou_head: true,
            transformer_branch: false,
            extra: Vec::new(),
        }
    }
}

impl FreezePolicy {
    pub fn frozen_groups(&self) -> Result<BTreeSet<&'static str>> {
        let mut out = BTreeSet::new();
        if self.prompt_encoder {
            out.insert("prompt_encoder");
        }
        if self.iou_head {
            out.insert("iou_head");
        }
        if self.transformer_branch {
            out.insert("transformer");
        }
        for g in &self.extra {
            let known = GROUPS
                .iter()
                .find(|(n, _)| n == g)
                .ok_or_else(|| Error::config("train.freeze.extra", format!("unknown parameter group `{g}`")))?;
            out.insert(known.0);
        }
        Ok(out)
    }
}

/// Marks frozen parameters in the store and returns the trainable names.
pub fn apply_freeze_policy(store: &mut ParamStore, policy: &FreezePolicy) -> Result<BTreeSet<String>> {
    let frozen_groups = policy.frozen_groups()?;
    let mut frozen = BTreeSet::new();
    let mut trainable = BTreeSet::new();
    for name in store.names() {
        let g = group_of(name).ok_or_else(|| Error::config(name.as_str(), "parameter belongs to no known group"))?;
        if frozen_groups.contains(g) {
            frozen.insert(name.clone());
        } else {
            trainable.insert(name.clone());
        }
    }
    store.set_frozen(frozen);
    Ok(trainable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    /// SGD only.
    pub momentum: f64,
    pub loss: LossConfig,
    pub noise_frac: f32,
    pub flip_prob: f64,
    /// `None` means 0.1% of the image area.
    pub min_mask_area: Option<usize>,
    pub freeze: FreezePolicy,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            epochs: 40,
            batch_size: 12,
            lr0: 1e-4,
            weight_decay: 0.01,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            loss: LossConfig::default(),
            noise_frac: 0.0,
            flip_prob: 0.5,
            min_mask_area: None,
            freeze: FreezePolicy::default(),
            seed: 0,
            clip_norm: Some(1.0),
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            epochs: 15,
            noise_frac: 0.1,
            min_mask_area: Some(0),
            ..Self::pretrain()
        }
    }

    pub fn for_phase(phase: Phase) -> Self {
        match phase {
            Phase::Pretrain => Self::pretrain(),
            Phase::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("train.{k}"), m));
        if self.epochs == 0 {
            return bad("epochs", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0", "must be > 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be >= 0");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", "must lie in [0, 1)");
        }
        if !(0.0..0.5).contains(&self.noise_frac) {
            return bad("noise_frac", "must lie in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad("flip_prob", "must lie in [0, 1]");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm", "must be > 0");
            }
        }
        self.loss.validate().map_err(|e| match e {
            Error::Config { key, msg } => Error::config(format!("train.{key}"), msg),
            e => e,
        })?;
        self.freeze.frozen_groups()?;
        Ok(())
    }

    pub fn min_mask_area_for(&self, height: usize, width: usize) -> usize {
        self.min_mask_area
            .unwrap_or_else(|| crate::data::default_min_mask_area(height, width))
    }
}

/// Partial `train` block; unset fields keep the phase preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOverrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub weight_decay: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub momentum: Option<f64>,
    pub noise_frac: Option<f32>,
    pub flip_prob: Option<f64>,
    pub min_mask_area: Option<usize>,
    pub freeze: Option<FreezePolicy>,
    pub seed: Option<u64>,
    pub clip_norm: Option<f64>,
}

impl TrainOverrides {
    pub fn apply(&self, mut cfg: TrainConfig) -> TrainConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f.clone() { cfg.$f = v; } )* };
        }
        set!(epochs, batch_size, lr0, weight_decay, optimizer, momentum, noise_frac, flip_prob, freeze, seed);
        if let Some(a) = self.min_mask_area {
            cfg.min_mask_area = Some(a);
        }
        if let Some(c) = self.clip_norm {
            cfg.clip_norm = (c > 0.0).then_some(c);
        }
        cfg
    }
}

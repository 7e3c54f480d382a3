use std::borrow::Cow;
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, Checkpoint, Progress};
use super::config::{apply_freeze_policy, Phase, TrainConfig};
use super::optim::{cosine_lr, OptimConfig, Optimizer};
use crate::data::{
    filter_small_masks, flip_mask, horizontal_flip, jitter_box, sample_pretrain_target, tight_box, BoxPrompt, Mask,
    PseudoLabelSet, RgbdSample,
};
use crate::error::{Error, Result};
use crate::losses::min_of_three_loss;
use crate::model::PlaneSegModel;

/// One prompt and its target, ready for the network.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub sample: Cow<'a, RgbdSample>,
    pub mask: Mask,
    pub prompt: BoxPrompt,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepReport {
    pub loss: f64,
    pub lr: f64,
    pub used: usize,
    pub skipped: usize,
    pub selected: Vec<usize>,
    pub grad_norm: f64,
}

/// Instrumentation for the phase contracts.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Counters {
    pub steps: u64,
    pub samples: u64,
    pub skipped: u64,
    pub masks_filtered: u64,
    pub prompts_jittered: u64,
    pub flips: u64,
    pub selected: [u64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub skipped: usize,
}

pub struct BatchLoss {
    pub loss: Tensor,
    pub selected: Vec<usize>,
    pub candidates: Vec<Vec<f64>>,
}

pub struct Trainer {
    pub model: PlaneSegModel,
    pub cfg: TrainConfig,
    pub optimizer: Optimizer,
    pub trainable: BTreeSet<String>,
    pub progress: Progress,
    pub rng: ChaCha8Rng,
    pub counters: Counters,
}

pub fn steps_per_epoch(n_samples: usize, batch_size: usize) -> u64 {
    n_samples.div_ceil(batch_size.max(1)) as u64
}

impl Trainer {
    /// `steps_per_epoch` fixes the schedule length: `epochs · steps_per_epoch`.
    pub fn new(mut model: PlaneSegModel, cfg: TrainConfig, steps_per_epoch: u64) -> Result<Self> {
        cfg.validate()?;
        let trainable = apply_freeze_policy(&mut model.store, &cfg.freeze)?;
        Ok(Trainer {
            optimizer: Optimizer::new(OptimConfig::from_train(&cfg)),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            progress: Progress {
                step: 0,
                total_steps: cfg.epochs as u64 * steps_per_epoch.max(1),
                epoch: 0,
            },
            model,
            cfg,
            trainable,
            counters: Counters::default(),
        })
    }

    /// Continue a run from a checkpoint that carries its training state.
    pub fn resume(ckpt: Checkpoint) -> Result<Self> {
        let cfg = ckpt
            .train
            .ok_or_else(|| Error::Incompatible("checkpoint has no training config".into()))?;
        let mut t = Trainer::new(ckpt.model, cfg, 1)?;
        t.progress = ckpt.progress;
        if let Some(o) = ckpt.optimizer {
            t.optimizer = o;
        }
        if let Some(r) = ckpt.rng {
            t.rng = r;
        }
        Ok(t)
    }

    pub fn lr(&self) -> f64 {
        cosine_lr(self.progress.step, self.progress.total_steps, self.cfg.lr0)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            &self.model,
            Some(&self.optimizer),
            Some(&self.cfg),
            self.progress,
            Some(&self.rng),
        )
    }

    fn maybe_flip<'a>(&mut self, item: TrainItem<'a>) -> TrainItem<'a> {
        if self.cfg.flip_prob > 0.0 && self.rng.gen_bool(self.cfg.flip_prob) {
            self.counters.flips += 1;
            let (s, b) = horizontal_flip(&item.sample, &[item.prompt]);
            TrainItem {
                sample: Cow::Owned(s),
                mask: flip_mask(&item.mask),
                prompt: b[0],
            }
        } else {
            item
        }
    }

    /// Filter, pick one mask, take its tight box, maybe flip. `None` when the
    /// sample has nothing left to train on.
    pub fn prepare_pretrain<'a>(&mut self, sample: &'a RgbdSample, labels: &PseudoLabelSet) -> Result<Option<TrainItem<'a>>> {
        let min_area = self.cfg.min_mask_area_for(sample.height(), sample.width());
        let kept = filter_small_masks(labels, min_area);
        self.counters.masks_filtered += (labels.len() - kept.len()) as u64;
        if kept.is_empty() {
            return Ok(None);
        }
        let (mask, prompt) = sample_pretrain_target(&kept, &mut self.rng)?;
        let prompt = self.jitter(prompt, sample)?;
        let item = TrainItem {
            sample: Cow::Borrowed(sample),
            mask,
            prompt,
        };
        Ok(Some(self.maybe_flip(item)))
    }

    /// Pick one plane uniformly, jitter its tight box, maybe flip.
    pub fn prepare_finetune<'a>(&mut self, sample: &'a RgbdSample) -> Result<Option<TrainItem<'a>>> {
        let planes: Vec<&Mask> = match &sample.annotation {
            Some(a) => a.plane_masks().collect(),
            None => Vec::new(),
        };
        if planes.is_empty() {
            return Ok(None);
        }
        let mask = planes[self.rng.gen_range(0..planes.len())].clone();
        let tight = tight_box(&mask).ok_or_else(|| Error::Sampling(format!("`{}`: empty plane mask", sample.id)))?;
        let prompt = self.jitter(tight, sample)?;
        let item = TrainItem {
            sample: Cow::Borrowed(sample),
            mask,
            prompt,
        };
        Ok(Some(self.maybe_flip(item)))
    }

    fn jitter(&mut self, b: BoxPrompt, sample: &RgbdSample) -> Result<BoxPrompt> {
        if self.cfg.noise_frac == 0.0 {
            return Ok(b);
        }
        self.counters.prompts_jittered += 1;
        jitter_box(&b, self.cfg.noise_frac, sample.width(), sample.height(), &mut self.rng)
    }

    /// Mean min-of-three loss over the items, with the graph attached.
    pub fn batch_loss(&self, items: &[TrainItem<'_>]) -> Result<BatchLoss> {
        let m = &self.model;
        let samples: Vec<&RgbdSample> = items.iter().map(|i| i.sample.as_ref()).collect();
        let (rgb, depth) = m.sample_tensors(&samples)?;
        let s = m.image_size();
        let mut t = Vec::with_capacity(items.len() * s * s);
        for it in items {
            t.extend(it.mask.iter().map(|&v| if v { 1f32 } else { 0.0 }));
        }
        let target = Tensor::from_vec(t, (items.len(), 1, s, s), m.store.device())?.to_dtype(m.store.dtype())?;
        let boxes: Vec<BoxPrompt> = items.iter().map(|i| i.prompt).collect();
        let out = m.forward(&rgb, &depth, &boxes)?;
        let diag = |e: Error| match e {
            Error::Numeric { stage, msg } => {
                let ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
                Error::numeric(stage, format!("{msg}; batch {ids:?}, step {}", self.progress.step))
            }
            e => e,
        };
        let (sel, selected, candidates) = min_of_three_loss(&out.logits, &target, &self.cfg.loss, Some(&out.iou)).map_err(diag)?;
        Ok(BatchLoss {
            loss: sel.mean_all()?,
            selected,
            candidates,
        })
    }

    pub fn loss_and_grads(&self, items: &[TrainItem<'_>]) -> Result<(BatchLoss, GradStore)> {
        let bl = self.batch_loss(items)?;
        let v = bl.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !v.is_finite() {
            let ids: Vec<&str> = items.iter().map(|i| i.sample.id.as_str()).collect();
            return Err(Error::numeric(
                None,
                format!("loss {v} at step {}; batch {ids:?}; candidate losses {:?}", self.progress.step, bl.candidates),
            ));
        }
        let grads = bl.loss.backward()?;
        Ok((bl, grads))
    }

    fn step_on(&mut self, items: Vec<TrainItem<'_>>, skipped: usize) -> Result<StepReport> {
        self.counters.skipped += skipped as u64;
        let lr = self.lr();
        if items.is_empty() {
            return Ok(StepReport {
                loss: f64::NAN,
                lr,
                used: 0,
                skipped,
                selected: Vec::new(),
                grad_norm: 0.0,
            });
        }
        let (bl, grads) = self.loss_and_grads(&items)?;
        let stats = self.optimizer.step(&self.model.store, &grads, &self.trainable, lr)?;
        self.progress.step += 1;
        self.counters.steps += 1;
        self.counters.samples += items.len() as u64;
        for &i in &bl.selected {
            self.counters.selected[i] += 1;
        }
        Ok(StepReport {
            loss: bl.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            lr,
            used: items.len(),
            skipped,
            selected: bl.selected,
            grad_norm: stats.grad_norm,
        })
    }

    pub fn pretrain_step(&mut self, batch: &[(&RgbdSample, &PseudoLabelSet)]) -> Result<StepReport> {
        let mut items = Vec::new();
        let mut skipped = 0;
        for (s, l) in batch {
            match self.prepare_pretrain(s, l)? {
                Some(it) => items.push(it),
                None => skipped += 1,
            }
        }
        self.step_on(items, skipped)
    }

    pub fn finetune_step(&mut self, batch: &[&RgbdSample]) -> Result<StepReport> {
        let mut items = Vec::new();
        let mut skipped = 0;
        for s in batch {
            match self.prepare_finetune(s)? {
                Some(it) => items.push(it),
                None => skipped += 1,
            }
        }
        self.step_on(items, skipped)
    }

    fn epoch_order(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        order
    }

    fn finish_epoch(&mut self, reports: &[StepReport]) -> EpochLog {
        let used: Vec<&StepReport> = reports.iter().filter(|r| r.used > 0).collect();
        let mean_loss = if used.is_empty() {
            f64::NAN
        } else {
            used.iter().map(|r| r.loss).sum::<f64>() / used.len() as f64
        };
        self.progress.epoch += 1;
        EpochLog {
            epoch: self.progress.epoch,
            mean_loss,
            lr: reports.last().map_or(self.lr(), |r| r.lr),
            skipped: reports.iter().map(|r| r.skipped).sum(),
        }
    }

    pub fn pretrain_epoch(&mut self, data: &[(RgbdSample, PseudoLabelSet)]) -> Result<EpochLog> {
        if self.cfg.phase != Phase::Pretrain {
            return Err(Error::config("phase", "pretrain epoch on a finetune config"));
        }
        let order = self.epoch_order(data.len());
        let mut reports = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<(&RgbdSample, &PseudoLabelSet)> = chunk.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
            reports.push(self.pretrain_step(&batch)?);
        }
        Ok(self.finish_epoch(&reports))
    }

    pub fn finetune_epoch(&mut self, data: &[RgbdSample]) -> Result<EpochLog> {
        if self.cfg.phase != Phase::Finetune {
            return Err(Error::config("phase", "finetune epoch on a pretrain config"));
        }
        let order = self.epoch_order(data.len());
        let mut reports = Vec::new();
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&RgbdSample> = chunk.iter().map(|&i| &data[i]).collect();
            reports.push(self.finetune_step(&batch)?);
        }
        Ok(self.finish_epoch(&reports))
    }
}

pub fn append_epoch_log(path: &Path, row: &EpochLog) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(row).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_scene, SceneConfig};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> PlaneSegModel {
        let mut c = ModelConfig::desk();
        c.backbone.blocks = 2;
        PlaneSegModel::new(&c, seed).unwrap()
    }

    fn scenes(n: u64) -> Vec<RgbdSample> {
        let cfg = SceneConfig::square(32, 2, 4);
        (0..n).map(|s| generate_synthetic_scene(s, &cfg).unwrap()).collect()
    }

    fn pseudo(s: &RgbdSample) -> PseudoLabelSet {
        let masks: Vec<Mask> = s.annotation.as_ref().unwrap().masks().to_vec();
        PseudoLabelSet::new(masks, "synthetic").unwrap()
    }

    fn ft_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            lr0: 1e-3,
            ..TrainConfig::finetune()
        }
    }

    #[test]
    fn deterministic_losses() {
        let data = scenes(4);
        let run = || {
            let mut t = Trainer::new(tiny_model(3), ft_cfg(), 2).unwrap();
            (0..3).map(|_| t.finetune_epoch(&data).unwrap().mean_loss).collect::<Vec<_>>()
        };
        let a = run();
        assert!(a.iter().all(|l| l.is_finite()));
        assert_eq!(a, run());
    }

    #[test]
    fn schedule_and_log_rows() {
        let data = scenes(4);
        let cfg = TrainConfig { epochs: 2, ..ft_cfg() };
        let mut t = Trainer::new(tiny_model(0), cfg.clone(), steps_per_epoch(4, 2)).unwrap();
        assert_eq!(t.progress.total_steps, 4);
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("log.jsonl");
        let mut lrs = Vec::new();
        for _ in 0..2 {
            for chunk in data.chunks(2) {
                let b: Vec<&RgbdSample> = chunk.iter().collect();
                lrs.push(t.finetune_step(&b).unwrap().lr);
            }
            append_epoch_log(&log, &t.finish_epoch(&[])).unwrap();
        }
        let expect: Vec<f64> = (0..4).map(|s| cosine_lr(s, 4, cfg.lr0)).collect();
        assert_eq!(lrs, expect);
        assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);
    }

    #[test]
    fn frozen_groups_stay_put() {
        let data = scenes(4);
        let mut t = Trainer::new(tiny_model(1), ft_cfg(), 2).unwrap();
        let before = t.model.store.snapshot().unwrap();
        for _ in 0..2 {
            t.finetune_epoch(&data).unwrap();
        }
        let after = t.model.store.snapshot().unwrap();
        for (name, v) in &before {
            let fixed = name.starts_with("prompt.") || name.starts_with("decoder.iou_head.");
            if fixed {
                assert_eq!(after[name], *v, "{name}");
            } else if name.starts_with("transformer.") || name.starts_with("cnn.") {
                assert_ne!(after[name], *v, "{name}");
            }
        }
    }

    #[test]
    fn phase_counters() {
        let data = scenes(4);
        let labels: Vec<(RgbdSample, PseudoLabelSet)> = data.iter().map(|s| (s.clone(), pseudo(s))).collect();
        let pcfg = TrainConfig {
            batch_size: 2,
            min_mask_area: Some(200),
            ..TrainConfig::pretrain()
        };
        let mut p = Trainer::new(tiny_model(2), pcfg, 2).unwrap();
        p.pretrain_epoch(&labels).unwrap();
        assert!(p.counters.masks_filtered > 0);
        assert_eq!(p.counters.prompts_jittered, 0);

        let mut f = Trainer::new(tiny_model(2), ft_cfg(), 2).unwrap();
        f.finetune_epoch(&data).unwrap();
        assert_eq!(f.counters.masks_filtered, 0);
        assert_eq!(f.counters.prompts_jittered, 4);
        assert_eq!(f.counters.selected.iter().sum::<u64>(), 4);
    }

    #[test]
    fn zero_noise_prompts_are_tight() {
        let data = scenes(3);
        let cfg = TrainConfig {
            noise_frac: 0.0,
            flip_prob: 0.0,
            ..ft_cfg()
        };
        let mut t = Trainer::new(tiny_model(0), cfg, 1).unwrap();
        for s in &data {
            let it = t.prepare_finetune(s).unwrap().unwrap();
            assert_eq!(Some(it.prompt), tight_box(&it.mask));
        }
        assert_eq!(t.counters.prompts_jittered, 0);
    }

    #[test]
    fn empty_inputs_are_skipped() {
        let mut s = scenes(1).remove(0);
        s.annotation = Some(crate::data::PlaneAnnotation::empty());
        let mut t = Trainer::new(tiny_model(0), ft_cfg(), 1).unwrap();
        let r = t.finetune_step(&[&s]).unwrap();
        assert_eq!((r.used, r.skipped, t.progress.step), (0, 1, 0));

        let tiny = PseudoLabelSet::new(Vec::new(), "none").unwrap();
        let mut p = Trainer::new(tiny_model(0), TrainConfig::pretrain(), 1).unwrap();
        let r = p.pretrain_step(&[(&s, &tiny)]).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(p.counters.skipped, 1);
    }
}

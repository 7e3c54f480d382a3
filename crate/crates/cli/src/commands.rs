use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use planeseg::config::{DetectorKind, RunConfig};
use planeseg::data::io::{read_gt_partition, read_partition, save_rgbd_sample, write_jsonl_atomic, write_partition};
use planeseg::data::{corrupt_masks, generate_synthetic_scene, load_dataset, read_manifest, write_manifest, PseudoLabelSet, RgbdSample};
use planeseg::detector::{BoxDetector, BoxFileDetector, OracleDetector};
use planeseg::inference::{evaluate_with_oracle, predict_with_detector, PromptSummary};
use planeseg::metrics::{evaluate_dataset, format_table, DatasetMetrics, PartitionMetrics};
use planeseg::model::PlaneSegModel;
use planeseg::training::{
    append_epoch_log, load_checkpoint, steps_per_epoch, transfer_groups, Phase, Trainer, GROUPS,
};
use planeseg::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Cli, Command, EvalArgs, GenSynthArgs, InferArgs, ReportArgs, TrainArgs};

/// One line of the prediction manifest written by `infer`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionEntry {
    pub id: String,
    pub partition_path: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.train.seed = Some(s);
        cfg.eval.seed = s;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.io.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = cli.seed.unwrap_or(0);
    match cli.cmd {
        Command::GenSynth(a) => gen_synth(&cfg, &a, seed, &out),
        Command::Pretrain(a) => train(cfg, &a, Phase::Pretrain, &out),
        Command::Finetune(a) => train(cfg, &a, Phase::Finetune, &out),
        Command::Infer(a) => infer(cfg, &a, &out),
        Command::Eval(a) => eval(&cfg, &a, &out),
        Command::Report(a) => report(&cfg, &a, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::load(dir, format!("cannot create output directory: {e}")))
}

fn gen_synth(cfg: &RunConfig, a: &GenSynthArgs, seed: u64, out: &Path) -> Result<()> {
    if a.count == 0 {
        return Err(Error::config("count", "must be >= 1"));
    }
    if let Some(p) = a.pseudo_corrupt {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("pseudo_corrupt", "must lie in [0, 1]"));
        }
    }
    create_dir(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = seed.wrapping_mul(1_000_000);
    let (mut planes, mut non_planes, mut pseudo) = (0, 0, 0);
    let mut entries = Vec::with_capacity(a.count);
    for i in 0..a.count as u64 {
        let s = generate_synthetic_scene(base + i, &cfg.data.synth)?;
        let ann = s.annotation.as_ref().expect("synthetic scenes are annotated");
        planes += ann.num_planes();
        non_planes += ann.len() - ann.num_planes();
        let labels = match a.pseudo_corrupt {
            Some(p) => {
                let masks = corrupt_masks(ann.masks(), p, &mut rng);
                let masks: Vec<_> = masks.into_iter().filter(|m| m.iter().any(|&v| v)).collect();
                pseudo += masks.len();
                Some(PseudoLabelSet::new(masks, "synthetic")?)
            }
            None => None,
        };
        entries.push(save_rgbd_sample(&s, out, labels.as_ref()).map_err(|e| e.for_image(&s.id))?);
    }
    write_manifest(&out.join("manifest.jsonl"), &entries)?;
    println!(
        "wrote {} scenes to {} ({planes} planes, {non_planes} non-plane regions, {pseudo} pseudo-labels)",
        entries.len(),
        out.display()
    );
    Ok(())
}

fn train(mut cfg: RunConfig, a: &TrainArgs, phase: Phase, out: &Path) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = Some(e);
    }
    if let Some(b) = a.batch {
        cfg.train.batch_size = Some(b);
    }
    if let Some(lr) = a.lr {
        cfg.train.lr0 = Some(lr);
    }
    if let Some(n) = a.noise {
        cfg.train.noise_frac = Some(n);
    }
    cfg.phase = phase;
    cfg.validate()?;
    if a.init.is_some() && phase == Phase::Pretrain {
        return Err(Error::config("init", "only fine-tuning starts from a pretrained checkpoint"));
    }
    let manifest = a
        .manifest
        .clone()
        .or_else(|| cfg.data.train_manifest.clone())
        .ok_or_else(|| Error::config("data.train_manifest", "no training manifest given"))?;
    let tcfg = cfg.train_config(phase)?;
    let data = load_dataset(&manifest)?;
    if data.is_empty() {
        return Err(Error::Input(format!("{} lists no samples", manifest.display())));
    }
    create_dir(out)?;
    let spe = steps_per_epoch(data.len(), tcfg.batch_size);

    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::resume(load_checkpoint(p)?)?;
            if t.cfg.phase != phase {
                return Err(Error::Incompatible(format!("{} is a {:?} checkpoint", p.display(), t.cfg.phase)));
            }
            info!("resuming from {} at epoch {}", p.display(), t.progress.epoch);
            t
        }
        None => {
            let model = PlaneSegModel::new(&cfg.model_config(), tcfg.seed)?;
            if let Some(init) = &a.init {
                let src = load_checkpoint(init)?.model;
                let groups: Vec<&str> = GROUPS.iter().map(|g| g.0).collect();
                let n = transfer_groups(&src, &model, &groups)?;
                info!("initialised {n} tensors from {}", init.display());
            }
            Trainer::new(model, tcfg.clone(), spe)?
        }
    };

    let name = match phase {
        Phase::Pretrain => "pretrain",
        Phase::Finetune => "finetune",
    };
    let log_path = out.join(format!("{name}_log.jsonl"));
    let last_good = out.join(format!("{name}_last.ckpt"));
    let final_path = out.join(format!("{name}.ckpt"));
    if a.resume.is_none() && log_path.exists() {
        fs::remove_file(&log_path)?;
    }
    trainer.save(&last_good)?;

    let (samples, pseudo): (Vec<RgbdSample>, Vec<Option<PseudoLabelSet>>) = data.into_iter().unzip();
    let pretrain_data: Vec<(RgbdSample, PseudoLabelSet)> = if phase == Phase::Pretrain {
        samples
            .iter()
            .zip(pseudo)
            .map(|(s, p)| {
                p.map(|p| (s.clone(), p))
                    .ok_or_else(|| Error::Input("pretraining needs pseudo-label masks".into()).for_image(&s.id))
            })
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let t0 = Instant::now();
    let first = trainer.progress.epoch;
    for _ in first..trainer.cfg.epochs {
        let res = match phase {
            Phase::Pretrain => trainer.pretrain_epoch(&pretrain_data),
            Phase::Finetune => trainer.finetune_epoch(&samples),
        };
        let row = match res {
            Ok(r) => r,
            Err(e) => {
                if e.exit_code() == 4 {
                    eprintln!("last good checkpoint: {}", last_good.display());
                }
                return Err(e);
            }
        };
        append_epoch_log(&log_path, &row)?;
        info!("epoch {} loss {:.4} lr {:.2e} skipped {}", row.epoch, row.mean_loss, row.lr, row.skipped);
        trainer.save(&last_good)?;
        let every = cfg.io.checkpoint_every;
        if every > 0 && row.epoch % every == 0 {
            trainer.save(&out.join(format!("{name}_epoch{:04}.ckpt", row.epoch)))?;
        }
    }
    trainer.save(&final_path)?;
    fs::remove_file(&last_good)?;
    println!(
        "{name}: {} epochs on {} samples in {:.1}s, checkpoint {}",
        trainer.progress.epoch - first,
        samples.len(),
        t0.elapsed().as_secs_f64(),
        final_path.display()
    );
    Ok(())
}

fn eval_manifest(cfg: &RunConfig, given: &Option<PathBuf>) -> Result<PathBuf> {
    given
        .clone()
        .or_else(|| cfg.data.eval_manifest.clone())
        .ok_or_else(|| Error::config("data.eval_manifest", "no evaluation manifest given"))
}

fn load_model(path: &Path, cfg: &RunConfig) -> Result<PlaneSegModel> {
    let model = load_checkpoint(path)?.model;
    if model.cfg != cfg.model_config() {
        warn!("checkpoint model config differs from the run config; using the checkpoint's");
    }
    Ok(model)
}

fn infer(mut cfg: RunConfig, a: &InferArgs, out: &Path) -> Result<()> {
    if let Some(b) = &a.boxes {
        cfg.detector.kind = DetectorKind::External;
        cfg.detector.weights_path = Some(b.clone());
    }
    if let Some(n) = a.noise {
        cfg.detector.noise_frac = n;
    }
    cfg.validate()?;
    let manifest = eval_manifest(&cfg, &a.manifest)?;
    let model = load_model(&a.checkpoint, &cfg)?;
    let data = load_dataset(&manifest)?;
    let mut detector: Box<dyn BoxDetector> = match cfg.detector.kind {
        DetectorKind::Oracle => Box::new(OracleDetector {
            noise_frac: cfg.detector.noise_frac,
            rng: ChaCha8Rng::seed_from_u64(cfg.eval.seed),
        }),
        DetectorKind::External => {
            let path = cfg.detector.weights_path.as_ref().expect("validated");
            Box::new(BoxFileDetector::open(path)?)
        }
    };
    let pred_dir = out.join("pred");
    create_dir(&pred_dir)?;
    let mut entries = Vec::new();
    let mut prompts: Vec<PromptSummary> = Vec::new();
    let mut skipped = Vec::new();
    for (s, _) in &data {
        let p = match predict_with_detector(&model, s, detector.as_mut(), cfg.detector.score_thresh, cfg.detector.max_dets) {
            Ok(p) => p,
            Err(Error::Input(msg)) => {
                warn!("skipping `{}`: {msg}", s.id);
                skipped.push(s.id.clone());
                continue;
            }
            Err(e) => return Err(e.for_image(&s.id)),
        };
        let rel = PathBuf::from("pred").join(format!("{}_pred.png", s.id));
        write_partition(&out.join(&rel), &p.partition)?;
        entries.push(PredictionEntry {
            id: p.id,
            partition_path: rel,
        });
        prompts.extend(p.prompts);
    }
    write_jsonl_atomic(&out.join("prompts.jsonl"), &prompts)?;
    write_jsonl_atomic(&out.join("predictions.jsonl"), &entries)?;
    println!(
        "predicted {} images ({} prompts), skipped {}{}",
        entries.len(),
        prompts.len(),
        skipped.len(),
        if skipped.is_empty() {
            String::new()
        } else {
            format!(": {}", skipped.join(", "))
        }
    );
    Ok(())
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

fn eval(cfg: &RunConfig, a: &EvalArgs, out: &Path) -> Result<()> {
    cfg.validate()?;
    let gt_manifest = eval_manifest(cfg, &a.gt)?;
    let preds = read_predictions(&a.pred)?;
    let gts = read_manifest(&gt_manifest)?;
    let pred_ids: BTreeSet<&str> = preds.iter().map(|p| p.id.as_str()).collect();
    let gt_ids: BTreeSet<&str> = gts.iter().map(|g| g.id.as_str()).collect();
    let only_pred: Vec<_> = pred_ids.difference(&gt_ids).copied().collect();
    let only_gt: Vec<_> = gt_ids.difference(&pred_ids).copied().collect();
    if !only_pred.is_empty() || !only_gt.is_empty() {
        return Err(Error::Input(format!(
            "prediction and ground-truth ids differ; only in predictions: [{}]; only in ground truth: [{}]",
            only_pred.join(", "),
            only_gt.join(", ")
        )));
    }
    let pred_base = a.pred.parent().unwrap_or(Path::new("."));
    let gt_base = gt_manifest.parent().unwrap_or(Path::new("."));
    let gt_by_id: BTreeMap<&str, _> = gts.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut rows = Vec::with_capacity(preds.len());
    for p in &preds {
        let g = gt_by_id[p.id.as_str()];
        let label = g
            .label_path
            .as_ref()
            .ok_or_else(|| Error::Input("ground-truth entry has no label raster".into()).for_image(&g.id))?;
        let pred = read_partition(&pred_base.join(&p.partition_path)).map_err(|e| e.for_image(&p.id))?;
        let gt = read_gt_partition(&gt_base.join(label)).map_err(|e| e.for_image(&p.id))?;
        rows.push((p.id.clone(), pred, gt));
    }
    let m = evaluate_dataset(rows.iter().map(|(id, p, g)| (id.as_str(), p, g)))?;
    create_dir(out)?;
    let table = format_table(&m, "\t");
    write_atomic(&out.join("metrics.tsv"), &table)?;
    print!("{table}");
    Ok(())
}

fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let partial = path.with_extension("partial");
    fs::write(&partial, text)?;
    fs::rename(&partial, path)?;
    Ok(())
}

fn report(cfg: &RunConfig, a: &ReportArgs, out: &Path) -> Result<()> {
    cfg.validate()?;
    let manifest = eval_manifest(cfg, &a.manifest)?;
    let model = load_model(&a.checkpoint, cfg)?;
    let samples: Vec<RgbdSample> = load_dataset(&manifest)?.into_iter().map(|(s, _)| s).collect();
    let base = evaluate_with_oracle(&model, &samples, cfg.detector.noise_frac, cfg.eval.seed)?;
    let mut sweep = Vec::new();
    for &n in &cfg.eval.noise_sweep {
        sweep.push((n, evaluate_with_oracle(&model, &samples, n, cfg.eval.seed)?.mean));
    }
    let text = render_report(&base, cfg.detector.noise_frac, &sweep);
    create_dir(out)?;
    write_atomic(&out.join("report.md"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn render_report(base: &DatasetMetrics, noise: f32, sweep: &[(f32, PartitionMetrics)]) -> String {
    let mut s = format!("## Evaluation (oracle boxes, {:.0}% noise)\n\n", noise * 100.0);
    s.push_str("| id | VOI ↓ | RI ↑ | SC ↑ |\n|---|---|---|---|\n");
    for r in &base.per_image {
        s.push_str(&format!("| {} | {:.3} | {:.3} | {:.3} |\n", r.id, r.metrics.voi, r.metrics.ri, r.metrics.sc));
    }
    let m = &base.mean;
    s.push_str(&format!("| **mean** | {:.3} | {:.3} | {:.3} |\n", m.voi, m.ri, m.sc));
    s.push_str("\n## Box noise\n\n| noise | VOI ↓ | RI ↑ | SC ↑ |\n|---|---|---|---|\n");
    for (n, m) in sweep {
        s.push_str(&format!("| {:.0}% | {:.3} | {:.3} | {:.3} |\n", n * 100.0, m.voi, m.ri, m.sc));
    }
    s
}

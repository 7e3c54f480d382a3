use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use planeseg::data::io::{read_gt_partition, read_partition, read_u16, write_partition};
use planeseg::data::{read_manifest, NON_PLANE_ID_BASE};
use planeseg::training::load_checkpoint;

const DESK: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml");

fn bin(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_planeseg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn");
    out
}

fn ok(args: &[&str]) -> String {
    let o = bin(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn desk_data(dir: &Path, count: usize) -> PathBuf {
    let data = dir.join("data");
    ok(&["--config", DESK, "--seed", "3", "--out", p(&data), "gen-synth", "--count", &count.to_string(), "--pseudo-corrupt", "0.2"]);
    data.join("manifest.jsonl")
}

#[test]
fn gen_synth_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = ok(&["--config", DESK, "--seed", "7", "--out", p(d), "gen-synth", "--count", "20"]);
        assert!(out.contains("wrote 20 scenes"), "{out}");
    }
    assert_eq!(files(&a), files(&b));
    let text = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 20);

    let c = dir.path().join("c");
    ok(&["--config", DESK, "--seed", "8", "--out", p(&c), "gen-synth", "--count", "20"]);
    assert_ne!(files(&a).get("manifest.jsonl"), files(&c).get("manifest.jsonl"));
}

#[test]
fn generated_labels_are_disjoint_instances() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = desk_data(dir.path(), 6);
    let base = manifest.parent().unwrap();
    for e in read_manifest(&manifest).unwrap() {
        // one id per pixel; plane ids dense from 1, non-plane ids from the high base
        let ids = read_u16(&base.join(e.label_path.unwrap())).unwrap();
        let mut seen: BTreeMap<u16, usize> = BTreeMap::new();
        for &v in ids.iter() {
            *seen.entry(v).or_default() += 1;
        }
        let planes: Vec<u16> = seen.keys().copied().filter(|&v| v != 0 && v < NON_PLANE_ID_BASE).collect();
        assert!(!planes.is_empty());
        assert_eq!(planes, (1..=planes.len() as u16).collect::<Vec<_>>(), "{}", e.id);
        let pseudo = e.pseudo_label_paths.unwrap();
        assert_eq!(pseudo.len(), seen.keys().filter(|&&v| v != 0).count());
    }
}

#[test]
fn unwritable_output_fails() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("file");
    fs::write(&f, "x").unwrap();
    let o = bin(&["--config", DESK, "--out", p(&f.join("sub")), "gen-synth", "--count", "1"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn config_errors_exit_2_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[train]\nbatch_size = 0\n").unwrap();
    let o = bin(&["--config", p(&cfg), "--out", p(dir.path()), "finetune", "--manifest", "nope.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.batch_size"));
    // validation happens before anything is written
    assert!(!dir.path().join("finetune_last.ckpt").exists());

    let o = bin(&["--config", DESK, "--out", p(dir.path()), "finetune", "--manifest", "missing.jsonl"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn smoke_finetune_default_config() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["--out", p(&data), "gen-synth", "--count", "4"]);
    let t0 = Instant::now();
    let out = dir.path().join("run");
    ok(&["--out", p(&out), "finetune", "--manifest", p(&data.join("manifest.jsonl")), "--epochs", "1", "--batch", "2"]);
    assert!(t0.elapsed() < Duration::from_secs(60), "{:?}", t0.elapsed());
    let log = fs::read_to_string(out.join("finetune_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(out.join("finetune.ckpt").exists());
    assert!(!out.join("finetune_last.ckpt").exists());
}

#[test]
fn pretrain_then_finetune_transfers_weights() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = desk_data(dir.path(), 4);
    let pre = dir.path().join("pre");
    let ft = dir.path().join("ft");
    ok(&["--config", DESK, "--out", p(&pre), "pretrain", "--manifest", p(&manifest), "--epochs", "3", "--batch", "2"]);
    let log = fs::read_to_string(pre.join("pretrain_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    ok(&[
        "--config", DESK, "--seed", "5", "--out", p(&ft), "finetune", "--manifest", p(&manifest),
        "--init", p(&pre.join("pretrain.ckpt")), "--epochs", "1",
    ]);
    let a = load_checkpoint(&pre.join("pretrain.ckpt")).unwrap().model.store.snapshot().unwrap();
    let b = load_checkpoint(&ft.join("finetune.ckpt")).unwrap().model.store.snapshot().unwrap();
    assert_eq!(a.len(), b.len());
    let fresh = planeseg::model::PlaneSegModel::new(&planeseg::config::RunConfig::load(Path::new(DESK)).unwrap().model_config(), 5)
        .unwrap()
        .store
        .snapshot()
        .unwrap();
    let mut distinct = 0;
    for (name, v) in &a {
        if name.starts_with("prompt.") || name.starts_with("decoder.iou_head.") {
            // frozen during fine-tuning, so they still hold the pretrained values
            assert_eq!(&b[name], v, "{name}");
            distinct += (&fresh[name] != v) as usize;
        }
    }
    assert!(distinct > 0);
}

#[test]
fn pretrain_needs_pseudo_labels() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["--config", DESK, "--out", p(&data), "gen-synth", "--count", "2"]);
    let o = bin(&["--config", DESK, "--out", p(dir.path()), "pretrain", "--manifest", p(&data.join("manifest.jsonl"))]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pseudo-label"));
}

#[test]
fn numeric_fault_keeps_last_good_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = desk_data(dir.path(), 2);
    let out = dir.path().join("run");
    let o = bin(&["--config", DESK, "--out", p(&out), "finetune", "--manifest", p(&manifest), "--epochs", "5", "--lr", "1e30"]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    let last = out.join("finetune_last.ckpt");
    assert!(String::from_utf8_lossy(&o.stderr).contains("finetune_last.ckpt"));
    assert!(!out.join("finetune.ckpt").exists());
    load_checkpoint(&last).unwrap();
}

struct Trained {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
    ckpt: PathBuf,
}

fn trained() -> Trained {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let manifest = desk_data(&root, 3);
    let ft = root.join("ft");
    ok(&["--config", DESK, "--out", p(&ft), "finetune", "--manifest", p(&manifest), "--epochs", "1"]);
    Trained {
        _dir: dir,
        root,
        manifest,
        ckpt: ft.join("finetune.ckpt"),
    }
}

#[test]
fn infer_eval_report() {
    let t = trained();
    let inf = t.root.join("inf");
    let out = ok(&["--config", DESK, "--out", p(&inf), "infer", "--checkpoint", p(&t.ckpt), "--manifest", p(&t.manifest)]);
    assert!(out.contains("predicted 3 images"), "{out}");
    let preds = fs::read_to_string(inf.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 3);
    for e in read_manifest(&t.manifest).unwrap() {
        let part = read_partition(&inf.join("pred").join(format!("{}_pred.png", e.id))).unwrap();
        assert_eq!(part.dim(), (32, 32));
    }
    let prompts = fs::read_to_string(inf.join("prompts.jsonl")).unwrap();
    assert!(prompts.lines().count() >= 3);

    let ev = t.root.join("ev");
    let pm = inf.join("predictions.jsonl");
    let args = ["--config", DESK, "--out", p(&ev), "eval", "--pred", p(&pm), "--gt", p(&t.manifest)];
    let table = ok(&args);
    let header = table.lines().next().unwrap();
    assert_eq!(header, "id\tVOI\tRI\tSC");
    assert_eq!(table.lines().count(), 5);
    assert!(table.lines().last().unwrap().starts_with("mean\t"));
    assert_eq!(ok(&args), table);
    assert_eq!(fs::read_to_string(ev.join("metrics.tsv")).unwrap(), table);

    let rep = t.root.join("rep");
    let text = ok(&["--config", DESK, "--out", p(&rep), "report", "--checkpoint", p(&t.ckpt), "--manifest", p(&t.manifest)]);
    for row in ["| 0% |", "| 10% |", "| 20% |", "| 30% |", "VOI ↓ | RI ↑ | SC ↑"] {
        assert!(text.contains(row), "{row}\n{text}");
    }
    assert!(rep.join("report.md").exists());
}

#[test]
fn eval_identity_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = desk_data(dir.path(), 3);
    let base = manifest.parent().unwrap();
    let pred_dir = dir.path().join("pred");
    fs::create_dir_all(&pred_dir).unwrap();
    let mut lines = Vec::new();
    for e in read_manifest(&manifest).unwrap() {
        let gt = read_gt_partition(&base.join(e.label_path.unwrap())).unwrap();
        let f = format!("{}.png", e.id);
        write_partition(&pred_dir.join(&f), &gt).unwrap();
        lines.push(format!("{{\"id\":\"{}\",\"partition_path\":\"{f}\"}}", e.id));
    }
    let pm = pred_dir.join("predictions.jsonl");
    fs::write(&pm, lines.join("\n")).unwrap();
    let out = dir.path().join("ev");
    let table = ok(&["--config", DESK, "--out", p(&out), "eval", "--pred", p(&pm), "--gt", p(&manifest)]);
    let mean: Vec<f64> = table.lines().last().unwrap().split('\t').skip(1).map(|v| v.parse().unwrap()).collect();
    assert_eq!(mean, vec![0.0, 1.0, 1.0]);

    lines.pop();
    lines.push("{\"id\":\"stranger\",\"partition_path\":\"x.png\"}".into());
    fs::write(&pm, lines.join("\n")).unwrap();
    let o = bin(&["--config", DESK, "--out", p(&out), "eval", "--pred", p(&pm), "--gt", p(&manifest)]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("stranger") && err.contains("synth_03000002"), "{err}");
}

#[test]
fn box_file_missing_and_empty_entries() {
    let t = trained();
    let ids: Vec<String> = read_manifest(&t.manifest).unwrap().into_iter().map(|e| e.id).collect();
    let boxes = t.root.join("boxes.jsonl");
    fs::write(
        &boxes,
        format!(
            "{{\"image_id\":\"{}\",\"boxes\":[[2,2,20,20]],\"scores\":[0.9]}}\n{{\"image_id\":\"{}\",\"boxes\":[]}}\n",
            ids[0], ids[1]
        ),
    )
    .unwrap();
    let inf = t.root.join("inf");
    let out = ok(&["--config", DESK, "--out", p(&inf), "infer", "--checkpoint", p(&t.ckpt), "--manifest", p(&t.manifest), "--boxes", p(&boxes)]);
    assert!(out.contains("skipped 1") && out.contains(&ids[2]), "{out}");
    let empty = read_partition(&inf.join("pred").join(format!("{}_pred.png", ids[1]))).unwrap();
    assert!(empty.iter().all(|&v| v == 0));
    assert_eq!(fs::read_to_string(inf.join("predictions.jsonl")).unwrap().lines().count(), 2);
}

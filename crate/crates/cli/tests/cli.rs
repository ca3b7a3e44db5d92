use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stoneview::evaluation::{compute_metrics, write_json};
use stoneview::training::{RunRecord, TrainMode};

fn stoneview(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stoneview"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = stoneview(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if p.is_dir() {
                out.extend(files_under(&p));
            } else {
                out.push(p);
            }
        }
    }
    out
}

#[test]
fn synth_defaults_write_240_images() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["synth", "--out", "data"], tmp.path());
    let pngs = files_under(&tmp.path().join("data/images"));
    assert_eq!(pngs.len(), 240);
    let manifest = fs::read_to_string(tmp.path().join("data/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 240);
    assert!(tmp.path().join("data/index.json").is_file());
}

#[test]
fn multiview_without_base_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stoneview(&["train", "--data", "nowhere", "--mode", "mv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = stoneview(&["train", "--data", "nowhere", "--mode", "mv", "--base", "missing.ckpt"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(files_under(tmp.path()).is_empty());
}

#[test]
fn error_classes_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.json"), r#"{"epochs": 3, "learning_rat": 0.1}"#).unwrap();
    let out = stoneview(&["train", "--data", "d", "--config", "bad.json"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let out = stoneview(&["train", "--data", "missing"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(!tmp.path().join("runs").read_dir().map_or(false, |mut d| d.next().is_some()));
    let out = stoneview(&["train", "--data", "d", "--mode", "bogus"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn report_formats_mean_and_std() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("runs/five");
    for (i, acc) in [0.96, 0.97, 0.97, 0.96, 0.98].into_iter().enumerate() {
        let mut test = compute_metrics(&[0, 1], &[0, 1]).unwrap();
        test.accuracy = acc;
        let record = RunRecord {
            run_index: i,
            seed: i as u64,
            mode: TrainMode::SingleViewMixed,
            epochs: vec![],
            test,
            checkpoint: None,
            extractor_checksum: None,
        };
        write_json(&dir.join(format!("run-{i}/record.json")), &record).unwrap();
    }
    let stdout = ok(&["report", "runs/five"], tmp.path());
    assert!(stdout.contains("| 0.968 ± 0.007 |"), "{stdout}");
    let md = fs::read_to_string(dir.join("report.md")).unwrap();
    assert!(md.lines().nth(2).unwrap().starts_with("| five "));
    assert!(dir.join("report.json").is_file());
}

fn write_configs(root: &Path) {
    let synth = r#"{"image_size": 64, "images_per_class_per_view": 4, "seed": 3}"#;
    fs::write(root.join("synth.json"), synth).unwrap();
    fs::write(root.join("train.json"), r#"{"epochs": 2, "runs": 2, "batch_size": 16}"#).unwrap();
}

#[test]
fn end_to_end_pipeline_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    write_configs(root);
    ok(&["synth", "--config", "synth.json", "--out", "data"], root);
    let prep = [
        "prepare", "--manifest", "data/manifest.jsonl", "--out", "prepared", "--patch-size", "32", "--max-overlap", "2",
        "--budget", "16", "--train-fraction", "0.75", "--seed", "1",
    ];
    ok(&prep, root);
    assert!(root.join("prepared/train/index.jsonl").is_file());

    for runs in ["a", "b"] {
        let train = [
            "--deterministic", "train", "--data", "prepared", "--config", "train.json", "--mode", "mixed", "--seed", "5",
            "--runs-dir", runs, "--tag", "mixed",
        ];
        ok(&train, root);
        let base = format!("{runs}/mixed/run-0/model.ckpt");
        let mv = [
            "--deterministic", "train", "--data", "prepared", "--config", "train.json", "--mode", "mv", "--fusion",
            "concat", "--base", &base, "--seed", "5", "--runs-dir", runs, "--tag", "mv",
        ];
        ok(&mv, root);
        let mixed_dir = format!("{runs}/mixed");
        let mv_dir = format!("{runs}/mv");
        ok(&["report", &mixed_dir, &mv_dir, "--out", &format!("{runs}/table")], root);
    }
    for rel in ["table/report.md", "table/report.json", "mixed/index.json", "mv/run-1/record.json", "mixed/run-0/model.ckpt"]
    {
        let a = fs::read(root.join("a").join(rel)).unwrap();
        let b = fs::read(root.join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
    let table = fs::read_to_string(root.join("a/table/report.md")).unwrap();
    assert_eq!(table.lines().count(), 4, "{table}");

    let ckpt = "a/mv/run-0/model.ckpt";
    ok(&["--deterministic", "eval", "--checkpoint", ckpt, "--data", "prepared", "--runs-dir", "a", "--tag", "eval"], root);
    assert!(root.join("a/eval/metrics.json").is_file());
    assert!(root.join("a/eval/confusion.png").is_file());
    ok(&["--deterministic", "embed", "--checkpoint", ckpt, "--data", "prepared", "--runs-dir", "a", "--tag", "emb"], root);
    let csv = fs::read_to_string(root.join("a/emb/embeddings.csv")).unwrap();
    assert!(csv.lines().next().unwrap().ends_with("feature_127,label,x,y,z"));
    assert!(root.join("a/emb/scatter.png").is_file());
    assert!(root.join("a/emb/cluster_stats.json").is_file());

    // nothing is left half-written
    assert!(files_under(root).iter().all(|p| !p.to_string_lossy().contains(".partial")));
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn enprune(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_enprune"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = enprune(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const SMALL_PATTERNS: [&str; 6] = [
    "--set",
    "data.per_class=12",
    "--set",
    "data.test_per_class=6",
    "--set",
    "data.size=8",
];

/// Generates a small pattern dataset and trains toy-cnn-plain on it for one epoch.
fn trained(dir: &TempDir) -> (PathBuf, PathBuf) {
    let d = dir.path();
    let mut args = vec!["gen-data", "--kind", "patterns", "--train", "train.csv", "--test", "test.csv", "--seed", "3"];
    args.extend(SMALL_PATTERNS);
    ok(d, &args);
    ok(
        d,
        &["train", "--arch", "toy-cnn-plain", "--data", "train.csv", "--out", "m.json", "--epochs", "1", "--history", "h.csv"],
    );
    (d.join("m.json"), d.join("test.csv"))
}

#[test]
fn gen_data_is_seeded() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    for name in ["a", "b"] {
        ok(d, &["gen-data", "--kind", "blobs", "--train", &format!("{name}.csv"), "--test", "t.csv", "--seed", "1"]);
    }
    let a = fs::read_to_string(d.join("a.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(d.join("b.csv")).unwrap());
    assert!(a.lines().nth(1).unwrap().starts_with("x0,x1,label"));
}

#[test]
fn train_eval_score_and_count() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    trained(&dir);
    assert!(d.join("m.bin").exists());
    assert_eq!(fs::read_to_string(d.join("h.csv")).unwrap().lines().count(), 2);

    let eval = ok(d, &["eval", "--model", "m.json", "--data", "test.csv", "--out", "e.json"]);
    assert!(eval.starts_with("accuracy "));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("e.json")).unwrap()).unwrap();
    assert_eq!(v["samples"], 24);

    ok(d, &["score", "--model", "m.json", "--data", "train.csv", "--criterion", "weight", "--out", "s.json"]);
    ok(d, &["score", "--model", "m.json", "--data", "train.csv", "--samples", "8", "--out", "s.csv"]);
    let csv = fs::read_to_string(d.join("s.csv")).unwrap();
    assert!(csv.lines().count() > 1);

    ok(d, &["prune", "--model", "m.json", "--scores", "s.json", "--ratio", "0.5", "--out", "p.json", "--plan", "plan.txt"]);
    let counts = ok(d, &["count", "--model", "p.json", "--reference", "m.json", "--out", "c.json"]);
    assert!(counts.contains("flops"), "{counts}");
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("c.json")).unwrap()).unwrap();
    assert!(c["flops_reduction_pct"].as_f64().unwrap() > 0.0);
    assert!(!fs::read_to_string(d.join("plan.txt")).unwrap().is_empty());

    ok(d, &["finetune", "--model", "p.json", "--data", "train.csv", "--out", "f.json", "--epochs", "1"]);
    assert!(d.join("f.bin").exists());
}

#[test]
fn zero_ratio_prune_reproduces_the_model() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    trained(&dir);
    ok(d, &["prune", "--model", "m.json", "--data", "train.csv", "--ratio", "0", "--out", "same.json"]);
    assert_eq!(fs::read(d.join("m.json")).unwrap(), fs::read(d.join("same.json")).unwrap());
    assert_eq!(fs::read(d.join("m.bin")).unwrap(), fs::read(d.join("same.bin")).unwrap());
}

#[test]
fn stability_writes_one_row_per_layer_and_step() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    trained(&dir);
    ok(d, &["stability", "--model", "m.json", "--data", "train.csv", "--sizes", "4,8,16", "--out", "st.csv"]);
    let text = fs::read_to_string(d.join("st.csv")).unwrap();
    assert!(text.starts_with("size_a,size_b,layer,name,kendall"));
    assert_eq!((text.lines().count() - 1) % 2, 0);
}

#[test]
fn count_reference_architecture() {
    let dir = TempDir::new().unwrap();
    let out = ok(dir.path(), &["count", "--arch", "vgg16bn"]);
    assert!(out.contains("313.73M"), "{out}");
}

#[test]
fn report_aligns_csv() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("r.csv"), "label,accuracy\noriginal,95.5\nnuclear,9.25\n").unwrap();
    let out = ok(d, &["report", "r.csv"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l.len() == lines[0].len()), "{out}");
    assert!(lines[2].ends_with(" 9.25"));
}

#[test]
fn exit_codes_follow_error_classes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    assert_eq!(enprune(d, &["count", "--arch", "alexnet"]).status.code(), Some(2));
    assert_eq!(enprune(d, &["count", "--arch", "vgg16bn", "--set", "bogus.key=1"]).status.code(), Some(2));
    assert_eq!(enprune(d, &["eval", "--model", "missing.json", "--data", "missing.csv"]).status.code(), Some(3));
    trained(&dir);
    let bad_ratio = enprune(d, &["prune", "--model", "m.json", "--data", "train.csv", "--ratio", "1.5", "--out", "x.json"]);
    assert_eq!(bad_ratio.status.code(), Some(2));
}

#[test]
fn config_file_and_overrides() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    fs::write(d.join("run.cfg"), "# small blobs\ndata.per_class = 10\ndata.test_fraction = 0.5\nseed = 4\n").unwrap();
    ok(d, &["gen-data", "--config", "run.cfg", "--train", "a.csv", "--test", "b.csv"]);
    assert_eq!(fs::read_to_string(d.join("a.csv")).unwrap().lines().count(), 2 + 40);
    ok(d, &["gen-data", "--config", "run.cfg", "--set", "data.per_class=20", "--train", "a.csv", "--test", "b.csv"]);
    assert_eq!(fs::read_to_string(d.join("a.csv")).unwrap().lines().count(), 2 + 80);
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mtlink::training::Checkpoint;

fn mtlink(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtlink"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = mtlink(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}\n{}",
        stdout(&o),
        String::from_utf8_lossy(&o.stderr)
    );
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// generate → preprocess on a small synthetic population.
fn corpus(dir: &Path) -> std::path::PathBuf {
    let raw = dir.join("raw");
    ok(&[
        "generate",
        "--out",
        s(&raw),
        "--n-users",
        "16",
        "--seed",
        "3",
        "--set",
        "len_a_max=12",
        "--set",
        "len_b_max=10",
        "--set",
        "len_a_min=6",
        "--set",
        "len_b_min=5",
    ]);
    let out = dir.join("corpus.json");
    ok(&[
        "preprocess",
        "--checkins",
        s(&raw.join("checkins_a.csv")),
        "--checkins",
        s(&raw.join("checkins_b.csv")),
        "--identity-map",
        s(&raw.join("identity_map.csv")),
        "--neg-ratio",
        "1",
        "--set",
        "fractions=0.5,0.25,0.25",
        "--out",
        s(&out),
    ]);
    out
}

#[test]
fn gradcheck_passes_and_exits_zero() {
    let out = ok(&["gradcheck", "--d", "8", "--k", "6"]);
    assert!(out.contains("max relative error"), "{out}");
    assert!(out.trim_end().ends_with("PASS"), "{out}");
}

#[test]
fn pipeline_train_evaluate_export() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus(dir.path());
    let cfg = dir.path().join("train.cfg");
    fs::write(
        &cfg,
        "d = 8\nheads = 2\nmax_epochs = 2\nbatch_size = 4\nmask_ratio = 0.2\n",
    )
    .unwrap();
    let model = dir.path().join("model.mtlk");
    let log = dir.path().join("epochs.jsonl");
    let out = ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&model),
        "--config",
        s(&cfg),
        "--log",
        s(&log),
        "--max-epochs",
        "3",
    ]);
    assert!(out.contains("epoch   3"), "{out}");
    assert_eq!(fs::read_to_string(&log).unwrap().lines().count(), 3);

    let ck = Checkpoint::load(&model).unwrap();
    assert_eq!((ck.config.model.d, ck.config.max_epochs), (8, 3));
    let stored = serde_json::to_string(ck.val_metrics.as_ref().unwrap()).unwrap();

    let out = ok(&[
        "evaluate",
        "--checkpoint",
        s(&model),
        "--corpus",
        s(&corpus),
        "--split",
        "val",
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], format!("stored validation {stored}"));
    assert_eq!(lines[1], format!("val {stored}"));

    let heat = dir.path().join("heat");
    let plans = dir.path().join("plans.jsonl");
    ok(&[
        "export-attention",
        "--checkpoint",
        s(&model),
        "--corpus",
        s(&corpus),
        "--pair-id",
        "0",
        "--out",
        s(&heat),
        "--mask-plans",
        s(&plans),
    ]);
    let mut names: Vec<String> = fs::read_dir(&heat)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "attention_a_to_b.csv",
            "attention_b_to_a.csv",
            "cooccurrence.csv",
            "heatmaps.svg"
        ]
    );
    let plan_lines = fs::read_to_string(&plans).unwrap();
    assert_eq!(plan_lines.lines().count(), 2);
    assert!(plan_lines.contains("\"platform\":\"A\"") && plan_lines.contains("\"platform\":\"B\""));

    let o = mtlink(&[
        "export-attention",
        "--checkpoint",
        s(&model),
        "--corpus",
        s(&corpus),
        "--pair-id",
        "9999",
        "--out",
        s(&heat),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn generate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for d in [&x, &y] {
        ok(&["generate", "--out", s(d), "--n-users", "5", "--seed", "11"]);
    }
    for f in ["checkins_a.csv", "checkins_b.csv", "identity_map.csv"] {
        assert_eq!(fs::read(x.join(f)).unwrap(), fs::read(y.join(f)).unwrap());
    }
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("gen.cfg");
    fs::write(&cfg, "n_users = 4\nseed = 1\n").unwrap();
    let out = ok(&[
        "generate",
        "--out",
        s(&dir.path().join("g")),
        "--config",
        s(&cfg),
        "--n-users",
        "7",
    ]);
    assert!(out.starts_with("users 7"), "{out}");
    let out = ok(&["generate", "--out", s(&dir.path().join("h")), "--config", s(&cfg)]);
    assert!(out.starts_with("users 4"), "{out}");
}

#[test]
fn exit_codes() {
    let o = mtlink(&["train", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let dir = tempfile::tempdir().unwrap();
    let o = mtlink(&["generate", "--out", s(dir.path()), "--set", "n_users=1"]);
    assert_eq!(o.status.code(), Some(1));
    let o = mtlink(&["generate", "--out", s(dir.path()), "--set", "no_such_key=1"]);
    assert_eq!(o.status.code(), Some(1));

    let o = mtlink(&["evaluate", "--checkpoint", s(&dir.path().join("missing.mtlk"))]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(mtlink(&["--help"]).status.code(), Some(0));
}

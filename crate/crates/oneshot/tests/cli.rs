use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use oneshot::manifest::Dataset;
use oneshot::rundir::CONFIG_SNAPSHOT;

fn oneshot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oneshot"))
        .args(args)
        .current_dir(dir)
        .env_remove("ONESHOT_OUTPUT_ROOT")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> String {
    let text = r#"
seed = 11

[paths]
output_root = "run"

[detector]
epochs = 2
channels = [8, 8, 8, 8]
stem = 4

[experiment]
tsne_iterations = 300
tsne_perplexity = 5.0
"#;
    let p = dir.join("c.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn invalid_config_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "resolution = 12\n[mix]\nk = 99\n[detector]\nlr = -1.0\n").unwrap();
    let out = oneshot(dir.path(), &["--config", p.to_str().unwrap(), "train-base"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for field in ["resolution", "mix.k", "detector.lr"] {
        assert!(err.contains(field), "missing {field} in {err}");
    }
    assert!(!dir.path().join("runs").exists(), "nothing is written before validation");
}

#[test]
fn unknown_keys_and_experiments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("typo.toml");
    fs::write(&p, "[mix]\nkk = 3\n").unwrap();
    let out = oneshot(dir.path(), &["--config", p.to_str().unwrap(), "train-base"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kk"));

    let cfg = small_config(dir.path());
    let out = oneshot(dir.path(), &["--config", &cfg, "experiment", "table9"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("table9"));
}

#[test]
fn procedural_sets_detector_and_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");

    let out = oneshot(dir.path(), &["--config", &cfg, "generate", "--source", "real", "--n", "24", "--out", "real"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["entries"], 24);
    let out = oneshot(dir.path(), &["--config", &cfg, "generate", "--source", "target", "--n", "24", "--out", "fake"]);
    assert!(out.status.success());
    let real = Dataset::open(&dir.path().join("real")).unwrap();
    let fake = Dataset::open(&dir.path().join("fake")).unwrap();
    real.verify().unwrap();
    assert_eq!(fake.len(), 24);
    assert!(oneshot::manifest::disjoint(&real, &fake));
    assert!(run.join(CONFIG_SNAPSHOT).is_file());
    for sub in ["checkpoints", "datasets", "reports", "logs"] {
        assert!(run.join(sub).is_dir(), "{sub}");
    }

    // Generating again gives the same bytes and leaves the first set alone.
    let digest = real.digest().unwrap();
    assert!(oneshot(dir.path(), &["--config", &cfg, "generate", "--source", "real", "--n", "24", "--out", "real2"]).status.success());
    assert_eq!(Dataset::open(&dir.path().join("real2")).unwrap().digest().unwrap(), digest);
    assert_eq!(Dataset::open(&dir.path().join("real")).unwrap().digest().unwrap(), digest);

    let out = oneshot(dir.path(), &["--config", &cfg, "train-detector", "--real", "real", "--fake", "fake", "--out", "det"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = oneshot(dir.path(), &["--config", &cfg, "evaluate", "--detector", "det", "--real", "real", "--fake", "fake"]);
    assert!(out.status.success());
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ap = metrics["ap"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ap));
    assert_eq!(metrics["n_real"], 24);
    assert!(run.join("logs/evaluate.json").is_file());

    let out = oneshot(
        dir.path(),
        &["--config", &cfg, "embed", "--detector", "det", "--set", "real=real", "--set", "target=fake", "--limit", "10", "--out", "e.tsv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let tsv = fs::read_to_string(dir.path().join("e.tsv")).unwrap();
    let lines: Vec<&str> = tsv.lines().collect();
    assert_eq!(lines[0], "x\ty\tlabel\tpath");
    assert_eq!(lines.len(), 21);
    assert!(lines[1..].iter().all(|l| l.split('\t').count() == 4));
}

#[test]
fn generator_sources_need_an_adaptation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = oneshot(dir.path(), &["--config", &cfg, "generate", "--source", "full", "--n", "5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--adaptation"));
}

#[test]
fn a_locked_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    fs::create_dir_all(&run).unwrap();
    fs::write(run.join(".lock"), "").unwrap();
    let out = oneshot(dir.path(), &["--config", &cfg, "generate", "--source", "real", "--n", "2"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("locked"));
}

#[test]
fn output_root_can_be_overridden_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_oneshot"))
        .args(["--config", &cfg, "generate", "--source", "real", "--n", "2"])
        .current_dir(dir.path())
        .env("ONESHOT_OUTPUT_ROOT", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(elsewhere.join("datasets/real/manifest.jsonl").is_file());
    assert!(!dir.path().join("run").exists());
}

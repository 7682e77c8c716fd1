use std::path::Path;
use std::process::{Command, Output};

fn ht(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ht"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ht")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn gen_writes_requested_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    let o = ht(&["gen", "--map", "straight", "--n", "10", "--seed", "1", "--out", s(&d)]);
    ok(&o);
    let data = ht_core::forge::load_scenarios(&d.join("scenarios.jsonl")).unwrap();
    assert_eq!(data.len(), 10);
    assert!(data.iter().all(|sc| sc.map_kind == ht_core::forge::MapKind::Straight));
}

#[test]
fn prop_check_reports_every_suite() {
    let o = ht(&["prop-check", "--draws", "200"]);
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.contains("passed")).count(), 8);
    assert!(text.contains("kl bound") && text.contains("entropy bound") && text.contains("sparse"));
}

#[test]
fn grad_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = ht(&["grad-check", "--coords", "30", "--out", s(dir.path())]);
    ok(&o);
    let csv = std::fs::read_to_string(dir.path().join("grad_check.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(!csv.contains("FAIL"));
}

#[test]
fn unknown_subcommand_and_flag_fail_with_usage() {
    for args in [&["frobnicate"][..], &["gen", "--bogus"][..]] {
        let o = ht(args);
        assert!(!o.status.success());
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    }
}

#[test]
fn runtime_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.htckpt");
    let o = ht(&["eval", "--checkpoint", s(&missing), "--data", s(dir.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let o = ht(&["gen", "--map", "roundabout"]);
    assert!(!o.status.success());
}

#[test]
fn train_eval_export_and_rerun_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.toml");
    std::fs::write(
        &cfg,
        "steps = 5\nbatch_size = 2\n[model.encoder]\nd_model = 8\nheads = 2\n",
    )
    .unwrap();
    let data = root.join("data");
    ok(&ht(&["gen", "--n", "4", "--agents", "3", "--out", s(&data)]));

    let run = root.join("run");
    ok(&ht(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    for f in ["model.htckpt", "train_log.csv", "metrics.csv", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);

    let rerun = root.join("rerun");
    ok(&ht(&["train", "--manifest", s(&run.join("manifest.json")), "--out", s(&rerun)]));
    assert_eq!(
        std::fs::read(run.join("metrics.csv")).unwrap(),
        std::fs::read(rerun.join("metrics.csv")).unwrap()
    );

    let ck = run.join("model.htckpt");
    let ev = root.join("eval");
    ok(&ht(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out", s(&ev)]));
    assert_eq!(
        std::fs::read(run.join("metrics.csv")).unwrap(),
        std::fs::read(ev.join("metrics.csv")).unwrap()
    );
    assert!(ev.join("summary.txt").exists());

    let att = root.join("att");
    ok(&ht(&["export-attn", "--checkpoint", s(&ck), "--data", s(&data), "--index", "1", "--out", s(&att)]));
    let csv = std::fs::read_to_string(att.join("attention.csv")).unwrap();
    let sc = &ht_core::forge::load_scenarios(&data.join("scenarios.jsonl")).unwrap()[1];
    assert_eq!(csv.lines().count(), 1 + sc.agents.len() * sc.graph.len());
    assert!(std::fs::read_to_string(att.join("attention.svg")).unwrap().starts_with("<svg"));

    let noise = root.join("noise");
    ok(&ht(&[
        "noise-sweep", "--sparse", s(&ck), "--vanilla", s(&ck), "--data", s(&data), "--trials", "2", "--out", s(&noise),
    ]));
    let csv = std::fs::read_to_string(noise.join("noise.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
}

#[test]
fn ablate_emits_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("cfg.toml");
    std::fs::write(&cfg, "steps = 2\nbatch_size = 2\n[model.encoder]\nd_model = 8\nheads = 2\n").unwrap();
    let data = root.join("d");
    ok(&ht(&["gen", "--n", "3", "--agents", "2", "--out", s(&data)]));
    let out = root.join("r");
    ok(&ht(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)]));
    let csv = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    for col in ["min_ade_k1", "min_fde_k1", "min_ade_k6", "min_fde_k6"] {
        assert!(header.contains(col), "{header}");
    }
    assert_eq!(lines.count(), ht_core::model::Ablation::ALL.len());
}

#[test]
fn shipped_config_matches_defaults() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let cfg = ht_core::train::TrainConfig::from_toml(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(cfg, ht_core::train::TrainConfig::default());
}

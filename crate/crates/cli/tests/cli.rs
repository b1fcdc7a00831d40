use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn pdvseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdvseg"))
        .args(args)
        .env_remove("PDVSEG_SEED")
        .env("RUST_LOG", "info")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pdvseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, count: usize, shape: &str, seed: u64) -> PathBuf {
    ok(&["gen-phantoms", "--count", &count.to_string(), "--shape", shape, "--seed", &seed.to_string(), "--out", s(dir)]);
    dir.join("manifest.json")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "run_manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_phantoms_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let m = gen(&tmp.path().join("a"), 3, "16x16x16", 1);
    gen(&tmp.path().join("b"), 3, "16x16x16", 1);
    assert_eq!(json(&m).as_array().unwrap().len(), 3);
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
    let run = json(&tmp.path().join("a/run_manifest.json"));
    assert_eq!(run["command"], "gen-phantoms");
    assert_eq!(run["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn indivisible_shape_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pdvseg(&["gen-phantoms", "--count", "2", "--shape", "7x7x7", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("divisible by 8"));
}

#[test]
fn unknown_model_is_a_usage_error() {
    let out = pdvseg(&["train", "--model", "resnet", "--data", "none.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("data"), 3, "16x16x16", 4);
    let cfg = tmp.path().join("cfg.json");
    let mut c = pdvseg::training::TrainConfig::for_kind(pdvseg::networks::NetKind::Pdvnet, [16, 16, 16], tmp.path().join("run"));
    c.epochs = 1;
    std::fs::write(&cfg, serde_json::to_string_pretty(&c).unwrap()).unwrap();
    let out = ok(&["train", "--model", "pdvnet", "--config", s(&cfg), "--data", s(&data)]);
    let ckpt = PathBuf::from(String::from_utf8(out.stdout).unwrap().trim());
    assert!(ckpt.exists());
    let run = json(&tmp.path().join("run/run_manifest.json"));
    assert_eq!(run["command"], "train");

    let ev = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&ckpt), "--model", "pdvnet", "--data", s(&data), "--out", s(&ev)]);
    let report = json(&ev.join("report.json"));
    assert_eq!(report["n_cases"], 3);
    assert_eq!(report["pathway_overall"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(ev.join("summary.csv")).unwrap().starts_with("structure,n,mean,sd,q1,median,q3"));

    let wrong = pdvseg(&["eval", "--checkpoint", s(&ckpt), "--model", "unet2d", "--data", s(&data), "--out", s(&ev)]);
    assert!(!wrong.status.success());
    assert!(String::from_utf8_lossy(&wrong.stderr).contains("holds a pdvnet network"));

    let rep = tmp.path().join("report");
    ok(&["report", "--eval", s(&ev), "--out", s(&rep)]);
    assert!(std::fs::read_to_string(rep.join("report.md")).unwrap().contains("| overall |"));
}

#[test]
fn unet_selects_the_slice_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("data"), 2, "16x16x8", 2);
    let out = ok(&[
        "train", "--model", "unet2d", "--shape", "16x16x8", "--epochs", "1", "--data", s(&data), "--out", s(&tmp.path().join("run")),
    ]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("pipeline: 2d slices"));
}

#[test]
fn flags_override_config_and_change_the_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("data"), 2, "16x16x16", 3);
    let run = |dir: &str, epochs: &str| {
        let out = tmp.path().join(dir);
        ok(&["train", "--model", "dvnet", "--shape", "16x16x16", "--epochs", epochs, "--seed", "5", "--data", s(&data), "--out", s(&out)]);
        json(&out.join("run_manifest.json"))
    };
    let (a, b, c) = (run("a", "1"), run("b", "1"), run("c", "2"));
    // output directories differ, so compare the config with the directory removed
    let strip = |v: &serde_json::Value| {
        let mut v = v["config"].clone();
        v["checkpoint_dir"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(&a), strip(&b));
    assert_ne!(strip(&a), strip(&c));
    assert_eq!(a["config"]["epochs"], 1);
    assert_eq!(a["seed"], 5);
    assert_ne!(a["config_hash"], c["config_hash"]);
}

#[test]
fn oracle_predictions_score_one_and_missing_masks_are_skipped() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("data"), 4, "16x16x16", 6);
    let dir = tmp.path().join("data");
    let ev = tmp.path().join("eval");
    ok(&["eval", "--predictions-dir", s(&dir), "--data", s(&data), "--out", s(&ev)]);
    let report = json(&ev.join("report.json"));
    for case in report["report"]["cases"].as_array().unwrap() {
        assert_eq!(case["dice"]["overall"], 1.0);
    }

    let cases = json(&data);
    let mask = dir.join(cases[0]["mask_path"].as_str().unwrap());
    std::fs::remove_file(&mask).unwrap();
    let out = ok(&["eval", "--predictions-dir", s(&dir), "--data", s(&data), "--out", s(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("skipped 1"));
    assert_eq!(json(&ev.join("report.json"))["skipped"].as_array().unwrap().len(), 1);
}

#[test]
fn agreement_of_truth_with_itself() {
    let tmp = tempfile::tempdir().unwrap();
    let data = gen(&tmp.path().join("data"), 12, "16x16x16", 9);
    let out = tmp.path().join("agree");
    ok(&["agreement", "--data", s(&data), "--predictions-dir", s(&tmp.path().join("data")), "--out", s(&out), "--svg"]);
    let ag = json(&out.join("agreement.json"));
    let structures = ag["structures"].as_array().unwrap();
    assert_eq!(structures.len(), 6);
    for st in structures {
        assert_eq!(st["bland_altman"]["bias"], 0.0);
    }
    let groupings: Vec<&str> = ag["robustness"].as_array().unwrap().iter().map(|r| r["grouping"].as_str().unwrap()).collect();
    assert_eq!(groupings, ["z_spacing", "vendor", "recon_kernel"]);
    assert!(out.join("bland_altman_lung.svg").exists());
    assert!(std::fs::read_to_string(out.join("robustness_anova.csv")).unwrap().lines().count() == 4);

    let one = tmp.path().join("one");
    gen(&one, 1, "16x16x16", 1);
    assert!(!pdvseg(&["agreement", "--data", s(&one.join("manifest.json")), "--predictions-dir", s(&one), "--out", s(&out)]).status.success());
}

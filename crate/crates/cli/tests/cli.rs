use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_supervessel"))
        .args(args)
        .output()
        .expect("spawn supervessel")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_small_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let path = dir.join("config.json");
    let cfg = serde_json::json!({
        "model": { "encoder_widths": [4, 8], "fim_dim": 6 },
        "train": { "epochs": epochs, "batch_size": 2, "init_lr": 0.01 }
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

fn synth(dir: &Path, n: usize) -> std::path::PathBuf {
    let data = dir.join("data");
    let out = run(&["synth", "--n", &n.to_string(), "--size", "32", "--out", p(&data)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.join("manifest.json")
}

#[test]
fn synth_writes_manifest_with_default_split() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 8);
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&manifest).unwrap()).unwrap();
    let entries = m["entries"].as_array().unwrap();
    assert_eq!(entries.len(), 8);
    let train = entries.iter().filter(|e| e["split"] == "train").count();
    assert_eq!(train, 6);
    let img = image::open(tmp.path().join("data").join(entries[0]["image"].as_str().unwrap())).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
    assert!(matches!(img, image::DynamicImage::ImageRgb16(_)));
    let mask = image::open(tmp.path().join("data").join(entries[0]["mask"].as_str().unwrap()))
        .unwrap()
        .to_luma8();
    assert!(mask.pixels().all(|px| px.0[0] == 0 || px.0[0] == 255));
}

#[test]
fn synth_refuses_non_empty_dir_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), 2);
    let data = tmp.path().join("data");
    let out = run(&["synth", "--n", "2", "--size", "32", "--out", p(&data)]);
    assert_eq!(code(&out), 2);
    let out = run(&["synth", "--n", "2", "--size", "32", "--out", p(&data), "--force"]);
    assert_eq!(code(&out), 0);
}

#[test]
fn train_eval_predict_overlay_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4);
    let cfg = write_small_config(tmp.path(), 2);
    let run_dir = tmp.path().join("run");
    let out = run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "log.jsonl", "validation.jsonl", "metrics.json", "metrics.csv"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let log = std::fs::read_to_string(run_dir.join("log.jsonl")).unwrap();
    // 3 training images, batch 2, 2 epochs.
    assert_eq!(log.lines().count(), 4);
    let best = run_dir.join("checkpoints").join("best.ckpt");
    assert!(best.is_file() && run_dir.join("checkpoints").join("best.meta.json").is_file());

    let eval_dir = tmp.path().join("eval");
    let out = run(&["eval", "--checkpoint", p(&best), "--manifest", p(&manifest), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("SE,IoU,Dice,ACC,AUC,P"));

    // Predict on a half-size input: output comes back at twice that.
    let hr = image::open(tmp.path().join("data/images/0000.png")).unwrap();
    let lr_path = tmp.path().join("lr.png");
    hr.resize_exact(16, 16, image::imageops::FilterType::Triangle)
        .to_rgb8()
        .save(&lr_path)
        .unwrap();
    let pred_dir = tmp.path().join("pred");
    let out = run(&["predict", "--checkpoint", p(&best), "--out", p(&pred_dir), p(&lr_path)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mask = image::open(pred_dir.join("lr_mask.png")).unwrap();
    assert_eq!((mask.width(), mask.height()), (32, 32));
    let prob = image::open(pred_dir.join("lr_prob.png")).unwrap();
    assert!(matches!(prob, image::DynamicImage::ImageLuma16(_)));

    let ov = tmp.path().join("overlay.png");
    let gt = tmp.path().join("data/masks/0000.png");
    let out = run(&["overlay", "--pred", p(&pred_dir.join("lr_mask.png")), "--gt", p(&gt), "--out", p(&ov)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let img = image::open(&ov).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (32, 32));
}

#[test]
fn train_refuses_existing_run_dir() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4);
    let cfg = write_small_config(tmp.path(), 1);
    let run_dir = tmp.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join("keep"), "x").unwrap();
    let out = run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run_dir)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn params_report_for_config_and_stripped_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_small_config(tmp.path(), 1);
    let out = run(&["params", "--config", p(&cfg)]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let (train, test) = (v["train"].as_u64().unwrap(), v["test"].as_u64().unwrap());
    assert!(train > test);
    assert_eq!(v["difference"].as_u64().unwrap(), train - test);

    let manifest = synth(tmp.path(), 4);
    let run_dir = tmp.path().join("run");
    let out = run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run_dir)]);
    assert_eq!(code(&out), 0);
    let out = run(&["params", "--checkpoint", p(&run_dir.join("checkpoints/best.ckpt"))]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["train"].is_null() && v["difference"].is_null());
    assert_eq!(v["test"].as_u64().unwrap(), test);
}

#[test]
fn exit_codes_for_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    // Unknown subcommand and missing files are usage errors.
    assert_eq!(code(&run(&["frobnicate"])), 2);
    let missing = tmp.path().join("nope.json");
    let out = run(&["eval", "--checkpoint", p(&missing), "--manifest", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(code(&out), 2);

    // An invalid model configuration is a configuration error.
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"fim_dim": 47}}"#).unwrap();
    assert_eq!(code(&run(&["params", "--config", p(&bad)])), 3);

    // Unknown keys are a schema error.
    std::fs::write(&bad, r#"{"modle": {}}"#).unwrap();
    assert_eq!(code(&run(&["params", "--config", p(&bad)])), 2);

    // A grey-level model cannot consume an RGB manifest.
    let manifest = synth(tmp.path(), 4);
    std::fs::write(
        &bad,
        r#"{"model": {"in_channels": 1, "sr_out_channels": 1, "encoder_widths": [4, 8], "fim_dim": 6}, "train": {"epochs": 1}}"#,
    )
    .unwrap();
    let out = run(&["train", "--config", p(&bad), "--manifest", p(&manifest), "--out", p(&tmp.path().join("r"))]);
    assert_eq!(code(&out), 3);

    // Non-monotone ablation override.
    let cfg = write_small_config(tmp.path(), 1);
    let out = run(&[
        "train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&tmp.path().join("r2")),
        "--ablation", "asr=off",
    ]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_exits_with_code_four_and_keeps_last_good() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4);
    let cfg = tmp.path().join("hot.json");
    std::fs::write(
        &cfg,
        r#"{"model": {"encoder_widths": [4, 8], "fim_dim": 6}, "train": {"epochs": 50, "init_lr": 1e6, "eval_every": 0}}"#,
    )
    .unwrap();
    let run_dir = tmp.path().join("run");
    let out = run(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&run_dir)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run_dir.join("checkpoints/last_good.ckpt").is_file());
}

#[test]
fn ablation_writes_four_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = synth(tmp.path(), 4);
    let cfg = write_small_config(tmp.path(), 1);
    let out_dir = tmp.path().join("abl");
    let out = run(&["ablation", "--config", p(&cfg), "--manifest", p(&manifest), "--out", p(&out_dir), "--seeds", "0,1"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,SE,IoU,Dice,ACC,AUC");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("baseline,") && lines[4].starts_with("asr+ufd+fim,"));
}

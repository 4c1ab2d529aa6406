//! CLI surface contracts: exit codes, manifests, file outputs.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_apn"))
}

fn small_dataset_spec() -> String {
    serde_json::json!({
        "train": [{
            "id": "train_000", "height": 32, "width": 32, "n_frames": 30,
            "sprites": [{"shape": "square", "size": 6, "intensity": 0.9}],
            "velocity_min": 1.0, "velocity_max": 2.0, "anomaly": null, "seed": 3
        }],
        "test": [{
            "id": "test_000", "height": 32, "width": 32, "n_frames": 24,
            "sprites": [{"shape": "square", "size": 6, "intensity": 0.9}],
            "velocity_min": 1.0, "velocity_max": 2.0,
            "anomaly": {"kind": "fast_sprite", "onset": 8, "duration": 8, "speed_multiplier": 4.0},
            "seed": 9
        }]
    })
    .to_string()
}

fn small_config(m: usize) -> String {
    serde_json::json!({
        "model": {
            "t_window": 4, "frame_channels": 1, "frame_h": 32, "frame_w": 32,
            "base_channels": 4, "depth": 2,
            "apu_enabled": true, "apu_level": 1, "prototype_count": m,
            "retrieve_sharpness": 10.0,
            "cau_enabled": true, "rca_loops": 2, "cc_reduction": 8,
            "cc_temperature": 1.0
        },
        "loss_weights": {"lambda1": 1.0, "lambda2": 0.01, "lambda3": 0.01, "gamma": 1.0},
        "loss_variants": {"frame": "l2", "hinge": "linear", "cov": "mean_abs"},
        "scoring": {"lambda_s": 1.0, "per_video_auc": false},
        "train": {
            "pretrain_epochs": 1, "finetune_epochs": 1, "batch_size": 4,
            "pretrain_lr": 1e-3, "finetune_lr": 1e-4, "weight_decay": 1e-4,
            "grad_clip": 10.0, "ckpt_every": 5
        }
    })
    .to_string()
}

/// gen-data + train once; reused by the scoring-related tests.
fn trained_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let spec = dir.join("spec.json");
    std::fs::write(&spec, small_dataset_spec()).unwrap();
    let data = dir.join("data");
    let out = bin()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());

    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, small_config(3)).unwrap();
    let model = dir.join("model");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&model)
        .args(["--seed", "5"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "train failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    (data, model.join("ckpt_final.ckpt"))
}

#[test]
fn gen_data_writes_manifests_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, small_dataset_spec()).unwrap();
    for tag in ["a", "b"] {
        let out = bin()
            .args(["gen-data", "--spec"])
            .arg(&spec)
            .arg("--out")
            .arg(dir.path().join(tag))
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("a/train/train_000.apnvid")).unwrap();
    let b = std::fs::read(dir.path().join("b/train/train_000.apnvid")).unwrap();
    assert_eq!(a, b, "same spec must give identical bytes");
    assert!(dir.path().join("a/manifest.json").exists());
    let manifest = std::fs::read_to_string(dir.path().join("a/run_manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["command"], "gen-data");
    assert_eq!(v["status"], "ok");
}

#[test]
fn gen_data_rejects_training_anomaly_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec: serde_json::Value = serde_json::from_str(&small_dataset_spec()).unwrap();
    spec["train"][0]["anomaly"] =
        serde_json::json!({"kind": "teleport", "onset": 5, "duration": 5, "speed_multiplier": 4.0});
    let spec_path = dir.path().join("bad.json");
    std::fs::write(&spec_path, spec.to_string()).unwrap();
    let out = bin()
        .args(["gen-data", "--spec"])
        .arg(&spec_path)
        .arg("--out")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Manifest still written on the failure path.
    let manifest = std::fs::read_to_string(dir.path().join("out/run_manifest.json")).unwrap();
    assert!(manifest.contains("error"));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&small_config(3)).unwrap();
    cfg["model"]["prototype_cout"] = 5.into(); // typo
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--data", "unused", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_round_trips_through_train_parser() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("print-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["model"]["prototype_count"], 10);
    assert_eq!(v["train"]["pretrain_epochs"], 20);
    assert_eq!(v["loss_weights"]["lambda2"], 0.01);
    //

    // Keys are sorted (canonical form).
    let keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
    let mut sorted = keys.clone();
    sorted.sort_unstable();
    assert_eq!(keys, sorted);

    // A saved copy parses as a config file (schema compatibility).
    let cfg_path = dir.path().join("default.json");
    std::fs::write(&cfg_path, &text).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .args(["--data", "/nonexistent", "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    // Fails on the missing dataset, not on config parsing.
    assert_ne!(out.status.code(), Some(2));
}

#[test]
fn score_and_eval_pipeline_with_maps_export() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_fixture(dir.path());

    let scores = dir.path().join("scores.csv");
    let out = bin()
        .args(["score", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&scores)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&scores).unwrap();
    assert!(text.starts_with("video_id,frame_index,psnr,pred_score,feat_score,combined,label\n"));
    // 24 frames, T = 4: 20 scored frames.
    assert_eq!(text.lines().count(), 21);

    let auc = dir.path().join("auc.json");
    let out = bin()
        .args(["eval", "--scores"])
        .arg(&scores)
        .arg("--out")
        .arg(&auc)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&auc).unwrap()).unwrap();
    let a = v["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&a));
    assert_eq!(v["n_pos"].as_u64().unwrap() + v["n_neg"].as_u64().unwrap(), 20);

    // Normalcy-map export: M + 1 PGM files for M = 3.
    let maps = dir.path().join("maps");
    let out = bin()
        .args(["export-maps", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .args(["--frame", "10", "--out"])
        .arg(&maps)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let pgms: Vec<_> = std::fs::read_dir(&maps)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().map(|x| x == "pgm").unwrap_or(false))
        .collect();
    assert_eq!(pgms.len(), 4, "M + 1 heatmaps");
}

#[test]
fn eval_single_class_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let scores = dir.path().join("scores.csv");
    std::fs::write(
        &scores,
        "video_id,frame_index,psnr,pred_score,feat_score,combined,label\n\
         v,4,30.0,0.1,0.2,0.15,0\n\
         v,5,31.0,0.2,0.3,0.25,0\n",
    )
    .unwrap();
    let out = bin()
        .args(["eval", "--scores"])
        .arg(&scores)
        .arg("--out")
        .arg(dir.path().join("auc.json"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn score_rejects_mismatched_checkpoint_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = trained_fixture(dir.path());
    // Corrupt the named-tensor set: drop one tensor.
    let loaded = apn::backbone::load_checkpoint(&ckpt).unwrap();
    let mut tensors = loaded.tensors.clone();
    tensors.remove("apu.head.weight");
    let bad = dir.path().join("bad.ckpt");
    apn::backbone::save_checkpoint(&bad, &loaded.config, &tensors).unwrap();
    let out = bin()
        .args(["score", "--ckpt"])
        .arg(&bad)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("s.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_attn_writes_csv_with_exact_counters() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("bench.csv");
    let out = bin()
        .args(["bench-attn", "--sizes", "4x6,8x8", "--r", "2", "--out"])
        .arg(&csv_path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "h,w,R,cc_ops,dense_ops,wall_time_cc,wall_time_dense"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "4");
    assert_eq!(row[1], "6");
    assert_eq!(row[3], "432"); // 2 * 24 * 9
    assert_eq!(row[4], "576"); // 24^2
}

#[test]
fn gradcheck_module_flags_run() {
    for module in ["apu", "losses"] {
        let out = bin()
            .args(["gradcheck", "--module", module, "--seeds", "2"])
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "gradcheck {module}: {}",
            String::from_utf8_lossy(&out.stdout)
        );
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("PASS"));
    }
}

#[test]
fn train_resume_matches_uninterrupted_via_cli() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, small_dataset_spec()).unwrap();
    let data = dir.path().join("data");
    assert!(bin()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&data)
        .output()
        .unwrap()
        .status
        .success());

    // Uninterrupted: 2 pretrain epochs.
    let mut cfg: serde_json::Value = serde_json::from_str(&small_config(3)).unwrap();
    cfg["train"]["pretrain_epochs"] = 2.into();
    cfg["train"]["ckpt_every"] = 1.into();
    let cfg2 = dir.path().join("cfg2.json");
    std::fs::write(&cfg2, cfg.to_string()).unwrap();
    let full = dir.path().join("full");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg2)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&full)
        .args(["--phase", "pretrain", "--seed", "5"])
        .output()
        .unwrap()
        .status
        .success());

    // Interrupted at 1 epoch, then resumed to 2.
    let mut cfg1: serde_json::Value = serde_json::from_str(&small_config(3)).unwrap();
    cfg1["train"]["pretrain_epochs"] = 1.into();
    cfg1["train"]["ckpt_every"] = 1.into();
    let cfg1_path = dir.path().join("cfg1.json");
    std::fs::write(&cfg1_path, cfg1.to_string()).unwrap();
    let half = dir.path().join("half");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg1_path)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&half)
        .args(["--phase", "pretrain", "--seed", "5"])
        .output()
        .unwrap()
        .status
        .success());
    let resumed = dir.path().join("resumed");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg2)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&resumed)
        .args(["--phase", "pretrain", "--seed", "5", "--resume"])
        .arg(half.join("ckpt_pretrain_0001.ckpt"))
        .output()
        .unwrap()
        .status
        .success());

    let a = std::fs::read(full.join("ckpt_pretrain_0002.ckpt")).unwrap();
    let b = std::fs::read(resumed.join("ckpt_pretrain_0002.ckpt")).unwrap();
    assert_eq!(a, b, "resumed checkpoint differs from uninterrupted run");
}

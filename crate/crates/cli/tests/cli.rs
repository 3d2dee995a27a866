//! End-to-end tests of the binary: flags, exit codes, and artifact layout.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_scene-decomp"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn write_tiny_train_cfg(path: &Path) {
    std::fs::write(
        path,
        "image_size = 16\ngrid = 2\nk = 2\nglimpse_size = 8\nwhat_dim = 8\n\
         fg_base_ch = 4\nfg_feat_ch = 16\nglimpse_base_ch = 4\nglimpse_dec_ch = 16\n\
         bg_latent_dim = 8\nbg_img_feat = 16\nbg_enc_ch = 8\nmask_dec_ch = 16\ncomp_ch = 8\n\
         lstm_hidden = 16\nbatch = 2\nmax_steps = 6\nlog_interval = 1\neval_interval = 3\n\
         ckpt_interval = 3\ntau = 1.0\npres_prior = 0.1\nscale_prior_mean = -1.0\nseed = 1\n",
    )
    .unwrap();
}

fn make_tiny_dataset(dir: &Path) {
    let spec = dir.join("spec.cfg");
    std::fs::write(
        &spec,
        "image_size = 16\nn_objects_min = 1\nn_objects_max = 2\nsize_min = 0.2\nsize_max = 0.4\n",
    )
    .unwrap();
    let out = run(&[
        "make-dataset",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
        "--seed",
        "5",
        "--counts",
        "6,3,3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn make_dataset_is_idempotent_and_prints_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out1 = run(&[
        "make-dataset",
        "--out",
        dir.path().join("a").to_str().unwrap(),
        "--seed",
        "2",
        "--counts",
        "4,2,2",
    ]);
    assert_eq!(code(&out1), 0);
    let stdout = String::from_utf8_lossy(&out1.stdout);
    assert!(stdout.contains("manifest.json"));
    assert!(dir.path().join("a/manifest.json").is_file());

    let out2 = run(&[
        "make-dataset",
        "--out",
        dir.path().join("b").to_str().unwrap(),
        "--seed",
        "2",
        "--counts",
        "4,2,2",
    ]);
    assert_eq!(code(&out2), 0);
    let a = std::fs::read(dir.path().join("a/train/annotations.jsonl")).unwrap();
    let b = std::fs::read(dir.path().join("b/train/annotations.jsonl")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn make_dataset_bad_spec_key_exits_2_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.cfg");
    std::fs::write(&spec, "image_size = 16\nsprite_flavour = 3\n").unwrap();
    let out = run(&[
        "make-dataset",
        "--spec",
        spec.to_str().unwrap(),
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sprite_flavour"), "stderr: {err}");
}

#[test]
fn train_smoke_writes_checkpoints_and_resume_continues() {
    let dir = tempfile::tempdir().unwrap();
    make_tiny_dataset(dir.path());
    let cfg = dir.path().join("train.cfg");
    write_tiny_train_cfg(&cfg);
    let out_dir = dir.path().join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        dir.path().join("data").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("final.ckpt").is_file());
    assert!(out_dir.join("metrics.jsonl").is_file());

    // a longer run resumed from the smoke checkpoint continues the counter
    let cfg2 = dir.path().join("train2.cfg");
    let body = std::fs::read_to_string(&cfg).unwrap().replace("max_steps = 6", "max_steps = 9");
    std::fs::write(&cfg2, body).unwrap();
    let out2_dir = dir.path().join("run2");
    let out2 = run(&[
        "train",
        "--config",
        cfg2.to_str().unwrap(),
        "--data",
        dir.path().join("data").to_str().unwrap(),
        "--out",
        out2_dir.to_str().unwrap(),
        "--resume",
        out_dir.join("final.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out2), 0, "{}", String::from_utf8_lossy(&out2.stderr));
    let metrics = std::fs::read_to_string(out2_dir.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 7, "resume must continue the step counter");
    let stdout = String::from_utf8_lossy(&out2.stdout);
    assert!(stdout.contains("step 9"));
}

#[test]
fn train_missing_data_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    write_tiny_train_cfg(&cfg);
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        dir.path().join("nope").to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

fn trained_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    make_tiny_dataset(dir);
    let cfg = dir.join("train.cfg");
    write_tiny_train_cfg(&cfg);
    let run_dir = dir.join("run");
    let out = run(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        dir.join("data").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (run_dir.join("final.ckpt"), dir.join("data"))
}

#[test]
fn eval_writes_all_metric_keys() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, data) = trained_fixture(dir.path());
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    for key in ["ap50", "ap5095", "count_error_rate", "mse", "n_images"] {
        assert!(report.get(key).is_some(), "missing key {key}");
    }
    assert!(report["mse"].as_f64().unwrap() >= 0.0);
    assert!(report["ap50"].as_f64().is_some());
}

#[test]
fn eval_without_annotations_reports_null_box_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, data) = trained_fixture(dir.path());
    std::fs::remove_file(data.join("test/annotations.jsonl")).unwrap();
    let report_path = dir.path().join("report.json");
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report["ap50"].is_null());
    assert!(report["count_error_rate"].is_null());
    assert!(report["mse"].as_f64().unwrap() >= 0.0);
}

#[test]
fn eval_checkpoint_dataset_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = trained_fixture(dir.path());
    // 32px dataset against a 16px checkpoint
    let out = run(&[
        "make-dataset",
        "--out",
        dir.path().join("data32").to_str().unwrap(),
        "--seed",
        "1",
        "--counts",
        "2,1,1",
    ]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "eval",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--data",
        dir.path().join("data32").to_str().unwrap(),
        "--out",
        dir.path().join("r.json").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn decompose_renders_panel_per_input_with_tile_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, data) = trained_fixture(dir.path());
    let panels = dir.path().join("panels");
    let out = run(&[
        "decompose",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--images",
        data.join("test/images").to_str().unwrap(),
        "--out",
        panels.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rendered: Vec<_> = std::fs::read_dir(&panels).unwrap().collect();
    assert_eq!(rendered.len(), 3, "one panel per input");
    // tile count 4 + 2K + 1 with K=2 -> 9 tiles of 16px + 8 separators
    let img = image::open(panels.join("000000.panel.png")).unwrap().to_rgb8();
    assert_eq!(img.width(), (9 * 16 + 8 * 2) as u32);
    assert_eq!(img.height(), 16);
}

#[test]
fn benchmark_csv_shape_and_exit() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let out = run(&[
        "benchmark",
        "--grids",
        "2,4",
        "--modes",
        "parallel,sequential",
        "--out",
        csv.to_str().unwrap(),
        "--batch",
        "1",
        "--image-size",
        "16",
        "--k",
        "1",
        "--warmup",
        "1",
        "--timed",
        "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let body = std::fs::read_to_string(&csv).unwrap();
    let mut lines = body.lines();
    assert_eq!(lines.next(), Some("grid,mode,K,batch,mean_s,std_s,capacity"));
    assert_eq!(lines.count(), 4, "row per (grid, mode) pair");

    let out = run(&["benchmark", "--grids", "x", "--out", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}

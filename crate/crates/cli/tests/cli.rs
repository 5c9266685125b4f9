use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fcseg::trainer::{CheckpointRecord, TrainMode};

fn fcseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a config that keeps runs to a fraction of a second.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let scene = dir.join("scene.json");
    std::fs::write(&scene, r#"{"buildings_per_patch": [1, 3], "side_length_range": [6.0, 10.0]}"#).unwrap();
    let out = fcseg(&[
        "--seed",
        "1",
        "--config",
        p(&scene),
        "--out",
        p(&data),
        "gen-data",
        "--n",
        "30",
        "--val",
        "4",
        "--test",
        "4",
        "--patch-size",
        "32",
        "--ratio",
        "1:5",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let config = dir.join("config.json");
    std::fs::write(
        &config,
        r#"{"batch_size": 2, "eval_every": 2, "model": {"base_width": 4, "depth": 3, "width_cap_depth": 3}}"#,
    )
    .unwrap();
    (data, config)
}

#[test]
fn usage_errors_exit_one_with_synopsis() {
    for args in [
        vec!["--bogus"],
        vec![],
        vec!["depth", "--resolution", "1"],
        vec!["depth", "--resolution", "0", "--lengths", "14", "17"],
        vec!["train", "--data", "x"],
        vec!["gen-data", "--n", "3", "--val", "2", "--test", "1"],
    ] {
        let out = fcseg(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", text(&out.stderr));
        assert!(text(&out.stderr).contains("Usage"), "{args:?}: {}", text(&out.stderr));
    }
}

#[test]
fn help_exits_zero() {
    assert_eq!(fcseg(&["--help"]).status.code(), Some(0));
    assert_eq!(fcseg(&["ablate", "--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing");
    let out = fcseg(&["eval", "--checkpoint", p(&missing.join("final.ckpt")), "--data", p(&missing)]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
}

#[test]
fn depth_prints_record_and_surfaces_rounding() {
    let out = fcseg(&["depth", "--resolution", "1", "--lengths", "14", "17"]);
    assert!(out.status.success());
    let stdout = text(&out.stdout);
    assert_eq!(stdout.lines().count(), 1, "{stdout}");
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert_eq!(fields[0], "d=3");
    assert!(fields.contains(&"nearest=4"), "{stdout}");
    assert!(fields.contains(&"buildings=1"), "{stdout}");

    let out = fcseg(&["depth", "--resolution", "0.1", "--lengths", "40", "60", "--max-depth", "5"]);
    let stdout = text(&out.stdout);
    let fields: Vec<&str> = stdout.split_whitespace().collect();
    assert!(fields[0] == "d=5" && fields.contains(&"clamped_from=8"), "{stdout}");
}

#[test]
fn config_file_keys_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let seeded = dir.path().join("seeded.json");
    std::fs::write(&seeded, r#"{"seed": 5, "batch_size": 2, "model": {"base_width": 4, "depth": 3}}"#).unwrap();
    for (flag, expected) in [(None, 5), (Some("7"), 7)] {
        let out_dir = dir.path().join(format!("run{expected}"));
        let mut args = vec!["--config", p(&seeded), "--out", p(&out_dir)];
        if let Some(s) = flag {
            args.extend(["--seed", s]);
        }
        args.extend(["train", "--data", p(&data), "--iters", "1"]);
        let out = fcseg(&args);
        assert!(out.status.success(), "{}", text(&out.stderr));
        let ckpt = CheckpointRecord::<f32>::load(out_dir.join("final.ckpt")).unwrap();
        assert_eq!(ckpt.config.seed, expected);
        assert_eq!(ckpt.config.batch_size, 2);
        assert_eq!(ckpt.config.model.width_cap_depth, 4);
    }

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"learning_rate": 0.1}"#).unwrap();
    let out = fcseg(&["--config", p(&bad), "--out", p(&dir.path().join("x")), "train", "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
    let _ = config;
}

#[test]
fn train_eval_probe_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let run = dir.path().join("run");
    let out = fcseg(&["--config", p(&config), "--out", p(&run), "train", "--data", p(&data), "--iters", "4"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    for f in ["final.ckpt", "loss_history.csv", "val_metrics.csv", "run_manifest.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["total_iters"], 4);

    let scores = dir.path().join("scores");
    let ckpt = run.join("final.ckpt");
    let out = fcseg(&["--out", p(&scores), "eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--run-id", "r1"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "run_id,split,tp,fp,fn,tn,precision,recall,f1,iou");
    assert!(lines[1].starts_with("r1,test,"));
    let counts: u64 = lines[1].split(',').skip(2).take(4).map(|v| v.parse::<u64>().unwrap()).sum();
    assert_eq!(counts, 4 * 32 * 32);
    assert_eq!(std::fs::read_to_string(scores.join("eval.csv")).unwrap(), stdout);

    let out = fcseg(&["eval", "--checkpoint", p(&ckpt), "--data", p(&data), "--split", "unlabeled"]);
    assert_eq!(out.status.code(), Some(1));

    let probe = dir.path().join("probe");
    let out = fcseg(&[
        "--out",
        p(&probe),
        "probe",
        "--data",
        p(&data),
        "--checkpoint",
        p(&ckpt),
        "--depth",
        "2",
        "--limit",
        "3",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert_eq!(std::fs::read_dir(probe.join("heatmaps")).unwrap().count(), 3);
    assert_eq!(std::fs::read_to_string(probe.join("probe.csv")).unwrap().lines().count(), 4);
    let out = fcseg(&["--out", p(&probe), "probe", "--data", p(&data), "--checkpoint", p(&ckpt), "--depth", "4"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablate_runs_every_mode_on_shared_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let (data, config) = fixture(dir.path());
    let out_dir = dir.path().join("ablate");
    let out = fcseg(&[
        "--config",
        p(&config),
        "--out",
        p(&out_dir),
        "ablate",
        "--data",
        p(&data),
        "--seeds",
        "0,1",
        "--iters",
        "2",
    ]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let runs = std::fs::read_to_string(out_dir.join("ablation_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 4 * 2);
    let summary = std::fs::read_to_string(out_dir.join("ablation_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    for mode in TrainMode::ALL {
        for seed in [0, 1] {
            let run = out_dir.join(format!("{}_seed{seed}", mode.name()));
            assert!(run.join("final.ckpt").is_file());
            let manifest: serde_json::Value =
                serde_json::from_str(&std::fs::read_to_string(run.join("run_manifest.json")).unwrap()).unwrap();
            assert_eq!(manifest["config"]["mode"], mode.name());
            assert_eq!(manifest["config"]["seed"], seed);
        }
    }
    assert!(out_dir.join("run_manifest.json").is_file());
}

#[test]
fn gen_data_writes_requested_split() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = fixture(dir.path());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let count = |k: &str| manifest["split"][k].as_array().unwrap().len();
    assert_eq!((count("val"), count("test")), (4, 4));
    assert_eq!(count("labeled") + count("unlabeled"), 22);
    assert!(data.join("run_manifest.json").is_file());
}

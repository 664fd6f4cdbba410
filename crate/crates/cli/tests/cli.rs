use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use trimodal_core::heatmap::{parse_keypoints, reduce_heatmap, render_heatmap};
use trimodal_core::numerics::load_tensor;

fn trimodal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trimodal")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn keypoint_json(frames: &[Vec<(usize, [f64; 3])>]) -> String {
    let frames: Vec<Vec<[f64; 3]>> = frames
        .iter()
        .map(|pts| {
            let mut all = vec![[0.0, 0.0, 0.0]; 18];
            for &(k, v) in pts {
                all[k] = v;
            }
            all
        })
        .collect();
    serde_json::to_string(&frames).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    for sub in [None, Some("gen"), Some("heatmap"), Some("train"), Some("eval"), Some("ablate")] {
        let mut args: Vec<&str> = sub.into_iter().collect();
        args.push("--help");
        let out = trimodal(&args);
        assert_eq!(code(&out), 0, "{args:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
    assert_eq!(code(&trimodal(&["--version"])), 0);
}

#[test]
fn argument_errors_exit_one() {
    assert_eq!(code(&trimodal(&[])), 1);
    assert_eq!(code(&trimodal(&["train", "--out", "x", "--bogus"])), 1);
    assert_eq!(code(&trimodal(&["gen"])), 1);
    assert_eq!(code(&trimodal(&["eval", "--out", "x", "--split", "val"])), 1);
}

#[test]
fn heatmap_input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let kp = dir.path().join("kp.json");
    let out = dir.path().join("out");
    fs::write(&kp, "[[[1, 2]]]").unwrap();
    assert_eq!(code(&trimodal(&["heatmap", "--keypoints", p(&kp), "--out", p(&out)])), 1);
    fs::write(&kp, "{").unwrap();
    let o = trimodal(&["heatmap", "--keypoints", p(&kp), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    let missing = dir.path().join("missing.json");
    assert_eq!(code(&trimodal(&["heatmap", "--keypoints", p(&missing), "--out", p(&out)])), 1);
    assert_eq!(code(&trimodal(&["heatmap", "--out", p(&out)])), 1);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"schema_version": 2}"#).unwrap();
    fs::write(&kp, "[]").unwrap();
    assert_eq!(
        code(&trimodal(&["heatmap", "--config", p(&cfg), "--keypoints", p(&kp), "--out", p(&out)])),
        1
    );
}

#[test]
fn empty_keypoint_list_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let kp = dir.path().join("kp.json");
    let out = dir.path().join("out");
    fs::write(&kp, "[]").unwrap();
    assert_eq!(code(&trimodal(&["heatmap", "--keypoints", p(&kp), "--out", p(&out)])), 0);
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn heatmaps_match_in_process_rendering() {
    let dir = tempfile::tempdir().unwrap();
    let kp = dir.path().join("kp.json");
    let out = dir.path().join("out");
    let text = keypoint_json(&[
        vec![(3, [10.0, 4.0, 1.0])],
        vec![(0, [2.5, 7.0, 0.4]), (12, [20.0, 11.0, 0.9]), (17, [-3.0, 40.0, 0.6])],
        vec![],
    ]);
    fs::write(&kp, &text).unwrap();
    let args = ["heatmap", "--keypoints", p(&kp), "--height", "16", "--width", "24", "--sigma", "1.5", "--out", p(&out)];
    assert_eq!(code(&trimodal(&args)), 0);
    let frames = parse_keypoints(&text).unwrap();
    for (i, kf) in frames.iter().enumerate() {
        let expected = reduce_heatmap(&render_heatmap(kf, 16, 24, 1.5).unwrap()).unwrap();
        let got = load_tensor(out.join(format!("frame_{i:03}"))).unwrap();
        assert_eq!(got, expected, "frame {i}");
        let pgm = fs::read(out.join(format!("frame_{i:03}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n24 16\n255\n"));
        let pixels = &pgm[pgm.len() - 16 * 24..];
        let max = *pixels.iter().max().unwrap();
        assert_eq!(max, if i == 2 { 0 } else { 255 });
    }
    // A lone keypoint peaks at its own pixel.
    let pgm = fs::read(out.join("frame_000.pgm")).unwrap();
    let pixels = &pgm[pgm.len() - 16 * 24..];
    assert_eq!(pixels[4 * 24 + 10], 255);
}

fn tiny_run(dir: &Path) -> (PathBuf, PathBuf) {
    let data = dir.join("data");
    let out = trimodal(&[
        "gen", "--out", p(&data), "--classes", "raise arms,clap hands,jump up", "--clips-per-class", "4",
        "--test-per-class", "1", "--frames", "8", "--height", "16", "--width", "16", "--seed", "2",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = dir.join("run.json");
    let body = serde_json::json!({
        "frames_per_clip": 4,
        "model": {"patch_size": 8, "layers": 1, "heads": 2, "width": 8, "embed_dim": 8, "mlp_ratio": 2},
        "learning_rate": 0.01,
        "epochs": 2,
        "batch_size": 4,
        "augment": {"crop": 12},
    });
    fs::write(&cfg, body.to_string()).unwrap();
    (data, cfg)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_train_eval_ablate() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(dir.path());
    let manifest = json(&data.join("manifest.json"));
    assert_eq!(manifest["train"].as_array().unwrap().len(), 9);
    assert_eq!(manifest["test"].as_array().unwrap().len(), 3);

    let run = dir.path().join("run");
    let out = trimodal(&["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&run.join("report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);
    assert_eq!(report["modalities"], "Video + Pose + Text");
    assert!(run.join("timing.json").exists());
    let final_acc = report["epochs"][1]["test_acc"].as_f64().unwrap();

    let eval_dir = dir.path().join("eval");
    let ckpt = run.join("checkpoint");
    let out = trimodal(&["eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let eval = json(&eval_dir.join("eval.json"));
    assert_eq!(eval["top1"].as_f64().unwrap(), final_acc);
    assert_eq!(eval["split"], "test");

    let out = trimodal(&[
        "eval", "--checkpoint", p(&ckpt), "--dataset", p(&data), "--modalities", "video,smell", "--out", p(&eval_dir),
    ]);
    assert_eq!(code(&out), 1);
    let out = trimodal(&["eval", "--checkpoint", p(&data), "--dataset", p(&data), "--out", p(&eval_dir)]);
    assert_eq!(code(&out), 1);

    let abl = dir.path().join("ablate");
    let out = trimodal(&["ablate", "--config", p(&cfg), "--dataset", p(&data), "--epochs", "1", "--out", p(&abl)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = json(&abl.join("ablation.json"));
    let labels: Vec<&str> = table["rows"].as_array().unwrap().iter().map(|r| r["modalities"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Pose + Text", "Video + Text", "Video + Pose", "Video + Pose + Text"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("test_acc"));
}

#[test]
fn train_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(dir.path());
    let run = dir.path().join("run");
    let out = trimodal(&["train", "--config", p(&cfg), "--out", p(&run)]);
    assert_eq!(code(&out), 1);
    let out = trimodal(&["train", "--config", p(&cfg), "--dataset", p(&data), "--modalities", "pose,smell", "--out", p(&run)]);
    assert_eq!(code(&out), 1);
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"epochz": 2}"#).unwrap();
    assert_eq!(code(&trimodal(&["train", "--config", p(&bad), "--dataset", p(&data), "--out", p(&run)])), 1);
    let missing = dir.path().join("nope");
    assert_eq!(code(&trimodal(&["train", "--config", p(&cfg), "--dataset", p(&missing), "--out", p(&run)])), 1);
}

#[test]
fn repeated_runs_write_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(dir.path());
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        let out = trimodal(&["train", "--config", p(&cfg), "--dataset", p(&data), "--out", p(&run), "--data-seed", "3"]);
        assert_eq!(code(&out), 0);
        reports.push(fs::read(run.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn diverging_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (data, cfg) = tiny_run(dir.path());
    let run = dir.path().join("run");
    let out = trimodal(&[
        "train", "--config", p(&cfg), "--dataset", p(&data), "--learning-rate", "1e300", "--epochs", "6", "--out", p(&run),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tcve::io::write_video_dir;
use tcve::stubs::PixelVideo;
use tcve::toy::{toy_video, TOY_PROMPT};

const TINY: &str = r#"{
  "spatial": {"channel_schedule": [8, 16], "text_dim": 8, "time_dim": 8},
  "temporal": {"time_dim": 8},
  "train": {"iterations": 3},
  "schedule": {"T": 100, "S": 4}
}"#;

fn tcve(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tcve")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn assert_json_error(out: &Output) -> serde_json::Value {
    assert!(!out.status.success(), "expected failure");
    let stderr = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(stderr.trim_end().lines().count(), 1, "stderr: {stderr}");
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).expect("stderr is JSON");
    assert!(v["error"].is_string(), "{v}");
    v
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn frame_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .map(|p| (p.file_name().unwrap().into(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn eval_on_identical_frames_reports_100() {
    let dir = tempfile::tempdir().unwrap();
    let frame = toy_video().frame(0, 2);
    let video = PixelVideo::from_frames(&vec![frame; 4], 16, 16).unwrap();
    write_video_dir(dir.path(), &video).unwrap();
    let v = stdout_json(&tcve(&["eval", "--video", s(dir.path()), "--prompt", "a red ball"]));
    assert_eq!(v["frame_consistency"].as_f64(), Some(100.0));
    assert!(v["textual_alignment"].as_f64().unwrap().is_finite());
}

#[test]
fn malformed_inputs_give_single_line_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("video");
    write_video_dir(&video, &toy_video()).unwrap();

    assert_json_error(&tcve(&["eval", "--video", "/definitely/not/here", "--prompt", "x"]));
    assert_json_error(&tcve(&["eval", "--video", s(&video)]));
    assert_json_error(&tcve(&["eval", "--video", s(&video), "--prompt", "   "]));
    assert_json_error(&tcve(&["--ablate", "no-such", "eval", "--video", s(&video), "--prompt", "x"]));

    let bad = dir.path().join("bad");
    std::fs::create_dir(&bad).unwrap();
    std::fs::write(bad.join("frame_0000.ppm"), b"P3 1 1 255\n0 0 0\n").unwrap();
    assert_json_error(&tcve(&["eval", "--video", s(&bad), "--prompt", "x"]));

    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"stu": {"lamda": 0.5}}"#).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let err = assert_json_error(&tcve(&[
        "train", "--video", s(&video), "--prompt", "x", "--config", s(&cfg), "--out", s(&ckpt),
    ]));
    assert!(err["error"].as_str().unwrap().contains("lamda"), "{err}");
    assert!(!ckpt.exists());
}

#[test]
fn train_edit_reconstruct_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("video");
    write_video_dir(&video, &toy_video()).unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();

    let train = |name: &str| {
        let ckpt = dir.path().join(name);
        let out = tcve(&[
            "train", "--video", s(&video), "--prompt", TOY_PROMPT, "--config", s(&cfg), "--seed", "7", "--out", s(&ckpt),
        ]);
        let summary = stdout_json(&out);
        assert_eq!(summary["iterations"], 3);
        ckpt
    };
    let (a, b) = (train("a.ckpt"), train("b.ckpt"));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let trace: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.ckpt.loss.json")).unwrap()).unwrap();
    assert_eq!(trace["losses"].as_array().unwrap().len(), 3);
    assert_eq!(trace["seed"], 7);

    let edit = |out: &str| {
        let out = dir.path().join(out);
        stdout_json(&tcve(&[
            "edit", "--video", s(&video), "--ckpt", s(&a), "--source-prompt", TOY_PROMPT,
            "--prompt", "a green cube sliding across a blue floor", "--seed", "7", "--out", s(&out),
        ]));
        frame_bytes(&out)
    };
    let first = edit("e1");
    assert_eq!(first.len(), 8);
    assert_eq!(first, edit("e2"));

    let rec = dir.path().join("rec");
    let report = stdout_json(&tcve(&["reconstruct", "--video", s(&video), "--ckpt", s(&a), "--prompt", TOY_PROMPT, "--out", s(&rec)]));
    assert_eq!(report["steps"], 4);
    assert!(report["relative_latent_error"].as_f64().unwrap().is_finite());
    assert!(report["pixel_mae"].as_f64().unwrap().is_finite());
    assert!(rec.join("report.json").exists());
    assert_eq!(frame_bytes(&rec).len(), 8);

    // A checkpoint trained with every component cannot be loaded into a
    // model that drops one.
    let err = assert_json_error(&tcve(&[
        "--ablate", "no-ta", "reconstruct", "--video", s(&video), "--ckpt", s(&a), "--prompt", "x", "--out", s(&rec),
    ]));
    assert!(err["error"].as_str().unwrap().contains("not in model"), "{err}");
}

#[test]
fn ablated_training_runs() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("video");
    write_video_dir(&video, &toy_video()).unwrap();
    let cfg = dir.path().join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    for flag in ["no-tu", "no-stu", "no-ta", "no-3dconv"] {
        let ckpt = dir.path().join(format!("{flag}.ckpt"));
        stdout_json(&tcve(&[
            "--ablate", flag, "train", "--video", s(&video), "--prompt", TOY_PROMPT, "--config", s(&cfg), "--out", s(&ckpt),
        ]));
        let sidecar = std::fs::read_to_string(dir.path().join(format!("{flag}.ckpt.config.json"))).unwrap();
        let cfg = tcve::TcveConfig::from_json(&sidecar).unwrap();
        assert_ne!(cfg.train.ablation, tcve::model::Ablation::default(), "{flag}");
    }
}

#[test]
fn gradcheck_module_selection() {
    let out = tcve(&["gradcheck", "--module", "softmax"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 1 && text.lines().all(|l| l.starts_with("PASS")), "{text}");
    assert_json_error(&tcve(&["gradcheck", "--module", "nonexistent"]));
}

#[test]
fn edit_defaults_in_help() {
    let out = tcve(&["edit", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("12.5"), "{text}");
}

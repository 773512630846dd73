//! End-to-end runs of the command-line tool.

use std::path::Path;
use std::process::{Command, Output};

use prompt_track::io::{read_boxes, GROUNDTRUTH};

const TINY: &str = r#"{
  "model": { "dim": 16, "heads": 2, "depth": 1 },
  "train": { "steps": 3, "videos_per_batch": 2, "frames_per_video": 2, "checkpoint_every": 2 },
  "data": { "videos": 2, "frames": 5, "seed": 4 },
  "ablation": {
    "seeds": [1],
    "train_data": { "videos": 2, "frames": 5 },
    "suite": { "videos": 2, "frames": 4 }
  }
}"#;

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prompt-track"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn synth_train_track_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();

    ok(&run(
        &["synth", "--config", "tiny.json", "--out", "data"],
        dir,
    ));
    let video = dir.join("data/video_000");
    assert!(video.join("0001.png").exists() && video.join("0005.png").exists());
    let gt = read_boxes(video.join(GROUNDTRUTH)).unwrap();
    assert_eq!(gt.len(), 5);

    ok(&run(
        &[
            "train",
            "--config",
            "tiny.json",
            "--out",
            "model.ckpt",
            "--data",
            "data",
        ],
        dir,
    ));
    assert!(dir.join("model.ckpt").exists());
    assert!(dir.join("model.ckpt.config.json").exists());
    assert!(dir.join("model.ckpt.step2").exists());
    let trace = std::fs::read_to_string(dir.join("model.ckpt.loss.txt")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 3);
    for (k, line) in lines.iter().enumerate() {
        let (step, loss) = line.split_once(',').unwrap();
        assert_eq!(step.parse::<usize>().unwrap(), k);
        assert!(loss.parse::<f64>().unwrap().is_finite());
    }

    std::fs::create_dir(dir.join("results")).unwrap();
    for name in ["video_000", "video_001"] {
        let out_file = format!("results/{name}.txt");
        let video = format!("data/{name}");
        ok(&run(
            &[
                "track",
                "--ckpt",
                "model.ckpt",
                "--video",
                &video,
                "--out",
                &out_file,
            ],
            dir,
        ));
        let boxes = read_boxes(dir.join(&out_file)).unwrap();
        assert_eq!(boxes.len(), 5);
        assert_eq!(
            boxes[0],
            read_boxes(dir.join(&video).join(GROUNDTRUTH)).unwrap()[0]
        );
    }

    let table = ok(&run(
        &[
            "eval",
            "--results",
            "results",
            "--gt",
            "data",
            "--report",
            "report.json",
        ],
        dir,
    ));
    assert!(table.contains("video_000") && table.contains("mean"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["videos"].as_array().unwrap().len(), 2);
    let auc = json["aggregate"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    // Training twice from the same config gives byte-identical checkpoints.
    ok(&run(
        &[
            "train",
            "--config",
            "tiny.json",
            "--out",
            "again.ckpt",
            "--data",
            "data",
        ],
        dir,
    ));
    assert_eq!(
        std::fs::read(dir.join("model.ckpt")).unwrap(),
        std::fs::read(dir.join("again.ckpt")).unwrap()
    );
}

#[test]
fn track_accepts_an_explicit_init_box() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    ok(&run(
        &["synth", "--config", "tiny.json", "--out", "data"],
        dir,
    ));
    ok(&run(
        &["train", "--config", "tiny.json", "--out", "m.ckpt"],
        dir,
    ));
    std::fs::remove_file(dir.join("data/video_001").join(GROUNDTRUTH)).unwrap();
    let args = [
        "track",
        "--ckpt",
        "m.ckpt",
        "--video",
        "data/video_001",
        "--out",
        "r.txt",
        "--init",
        "30,40,20,16",
    ];
    ok(&run(&args, dir));
    assert_eq!(
        read_boxes(dir.join("r.txt")).unwrap()[0],
        prompt_track::BBox::new(30.0, 40.0, 20.0, 16.0)
    );

    let out = run(
        &[
            "track",
            "--ckpt",
            "m.ckpt",
            "--video",
            "data/video_001",
            "--out",
            "r.txt",
        ],
        dir,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));
}

#[test]
fn ablate_reports_both_arms_and_the_delta() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("tiny.json"),
        TINY.replace("\"steps\": 3", "\"steps\": 2"),
    )
    .unwrap();
    let table = ok(&run(
        &[
            "ablate",
            "--config",
            "tiny.json",
            "--report",
            "ablation.json",
        ],
        dir,
    ));
    assert!(table.contains("delta"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["baseline"]["prompts"], "none");
    assert_eq!(json["treatment"]["prompts"], "both");
    let d = json["delta_mean_iou"].as_f64().unwrap();
    let want = json["treatment"]["mean_iou"].as_f64().unwrap()
        - json["baseline"]["mean_iou"].as_f64().unwrap();
    assert!((d - want).abs() < 1e-12);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&run(&["gradcheck"], tmp.path()));
    assert!(stdout.contains("matmul") && stdout.contains("layer_norm"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = run(
        &["train", "--config", "missing.json", "--out", "m.ckpt"],
        dir,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    std::fs::write(
        dir.join("bad.json"),
        r#"{"model": {"dim": 30, "heads": 4}}"#,
    )
    .unwrap();
    assert!(!run(&["synth", "--config", "bad.json", "--out", "d"], dir)
        .status
        .success());

    std::fs::create_dir_all(dir.join("res")).unwrap();
    std::fs::create_dir_all(dir.join("gt/v")).unwrap();
    std::fs::write(dir.join("res/v.txt"), "1,2,3,4\n").unwrap();
    std::fs::write(dir.join("gt/v").join(GROUNDTRUTH), "1,2,3\n").unwrap();
    let out = run(
        &[
            "eval",
            "--results",
            "res",
            "--gt",
            "gt",
            "--report",
            "r.json",
        ],
        dir,
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    std::fs::write(dir.join("gt/v").join(GROUNDTRUTH), "1,2,3,4\n1,2,3,4\n").unwrap();
    assert!(!run(
        &[
            "eval",
            "--results",
            "res",
            "--gt",
            "gt",
            "--report",
            "r.json"
        ],
        dir
    )
    .status
    .success());

    assert!(!run(&["no-such-command"], dir).status.success());
}

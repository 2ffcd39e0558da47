//! Drives the binary through the whole pipeline in a temp directory.

use std::path::Path;
use std::process::{Command, Output};

fn cadspot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadspot"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read_dir_sorted(dir: &Path, suffix: &str) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(suffix))
        .collect();
    names.sort();
    names
}

#[test]
fn full_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    let manifest = data.join("train.manifest.json");

    // Synthesize a small labeled dataset.
    let out = cadspot(&[
        "gen-synth",
        "--out",
        data.to_str().unwrap(),
        "--seed",
        "5",
        "--drawings",
        "4",
        "--no-tables",
    ]);
    assert_ok(&out, "gen-synth");
    assert!(manifest.exists());

    // Determinism: a second run with the same seed writes identical bytes.
    let data2 = root.join("data2");
    assert_ok(
        &cadspot(&[
            "gen-synth",
            "--out",
            data2.to_str().unwrap(),
            "--seed",
            "5",
            "--drawings",
            "4",
            "--no-tables",
        ]),
        "gen-synth again",
    );
    for name in read_dir_sorted(&data, ".json") {
        let a = std::fs::read(data.join(&name)).unwrap();
        let b = std::fs::read(data2.join(&name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // Graph statistics.
    let stats = root.join("stats.json");
    assert_ok(
        &cadspot(&[
            "build-graph",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            stats.to_str().unwrap(),
        ]),
        "build-graph",
    );
    let stats_json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&stats).unwrap()).unwrap();
    assert_eq!(stats_json.as_array().unwrap().len(), 4);
    assert!(stats_json[0]["degree_histogram"].is_array());

    // Config file + flag precedence: the echoed effective config keeps the
    // TOML epsilon but takes the command-line epoch count.
    let config_path = root.join("run.toml");
    std::fs::write(&config_path, "[graph]\nepsilon = 250.0\n[train]\nepochs = 99\n").unwrap();
    let run = root.join("run");
    let out = cadspot(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--stages",
        "2",
        "--heads",
        "2",
        "--width",
        "32",
        "--epochs",
        "8",
        "--seed",
        "7",
    ]);
    assert_ok(&out, "train");
    let effective = std::fs::read_to_string(run.join("config.effective.toml")).unwrap();
    assert!(effective.contains("epsilon = 250.0"), "{effective}");
    assert!(effective.contains("epochs = 8"), "{effective}");
    assert!(run.join("checkpoint_best.json").exists());
    assert!(run.join("checkpoint_final.json").exists());

    // The epoch log is line-delimited JSON with finite losses.
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 8);
    for line in &lines {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["train_loss_sem"].as_f64().unwrap().is_finite());
        assert!(v["train_loss_ins"].as_f64().unwrap().is_finite());
        assert!(v["lr"].as_f64().unwrap() > 0.0);
    }

    // Resume from the final checkpoint for two more epochs.
    let run2 = root.join("run2");
    let out = cadspot(&[
        "train",
        "--config",
        config_path.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
        "--resume",
        run.join("checkpoint_final.json").to_str().unwrap(),
        "--stages",
        "2",
        "--heads",
        "2",
        "--width",
        "32",
        "--epochs",
        "10",
        "--seed",
        "7",
    ]);
    assert_ok(&out, "train --resume");
    let log2 = std::fs::read_to_string(run2.join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log2.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"].as_u64(), Some(8));

    // Inference writes one prediction per drawing; config must match the
    // one used for the graphs (epsilon from the TOML).
    let preds = root.join("preds");
    let out = cadspot(&[
        "infer",
        "--config",
        config_path.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--checkpoint",
        run.join("checkpoint_best.json").to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert_ok(&out, "infer");
    assert_eq!(read_dir_sorted(&preds, ".pred.json").len(), 4);

    // Evaluating the ground truth against itself scores perfectly.
    let report_path = root.join("gt_report.json");
    let out = cadspot(&[
        "eval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--gt-as-pred",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert_ok(&out, "eval --gt-as-pred");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["panoptic"]["pq"].as_f64(), Some(1.0));
    assert_eq!(report["f1"]["f1"].as_f64(), Some(1.0));
    assert_eq!(report["detection"]["ap50"].as_f64(), Some(1.0));

    // Evaluating real predictions produces a finite report.
    let report2 = root.join("report.json");
    let out = cadspot(&[
        "eval",
        "--config",
        config_path.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
        "--out",
        report2.to_str().unwrap(),
    ]);
    assert_ok(&out, "eval --predictions");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report2).unwrap()).unwrap();
    let pq = report["panoptic"]["pq"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&pq));

    // SVG rendering with overlays.
    let svg_dir = root.join("svg");
    let out = cadspot(&[
        "render",
        "--manifest",
        manifest.to_str().unwrap(),
        "--predictions",
        preds.to_str().unwrap(),
        "--out",
        svg_dir.to_str().unwrap(),
    ]);
    assert_ok(&out, "render");
    let svgs = read_dir_sorted(&svg_dir, ".svg");
    assert_eq!(svgs.len(), 4);
    let svg = std::fs::read_to_string(svg_dir.join(&svgs[0])).unwrap();
    assert!(svg.starts_with("<?xml"));
    assert!(svg.contains("<path"));

    // Ablation plumbing with tiny settings writes the comparison table.
    let ablate_dir = root.join("ablate");
    let out = cadspot(&[
        "ablate",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        ablate_dir.to_str().unwrap(),
        "--stages",
        "2",
        "--heads",
        "2",
        "--width",
        "16",
        "--epochs",
        "2",
        "--seed",
        "3",
    ]);
    assert_ok(&out, "ablate");
    let table = std::fs::read_to_string(ablate_dir.join("ablation.txt")).unwrap();
    for name in ["baseline", "rse", "cee", "single_stage_cee", "full"] {
        assert!(table.contains(name), "missing row {name} in:\n{table}");
    }
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ablate_dir.join("ablation.json")).unwrap())
            .unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 5);
}

#[test]
fn gradcheck_command_passes() {
    let out = cadspot(&["gradcheck"]);
    assert_ok(&out, "gradcheck");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("pass"), "{stdout}");
}

#[test]
fn exit_codes_are_distinct() {
    // Usage/config error.
    let out = cadspot(&["eval", "--manifest", "x.json"]);
    assert_eq!(out.status.code(), Some(2));
    // I/O error.
    let out = cadspot(&["eval", "--manifest", "/definitely/missing.json", "--gt-as-pred"]);
    assert_eq!(out.status.code(), Some(3));
}

use std::path::Path;
use std::process::Command;

const TINY: &str = r#"{
  "data": { "image_size": 16, "n_train": 12, "n_calib": 8, "n_id_test": 6, "n_ood_test": 6 },
  "task": { "layers": 5, "base_channels": 4, "image_size": 16, "io_channels": 1 },
  "task_schedule": { "base_lr": 0.002, "hold_epochs": 1, "decay_epochs": 0 },
  "recon_schedule": { "base_lr": 0.002, "hold_epochs": 1, "decay_epochs": 0 },
  "batch_size": 4,
  "adapt": { "steps": 1, "lr": 0.001, "weights": { "input": 1.0, "levels": 1.0, "output": 1.0 } },
  "random_repeats": 1
}"#;

fn tta(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_tta")).args(args).output().expect("spawn tta");
    assert!(
        out.status.success(),
        "tta {args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn first_sample_id(report: &Path) -> String {
    let text = std::fs::read_to_string(report).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "sample_id").unwrap();
    lines.next().unwrap().split(',').nth(col).unwrap().to_string()
}

#[test]
fn stage_by_stage_matches_the_one_shot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    let (data, task, recon, cal) = (d.join("data"), d.join("task"), d.join("recon"), d.join("calibration.json"));

    tta(&["gen-data", "--out", s(&data), "--pgm", "1", "--config", c]);
    assert!(data.join("index.json").exists());
    tta(&["train-task", "--data", s(&data), "--out", s(&task), "--config", c]);
    assert!(task.join("manifest.json").exists());
    tta(&["train-recon", "--data", s(&data), "--task", s(&task), "--out", s(&recon), "--config", c]);
    tta(&["calibrate", "--data", s(&data), "--task", s(&task), "--recon", s(&recon), "--out", s(&cal), "--config", c]);
    assert!(cal.exists());

    let inputs = ["--data", s(&data), "--task", s(&task), "--recon", s(&recon), "--calibration", s(&cal)];
    let mut runs = Vec::new();
    for strategy in ["grid", "fs", "be"] {
        let out = d.join("runs").join(strategy);
        let mut args = vec!["run-tta", "--out", s(&out), "--strategy", strategy, "--config", c];
        args.extend(inputs);
        tta(&args);
        for f in ["report.csv", "budget.csv", "summary.json", "manifest.json"] {
            assert!(out.join(f).exists(), "{strategy}: {f}");
        }
        runs.push(out);
    }

    let grid = &runs[0];
    let before = std::fs::read(grid.join("summary.json")).unwrap();
    tta(&["evaluate", "--run", s(grid)]);
    assert_eq!(before, std::fs::read(grid.join("summary.json")).unwrap());

    let table = d.join("wilcoxon.csv");
    tta(&["compare", "--runs", s(&runs[0]), s(&runs[1]), s(&runs[2]), "--out", s(&table)]);
    let text = std::fs::read_to_string(&table).unwrap();
    assert!(text.starts_with("# alpha_corr="));
    assert!(text.contains("no-tta"));

    let id = first_sample_id(&grid.join("report.csv"));
    let traces = d.join("traces.jsonl");
    let mut args = vec!["dump-traces", "--ids", &id, "--out", s(&traces), "--config", c];
    args.extend(inputs);
    tta(&args);
    assert!(traces.exists());

    // The one-shot pipeline on the same config reproduces the grid report.
    let whole = d.join("whole");
    tta(&["pipeline", "--out", s(&whole), "--strategies", "grid", "--sweep", "50,90", "--config", c]);
    assert_eq!(
        std::fs::read(grid.join("report.csv")).unwrap(),
        std::fs::read(whole.join("runs/grid/report.csv")).unwrap()
    );
    assert!(whole.join("sweep.csv").exists());
}

#[test]
fn bad_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = Command::new(env!("CARGO_BIN_EXE_tta"))
        .args(["evaluate", "--run", s(&missing)])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_tta"))
        .args(["gen-data", "--out", s(&missing), "--strategy", "sideways"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sideways"));
}

//! End-to-end checks of the `qttt` binary.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_qttt"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("qttt-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn gen_is_deterministic_and_counts_match() {
    let dir = temp_dir("gen");
    let out1 = dir.join("a.jsonl");
    let out2 = dir.join("b.jsonl");
    for out in [&out1, &out2] {
        let status = bin()
            .args([
                "gen",
                "--kind",
                "transactions",
                "--lengths",
                "25",
                "--seeds",
                "6",
                "--bug-mix",
                "all",
                "--out",
            ])
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.iter().filter(|&&c| c == b'\n').count(), 6);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn theory_check_small_trials_passes_quickly() {
    let t0 = std::time::Instant::now();
    let output = bin()
        .args(["theory-check", "--trials", "10", "--seed", "5"])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("[PASS]"));
    assert!(!stdout.contains("[FAIL]"));
    assert!(t0.elapsed().as_secs_f64() < 10.0);

    // Seeded runs are reproducible.
    let again = bin()
        .args(["theory-check", "--trials", "10", "--seed", "5"])
        .output()
        .unwrap();
    assert_eq!(output.stdout, again.stdout);
}

#[test]
fn flops_json_contains_matched_schedule() {
    let output = bin()
        .args([
            "flops", "--layers", "32", "--dim", "4096", "--ctx", "100000", "--span", "128",
            "--steps", "32", "--json",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let v: serde_json::Value =
        serde_json::from_slice(&output.stdout).expect("flops --json emits JSON");
    assert_eq!(v["matched_thinking_tokens_rule"], 8192);
}

#[test]
fn train_run_report_pipeline() {
    let dir = temp_dir("pipeline");
    let ckpt = dir.join("model.ckpt");
    let status = bin()
        .args([
            "train",
            "--kind",
            "transactions",
            "--lengths",
            "5,6",
            "--seeds",
            "8",
            "--wide",
            "--layers",
            "1",
            "--heads",
            "2",
            "--dim",
            "16",
            "--steps",
            "8",
            "--window",
            "64",
            "--max-context",
            "2048",
            "--out",
        ])
        .arg(&ckpt)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(ckpt.exists());

    let config = serde_json::json!({
        "task": {
            "kind": "transactions",
            "lengths": [6],
            "seeds": [1, 2],
            "bug_mix": ["NEGATIVE_BAL"],
            "n_accounts": 2,
            "wide": true
        },
        "checkpoint": ckpt,
        "conditions": [
            {"type": "in_context"},
            {"type": "thinking", "tokens": 32},
            {"type": "qttt"}
        ],
        "adaptation": {
            "n_steps": 2, "span_len": 8, "lr": 1e-3,
            "optimizer": "AdaptiveMoment", "weight_decay": 0.01,
            "grad_clip": 1.0, "seed": 0
        },
        "answer_tokens": 8,
        "out_dir": dir.join("out")
    });
    let cfg_path = dir.join("exp.json");
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();

    let output = bin().args(["run", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(
        output.status.success(),
        "run failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = std::fs::read_to_string(dir.join("out/results.csv")).unwrap();
    assert!(csv.starts_with("task_kind,length_param,condition,seed,"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    // One adaptation trace per qttt row.
    let traces: Vec<_> = std::fs::read_dir(dir.join("out/traces")).unwrap().collect();
    assert_eq!(traces.len(), 2);

    let report = bin().args(["report", "--results"]).arg(dir.join("out")).output().unwrap();
    assert!(report.status.success());
    let text = String::from_utf8_lossy(&report.stdout);
    assert!(text.contains("accuracy"));
    assert!(text.contains("in_context"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_refuses_mismatched_budgets() {
    let dir = temp_dir("mismatch");
    let ckpt = dir.join("model.ckpt");
    bin()
        .args([
            "train", "--kind", "transactions", "--lengths", "5", "--seeds", "2", "--wide",
            "--layers", "1", "--heads", "2", "--dim", "16", "--steps", "2", "--window", "64",
            "--out",
        ])
        .arg(&ckpt)
        .status()
        .unwrap();
    // rule budget = 2*2*8 = 32, thinking asks 64: mismatch > 5%.
    let config = serde_json::json!({
        "task": {"kind": "transactions", "lengths": [6], "seeds": [1], "wide": true, "n_accounts": 2},
        "checkpoint": ckpt,
        "conditions": [{"type": "thinking", "tokens": 64}, {"type": "qttt"}],
        "adaptation": {
            "n_steps": 2, "span_len": 8, "lr": 1e-3,
            "optimizer": "AdaptiveMoment", "weight_decay": 0.01,
            "grad_clip": 1.0, "seed": 0
        },
        "answer_tokens": 8,
        "out_dir": dir.join("out")
    });
    let cfg_path = dir.join("exp.json");
    std::fs::write(&cfg_path, serde_json::to_string(&config).unwrap()).unwrap();
    let output = bin().args(["run", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("budget"), "stderr: {err}");
    std::fs::remove_dir_all(&dir).ok();
}

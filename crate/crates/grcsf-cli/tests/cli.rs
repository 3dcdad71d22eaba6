//! End-to-end subprocess tests for the `grcsf` binary: pipeline staging,
//! snapshot-based reruns, exit codes, and the GRCSF_OUT override.

use std::path::Path;
use std::process::{Command, Output};

fn grcsf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grcsf"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn grcsf")
}

fn assert_code(out: &Output, want: i32, ctx: &str) {
    let got = out.status.code().unwrap_or(-1);
    assert_eq!(
        got,
        want,
        "{ctx}: exit {got}, want {want}\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn micro_config(out_root: &str, hu_mode: bool) -> serde_json::Value {
    serde_json::json!({
        "synth": {
            "image_size": 16, "n_train": 6, "n_val": 2, "n_test": 2,
            "n_patients": 3, "hu_mode": hu_mode
        },
        "mae": {
            "input_size": 16, "token_patch": 4,
            "encoder_dim": 16, "encoder_depth": 1, "encoder_heads": 2,
            "decoder_dim": 8, "decoder_depth": 1, "decoder_heads": 2,
            "batch_size": 2
        },
        "mae_steps": 2,
        "mrm": { "iterations": 1 },
        "model": {
            "depth": 2, "base_channels": 2, "input_size": 16,
            "rcu_patch_sizes": [2, 4]
        },
        "train": { "max_epochs": 1, "batch_size": 4 },
        "paths": { "out": out_root }
    })
}

#[test]
fn usage_and_help_follow_the_exit_code_contract() {
    let dir = tempfile::tempdir().unwrap();
    let no_args = grcsf(dir.path(), &[]);
    assert_code(&no_args, 1, "no arguments");
    assert!(String::from_utf8_lossy(&no_args.stderr).contains("Usage"));

    assert_code(&grcsf(dir.path(), &["no-such-command"]), 1, "unknown subcommand");
    assert_code(&grcsf(dir.path(), &["eval", "--no-such-flag"]), 1, "unknown flag");

    let help = grcsf(dir.path(), &["--help"]);
    assert_code(&help, 0, "--help");
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in ["synth-data", "train-mae", "gen-mrm", "train", "eval", "eval-calcium", "ablate", "plot"] {
        assert!(text.contains(sub), "help is missing {sub}");
    }
    assert_code(&grcsf(dir.path(), &["--version"]), 0, "--version");
}

#[test]
fn pipeline_stages_run_and_reruns_from_snapshots_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, micro_config("out", true).to_string()).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    let out = dir.path().join("out");

    assert_code(&grcsf(dir.path(), &["synth-data", "--config", cfg]), 0, "synth-data");
    assert!(out.join("data/manifest.json").exists());
    assert!(out.join("data/config.json").exists());

    assert_code(&grcsf(dir.path(), &["train-mae", "--config", cfg]), 0, "train-mae");
    assert!(out.join("mae.json").exists());
    assert!(out.join("mae.history.jsonl").exists());
    assert!(out.join("mae.config.json").exists());

    assert_code(&grcsf(dir.path(), &["gen-mrm", "--config", cfg]), 0, "gen-mrm");
    assert!(out.join("mrm/mrm.json").exists());
    assert!(out.join("mrm/config.json").exists());

    let train = grcsf(dir.path(), &["train", "--config", cfg]);
    assert_code(&train, 0, "train");
    assert!(String::from_utf8_lossy(&train.stdout).contains("parameters"));
    assert!(out.join("model.json").exists());
    assert!(out.join("model.history.jsonl").exists());

    assert_code(&grcsf(dir.path(), &["eval", "--config", cfg]), 0, "eval");
    let metrics_json = std::fs::read(out.join("eval/metrics.json")).unwrap();
    let metrics_csv = std::fs::read(out.join("eval/metrics.csv")).unwrap();
    assert!(String::from_utf8_lossy(&metrics_csv).starts_with("patient_id,"));

    // replay straight from the emitted snapshot: reports must not change
    let snapshot = out.join("eval/config.json");
    assert_code(
        &grcsf(dir.path(), &["eval", "--config", snapshot.to_str().unwrap()]),
        0,
        "eval from snapshot",
    );
    assert_eq!(std::fs::read(out.join("eval/metrics.json")).unwrap(), metrics_json);
    assert_eq!(std::fs::read(out.join("eval/metrics.csv")).unwrap(), metrics_csv);

    assert_code(&grcsf(dir.path(), &["eval-calcium", "--config", cfg]), 0, "eval-calcium");
    let calcium = std::fs::read_to_string(out.join("calcium/calcium.csv")).unwrap();
    assert!(calcium.starts_with("patient_id,"));
    assert!(calcium.lines().count() >= 2, "no patient rows:\n{calcium}");
    assert!(out.join("calcium/calcium.json").exists());
}

#[test]
fn train_insists_on_residual_maps_only_when_the_rcu_is_on() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, micro_config("out", false).to_string()).unwrap();
    let cfg = cfg_path.to_str().unwrap();

    assert_code(&grcsf(dir.path(), &["synth-data", "--config", cfg]), 0, "synth-data");
    // no gen-mrm ran: training with the RCU enabled cannot find the set
    let missing = grcsf(dir.path(), &["train", "--config", cfg]);
    assert_code(&missing, 2, "train without residual maps");

    // with the RCU disabled the same tree trains fine
    let plain = grcsf(
        dir.path(),
        &["train", "--config", cfg, "--set", "model.enable_rcu=false", "--set", "model.enable_gcu=false"],
    );
    assert_code(&plain, 0, "train without rcu");
}

#[test]
fn ablate_emits_reports_and_figures_and_replays_from_its_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = micro_config("out", false);
    cfg["ablation"] = serde_json::json!({
        "plan": { "variants": [ { "name": "grcsf" } ], "seeds": [1] },
        "synth": cfg["synth"].clone(),
        "mae": cfg["mae"].clone(),
        "mae_steps": 2,
        "mrm": { "iterations": 1 },
        "model": cfg["model"].clone(),
        "train": cfg["train"].clone()
    });
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();

    let run = grcsf(dir.path(), &["ablate", "--config", cfg_path.to_str().unwrap()]);
    assert_code(&run, 0, "ablate");
    assert!(String::from_utf8_lossy(&run.stdout).contains("grcsf"));

    let run_dirs = |n: usize| {
        let mut dirs: Vec<_> = std::fs::read_dir(dir.path().join("out"))
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().starts_with("ablate-"))
            .map(|e| e.path())
            .collect();
        dirs.sort();
        assert_eq!(dirs.len(), n, "expected {n} run dirs");
        dirs
    };
    let first = run_dirs(1)[0].clone();
    for name in ["results.json", "results.csv", "runs.csv", "config.json", "dice.svg", "iou.svg"] {
        assert!(first.join(name).exists(), "missing {name}");
    }
    let results_json = std::fs::read(first.join("results.json")).unwrap();
    let results_csv = std::fs::read(first.join("results.csv")).unwrap();

    // a second run driven by the emitted snapshot reproduces the reports
    std::thread::sleep(std::time::Duration::from_millis(1100));
    let snapshot = first.join("config.json");
    assert_code(
        &grcsf(dir.path(), &["ablate", "--config", snapshot.to_str().unwrap()]),
        0,
        "ablate from snapshot",
    );
    let dirs = run_dirs(2);
    let second = dirs.iter().find(|d| **d != first).unwrap();
    assert_eq!(std::fs::read(second.join("results.json")).unwrap(), results_json);
    assert_eq!(std::fs::read(second.join("results.csv")).unwrap(), results_csv);

    // plot re-renders charts from the saved results
    let results_path = first.join("results.json");
    std::fs::remove_file(first.join("dice.svg")).unwrap();
    let plot = grcsf(
        dir.path(),
        &["plot", "--set", &format!("paths.results={}", results_path.display())],
    );
    assert_code(&plot, 0, "plot");
    assert!(first.join("dice.svg").exists());
    assert!(first.join("plot.config.json").exists());
}

#[test]
fn failures_map_to_the_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // missing config file: I/O
    assert_code(&grcsf(dir.path(), &["eval", "--config", "absent.json"]), 2, "missing config");
    // malformed config: validation
    std::fs::write(dir.path().join("bad.json"), "{ not json").unwrap();
    assert_code(&grcsf(dir.path(), &["eval", "--config", "bad.json"]), 1, "malformed config");
    // unknown key: validation
    std::fs::write(dir.path().join("unknown.json"), r#"{"train":{"max_epoch":3}}"#).unwrap();
    assert_code(&grcsf(dir.path(), &["eval", "--config", "unknown.json"]), 1, "unknown key");
    // structurally valid config, but the dataset was never generated: I/O
    assert_code(&grcsf(dir.path(), &["train-mae"]), 2, "missing dataset");
    // invalid section value: validation
    assert_code(
        &grcsf(dir.path(), &["synth-data", "--set", "synth.lesion_fraction=1.5"]),
        1,
        "bad lesion fraction",
    );
    // bad worker count: validation
    assert_code(&grcsf(dir.path(), &["eval", "--workers", "0"]), 1, "zero workers");

    // plot without a results path, then on a results set with no survivors
    assert_code(&grcsf(dir.path(), &["plot"]), 1, "plot without results");
    let empty = serde_json::json!({
        "seeds": [1],
        "variants": [{
            "name": "bad", "config_diff": [], "parameter_count": null,
            "runs": [], "mean": null, "error": "boom"
        }]
    });
    std::fs::write(dir.path().join("results.json"), empty.to_string()).unwrap();
    assert_code(
        &grcsf(dir.path(), &["plot", "--set", "paths.results=results.json"]),
        1,
        "plot with no successful variants",
    );
}

#[test]
fn grcsf_out_environment_variable_overrides_the_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("c.json");
    std::fs::write(&cfg_path, micro_config("configured", false).to_string()).unwrap();

    let out = Command::new(env!("CARGO_BIN_EXE_grcsf"))
        .args(["synth-data", "--config", cfg_path.to_str().unwrap()])
        .current_dir(dir.path())
        .env("GRCSF_OUT", "from-env")
        .output()
        .unwrap();
    assert_code(&out, 0, "synth-data with GRCSF_OUT");
    assert!(dir.path().join("from-env/data/manifest.json").exists());
    assert!(!dir.path().join("configured").exists());

    // the snapshot records the resolved root
    let snap: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("from-env/data/config.json")).unwrap())
            .unwrap();
    assert_eq!(snap["paths"]["out"], "from-env");
}

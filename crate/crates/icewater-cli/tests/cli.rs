//! CLI contract tests: exit codes, precondition checks, the lock file, and
//! the mixed-configuration report guard.

use std::path::Path;
use std::process::Command;

fn icewater() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_icewater"));
    cmd.env_remove("ICEWATER_DATA_ROOT");
    cmd
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap_or(-1)
}

fn stderr_of(cmd: &mut Command) -> String {
    String::from_utf8_lossy(&cmd.output().unwrap().stderr).into_owned()
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn make_fixture(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let data = dir.join("data");
    let prep = dir.join("prep");
    assert_eq!(
        code(icewater().args([
            "fixture",
            "--out",
            &s(&data),
            "--scenes",
            "3",
            "--size",
            "128",
            "--seed",
            "3"
        ])),
        0
    );
    assert_eq!(
        code(icewater().args([
            "prepare",
            "--data",
            &s(&data),
            "--config",
            &s(&data.join("config.toml")),
            "--out",
            &s(&prep),
            "--seed",
            "3"
        ])),
        0
    );
    (data, prep)
}

#[test]
fn usage_errors_exit_one() {
    // Unknown flag.
    assert_eq!(code(icewater().args(["train", "--bogus"])), 1);
    // Unknown subcommand.
    assert_eq!(code(icewater().args(["segment"])), 1);
    // Missing required --out.
    assert_eq!(code(icewater().args(["fixture"])), 1);
    // Bad --init value.
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(icewater().args([
            "train",
            "--prepared",
            &s(dir.path()),
            "--out",
            &s(&dir.path().join("o")),
            "--init",
            "imagenet"
        ])),
        2, // prepared dir missing is hit first: data error
    );
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(icewater().arg("--help")), 0);
    assert_eq!(code(icewater().arg("--version")), 0);
}

#[test]
fn prepare_without_data_root_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = icewater();
    cmd.args(["prepare", "--out", &s(&dir.path().join("prep"))]);
    assert_eq!(code(&mut cmd), 1);
}

#[test]
fn prepare_on_missing_catalog_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(icewater().args([
            "prepare",
            "--data",
            &s(dir.path()),
            "--out",
            &s(&dir.path().join("prep"))
        ])),
        2
    );
}

#[test]
fn missing_pretrained_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let (_data, prep) = make_fixture(dir.path());
    let out = dir.path().join("train");
    // No --pretrained at all.
    let mut cmd = icewater();
    cmd.args([
        "train",
        "--prepared",
        &s(&prep),
        "--out",
        &s(&out),
        "--init",
        "pretrained",
    ]);
    assert_eq!(code(&mut cmd), 1);
    // Nonexistent file.
    let mut cmd = icewater();
    cmd.args([
        "train",
        "--prepared",
        &s(&prep),
        "--out",
        &s(&out),
        "--init",
        "pretrained",
        "--pretrained",
        &s(&dir.path().join("nope.safetensors")),
    ]);
    let err = stderr_of(&mut cmd);
    assert!(err.contains("does not exist"), "{err}");
    // Failed before any training: no runs directory was created.
    assert!(!out.join("runs").exists());
}

#[test]
fn invalid_init_value_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_data, prep) = make_fixture(dir.path());
    assert_eq!(
        code(icewater().args([
            "train",
            "--prepared",
            &s(&prep),
            "--out",
            &s(&dir.path().join("t")),
            "--init",
            "imagenet"
        ])),
        1
    );
}

#[test]
fn train_out_dir_lock_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let (_data, prep) = make_fixture(dir.path());
    let out = dir.path().join("train");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".icewater.lock"), b"").unwrap();
    let mut cmd = icewater();
    cmd.args([
        "train",
        "--prepared",
        &s(&prep),
        "--out",
        &s(&out),
        "--init",
        "random",
        "--max-epochs",
        "1",
    ]);
    assert_eq!(code(&mut cmd), 1);
    let err = stderr_of(&mut cmd);
    assert!(err.contains("locked"), "{err}");
}

#[test]
fn both_strategies_and_mixed_config_report_guard() {
    let dir = tempfile::tempdir().unwrap();
    let (data, prep) = make_fixture(dir.path());
    // Synthetic pretrained weights matching the fixture config's model spec.
    let weights = data.join("pretrained_encoder.safetensors");
    {
        let cfg_text = std::fs::read_to_string(data.join("config.toml")).unwrap();
        let cfg: toml_value::Spec = toml_value::parse(&cfg_text);
        icewater::fixture::write_synthetic_pretrained(&weights, &cfg.model, 9).unwrap();
    }
    let train_a = dir.path().join("train_a");
    let mut cmd = icewater();
    cmd.args([
        "train",
        "--prepared",
        &s(&prep),
        "--out",
        &s(&train_a),
        "--init",
        "both",
        "--runs",
        "1",
        "--max-epochs",
        "1",
        "--pretrained",
        &s(&weights),
        "--seed",
        "3",
        "--deterministic",
    ]);
    assert_eq!(code(&mut cmd), 0, "{}", stderr_of(&mut cmd));
    // Two strategies x one run: both run dirs exist.
    assert!(train_a.join("runs/random-run0/model.safetensors").is_file());
    assert!(train_a
        .join("runs/pretrained-run0/model.safetensors")
        .is_file());

    // Second training with a different batch size (different experiment).
    let cfg_b = dir.path().join("config_b.toml");
    let mut text = std::fs::read_to_string(data.join("config.toml")).unwrap();
    text = text.replace("batch_size = 4", "batch_size = 2");
    std::fs::write(&cfg_b, text).unwrap();
    let train_b = dir.path().join("train_b");
    assert_eq!(
        code(icewater().args([
            "train",
            "--prepared",
            &s(&prep),
            "--out",
            &s(&train_b),
            "--init",
            "random",
            "--runs",
            "1",
            "--max-epochs",
            "1",
            "--config",
            &s(&cfg_b),
            "--seed",
            "4",
            "--deterministic",
        ])),
        0
    );

    let eval_a = dir.path().join("eval_a");
    let eval_b = dir.path().join("eval_b");
    for (train, eval) in [(&train_a, &eval_a), (&train_b, &eval_b)] {
        assert_eq!(
            code(icewater().args([
                "evaluate",
                "--experiment",
                &s(train),
                "--prepared",
                &s(&prep),
                "--out",
                &s(eval),
                "--deterministic",
            ])),
            0
        );
    }
    // Same-config evaluations report fine.
    assert_eq!(
        code(icewater().args([
            "report",
            "--evaluation",
            &s(&eval_a),
            "--out",
            &s(&dir.path().join("report_ok"))
        ])),
        0
    );
    // Mixed configs for the same strategy are rejected as a usage error.
    let mut cmd = icewater();
    cmd.args([
        "report",
        "--evaluation",
        &s(&eval_a),
        "--evaluation",
        &s(&eval_b),
        "--out",
        &s(&dir.path().join("report_mixed")),
    ]);
    assert_eq!(code(&mut cmd), 1);
    let err = stderr_of(&mut cmd);
    assert!(err.contains("mixed configurations"), "{err}");
}

#[test]
fn evaluate_without_runs_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_data, prep) = make_fixture(dir.path());
    assert_eq!(
        code(icewater().args([
            "evaluate",
            "--prepared",
            &s(&prep),
            "--out",
            &s(&dir.path().join("e"))
        ])),
        1
    );
}

/// Minimal TOML view of the fixture config: just the model table, parsed via
/// the library types.
mod toml_value {
    use serde::Deserialize;

    #[derive(Deserialize)]
    pub struct Spec {
        pub model: icewater::model::ModelSpec,
    }

    pub fn parse(text: &str) -> Spec {
        toml::from_str(text).unwrap()
    }
}

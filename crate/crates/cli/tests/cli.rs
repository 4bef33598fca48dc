use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_structlora"));
    c.env_remove("STRUCTLORA_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const MINIMAL: &str = r#"
variant = "structlora"
L = 3
d = 4
k = 4
r = 2
steps = 20
n_train = 32
n_test = 16
batch_size = 8
"#;

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.display().to_string()
}

#[test]
fn run_writes_results_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let out = dir.path().join("out");
    let o = run(&["run", "-c", &cfg, "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("run_structlora_seed0.json").exists());
    assert!(out.join("checkpoint_structlora_seed0.json").exists());
    let csv = std::fs::read_to_string(out.join("metrics_structlora_seed0.csv")).unwrap();
    assert_eq!(
        csv.lines().next(),
        Some("step,variant,seed,task_loss,energy,cos_adj")
    );
    assert_eq!(csv.lines().count(), 1 + 3);
}

#[test]
fn json_config_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"variant": "lora", "L": 3, "d": 4, "k": 4, "r": 2, "steps": 5, "n_train": 16, "n_test": 8, "batch_size": 8}"#,
    );
    let o = run(&["run", "-c", &cfg, "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("run_lora_seed0.json").exists());
}

fn traces(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("wall_time_secs");
    v
}

#[test]
fn seed_override_equals_edited_file() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let base = write_config(dir.path(), "base.toml", MINIMAL);
    let edited = write_config(dir.path(), "edited.toml", &format!("{MINIMAL}seed = 7\n"));
    assert_eq!(
        run(&[
            "run",
            "-c",
            &base,
            "-o",
            a.to_str().unwrap(),
            "--set",
            "seed=7"
        ])
        .status
        .code(),
        Some(0)
    );
    assert_eq!(
        run(&["run", "-c", &edited, "-o", b.to_str().unwrap()])
            .status
            .code(),
        Some(0)
    );
    let name = "run_structlora_seed7.json";
    assert_eq!(traces(&a.join(name)), traces(&b.join(name)));
}

#[test]
fn seed_environment_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let o = bin()
        .args(["run", "-c", &cfg, "-o", dir.path().to_str().unwrap()])
        .env("STRUCTLORA_SEED", "11")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("run_structlora_seed11.json").exists());
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{MINIMAL}learning_rate = 0.1\n"),
    );
    let o = run(&["run", "-c", &cfg, "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("learning_rate"), "{err}");
    assert!(err.contains("line"), "{err}");

    let cfg = write_config(dir.path(), "ok.toml", MINIMAL);
    let o = run(&["run", "-c", &cfg, "--set", "bogus=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
}

#[test]
fn invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.toml",
        &format!("{MINIMAL}variant = \"lora\"\nd = 0\n"),
    );
    assert_eq!(run(&["run", "-c", &cfg]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let o = run(&[
        "run",
        "-c",
        &cfg,
        "-o",
        dir.path().to_str().unwrap(),
        "--set",
        "eta_lr=1e6",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"));
}

#[test]
fn audit_suites_pass() {
    for suite in ["theorem", "merge", "oversmooth", "ib", "gradcheck"] {
        let o = run(&["audit", suite]);
        let stdout = String::from_utf8_lossy(&o.stdout);
        assert_eq!(o.status.code(), Some(0), "{suite}: {stdout}");
        assert!(
            stdout.contains("PASS") && !stdout.contains("FAIL"),
            "{stdout}"
        );
    }
}

#[test]
fn unknown_audit_suite_exits_2() {
    assert_eq!(run(&["audit", "nope"]).status.code(), Some(2));
}

#[test]
fn sweep_rows_and_empty_values() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let out = dir.path().join("sweep");
    let o = run(&[
        "sweep",
        "-c",
        &cfg,
        "--axis",
        "r",
        "--values",
        "1,2,3",
        "--seeds",
        "0,1",
        "-o",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);

    let o = run(&["sweep", "-c", &cfg, "--axis", "r", "--values", ""]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["sweep", "-c", &cfg, "--axis", "not_a_key", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_is_idempotent_with_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", MINIMAL);
    let out = dir.path().join("runs");
    let o_str = out.to_str().unwrap();
    assert_eq!(
        run(&["run", "-c", &cfg, "-o", o_str]).status.code(),
        Some(0)
    );
    assert_eq!(run(&["report", o_str]).status.code(), Some(0));
    let single = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert_eq!(single.lines().count(), 2);

    for v in ["lora", "lora_cos", "lora_lap"] {
        let set = format!("variant={v}");
        assert_eq!(
            run(&["run", "-c", &cfg, "-o", o_str, "--set", &set])
                .status
                .code(),
            Some(0)
        );
    }
    assert_eq!(run(&["report", o_str]).status.code(), Some(0));
    let first = std::fs::read(out.join("report.txt")).unwrap();
    let first_csv = std::fs::read(out.join("report.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 5);
    assert_eq!(run(&["report", o_str]).status.code(), Some(0));
    assert_eq!(std::fs::read(out.join("report.txt")).unwrap(), first);
    assert_eq!(std::fs::read(out.join("report.csv")).unwrap(), first_csv);
}

#[test]
fn report_without_results_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&["report", dir.path().to_str().unwrap()]).status.code(),
        Some(2)
    );
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncflow::experiment::{read_manifest, run_sweep, ExperimentConfig, RunStatus, SweepSpec};

fn example(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("examples").join(name)
}

fn ncflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncflow"))
        .args(args)
        .env_remove("NCFLOW_OUT")
        .env("NCFLOW_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const ANTIPODAL_BODY: &str = r#"
name = "t"
seed = 3
loss = "logistic"

[dataset]
source = "inline"
points = [[1.0, 0.5], [-1.0, -0.5]]
labels = [0, 1]
num_classes = 2

[init]
scheme = "random_balanced"
width = 2
max_resamples = 50

[flow]
step_mode = { kind = "loss_adaptive", base = 0.5, cap = 1000.0 }
max_steps = 100000
log_every = 1

[flow.stop]
loss_threshold = 1e-6
"#;

#[test]
fn bundled_antipodal_example_passes_and_verifies() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = ncflow(&[
        "run",
        "--config",
        s(&example("binary_antipodal.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.status, RunStatus::Passed);
    for f in [
        "manifest.json",
        "diagnostics.csv",
        "neurons.csv",
        "dataset.csv",
        "final.ckpt",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("checkpoints").read_dir().unwrap().count() >= 2);
    let v = ncflow(&["verify", s(&out)]);
    assert_eq!(code(&v), 0, "{}", String::from_utf8_lossy(&v.stdout));
}

#[test]
fn reruns_write_identical_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = example("binary_collapse.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&ncflow(&["run", "--config", s(&cfg), "--out", s(&a)])), 0);
    assert_eq!(code(&ncflow(&["run", "--config", s(&cfg), "--out", s(&b)])), 0);
    for f in ["diagnostics.csv", "dataset.csv", "final.ckpt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn corrupted_checkpoint_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(
        code(&ncflow(&[
            "run",
            "--config",
            s(&example("binary_antipodal.toml")),
            "--out",
            s(&out)
        ])),
        0
    );
    let ckpt = out.join("final.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&ckpt, bytes).unwrap();
    let v = ncflow(&["verify", s(&out)]);
    assert_eq!(code(&v), 3);
    assert!(String::from_utf8_lossy(&v.stderr).contains("checksum"));
}

#[test]
fn tightened_tolerances_fail_per_residual() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(
        code(&ncflow(&[
            "run",
            "--config",
            s(&example("binary_antipodal.toml")),
            "--out",
            s(&out)
        ])),
        0
    );
    let tight = write_config(
        tmp.path(),
        "tight.toml",
        "[verify]\nduality_tol = 1e-12\nrank1_tol = 0.5\n",
    );
    let v = ncflow(&["verify", s(&out), "--config", s(&tight)]);
    assert_eq!(code(&v), 5);
    let text = String::from_utf8_lossy(&v.stdout);
    assert!(text.contains("[FAIL] duality_residual"), "{text}");
    assert!(text.contains("[pass] rank1_residual"), "{text}");
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let o = ncflow(&[
        "run",
        "--config",
        s(&example("binary_antipodal.toml")),
        "--out",
        s(&out),
        "--dry-run",
    ]);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("\"out_dir\""));
    assert!(!out.exists());
    let o = ncflow(&[
        "sweep",
        "--config",
        s(&example("nondegeneracy_sweep.toml")),
        "--out",
        s(&out),
        "--dry-run",
    ]);
    assert_eq!(code(&o), 0);
    assert!(!out.exists());
}

#[test]
fn config_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let ce_binary = ANTIPODAL_BODY.replace("loss = \"logistic\"", "loss = \"cross_entropy\"");
    let p = write_config(tmp.path(), "ce.toml", &ce_binary);
    let out = tmp.path().join("ce");
    let o = ncflow(&["run", "--config", s(&p), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.status, RunStatus::ConfigError);
    assert!(m.reason.unwrap().contains("cross_entropy"));

    let p = write_config(
        tmp.path(),
        "typo.toml",
        &format!("{ANTIPODAL_BODY}\n[verify]\nrank_tol = 0.1\n"),
    );
    assert_eq!(code(&ncflow(&["run", "--config", s(&p), "--dry-run"])), 2);
    assert_eq!(
        code(&ncflow(&["run", "--config", s(&tmp.path().join("missing.toml"))])),
        2
    );
}

#[test]
fn data_errors_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let body = ANTIPODAL_BODY.replace(
        "points = [[1.0, 0.5], [-1.0, -0.5]]",
        "points = [[1.0, 0.5], [0.0, 0.0]]",
    );
    let p = write_config(tmp.path(), "zero.toml", &body);
    let out = tmp.path().join("zero");
    assert_eq!(code(&ncflow(&["run", "--config", s(&p), "--out", s(&out)])), 3);
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.status, RunStatus::DataError);
    assert!(m.reason.is_some());
}

#[test]
fn divergence_exits_with_code_four() {
    let tmp = tempfile::tempdir().unwrap();
    let body = ANTIPODAL_BODY
        .replace("[[1.0, 0.5], [-1.0, -0.5]]", "[[1.0, 0.5], [1.0, 0.6]]")
        .replace(
            "{ kind = \"loss_adaptive\", base = 0.5, cap = 1000.0 }",
            "{ kind = \"fixed\", eta = 1e200 }",
        )
        .replace("\"logistic\"", "\"exponential\"");
    let p = write_config(tmp.path(), "diverge.toml", &body);
    let out = tmp.path().join("diverge");
    let o = ncflow(&["run", "--config", s(&p), "--out", s(&out)]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(read_manifest(&out).unwrap().status, RunStatus::FlowError);
    assert!(out.join("diagnostics.csv").is_file());
}

#[test]
fn failed_checks_exit_with_code_five() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{ANTIPODAL_BODY}\n[verify]\nmax_final_loss = 1e-300\n");
    let p = write_config(tmp.path(), "strict.toml", &body);
    let out = tmp.path().join("strict");
    assert_eq!(code(&ncflow(&["run", "--config", s(&p), "--out", s(&out)])), 5);
    let m = read_manifest(&out).unwrap();
    assert_eq!(m.status, RunStatus::VerificationFailed);
    assert!(m.checks.iter().any(|c| c.name == "final_loss" && !c.passed));
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_config(tmp.path(), "env.toml", ANTIPODAL_BODY);
    let o = Command::new(env!("CARGO_BIN_EXE_ncflow"))
        .args(["run", "--config", s(&p)])
        .env("NCFLOW_OUT", tmp.path().join("root"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(tmp.path().join("root/t/manifest.json").is_file());
}

#[test]
fn empty_grid_gives_a_header_only_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = write_config(tmp.path(), "grid.toml", "[sweep]\nseed = []\n");
    let out = tmp.path().join("sweep");
    let o = ncflow(&[
        "sweep",
        "--config",
        s(&example("nondegeneracy_sweep.toml")),
        "--grid",
        s(&grid),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn sweep_records_every_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let grid = write_config(
        tmp.path(),
        "grid.toml",
        "[sweep]\nseed = [0, 1, 2, 3, 4]\ninit_only = true\n",
    );
    let out = tmp.path().join("sweep");
    let o = ncflow(&[
        "sweep",
        "--config",
        s(&example("nondegeneracy_sweep.toml")),
        "--grid",
        s(&grid),
        "--out",
        s(&out),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(fs::read_to_string(out.join("aggregate.csv"))
        .unwrap()
        .contains("check.init_assumption"));
}

#[test]
fn smaller_epsilon_widens_the_small_norm_margin() {
    let cfg = ExperimentConfig::load(&example("alignment_envelope.toml")).unwrap();
    let spec = SweepSpec {
        epsilon: Some(vec![1e-3, 1e-4, 1e-5]),
        ..Default::default()
    };
    let summary = run_sweep(&cfg, &spec, None, 0).unwrap();
    let margins: Vec<f64> = summary.cells.iter().map(|c| c.metrics["small_norm_w_margin"]).collect();
    assert!(margins.windows(2).all(|p| p[1] > p[0]), "{margins:?}");
    let outputs: Vec<f64> = summary
        .cells
        .iter()
        .map(|c| c.metrics["small_norm_output_margin"])
        .collect();
    assert!(outputs.windows(2).all(|p| p[1] > p[0]), "{outputs:?}");
}

#[test]
fn dataset_generate_then_inspect() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("gen");
    let o = ncflow(&[
        "dataset",
        "generate",
        "--config",
        s(&example("generator.toml")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let o = ncflow(&["dataset", "inspect", s(&out.join("dataset.json"))]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["certificate"]["satisfies_strict_condition"], true);
    let o = ncflow(&["dataset", "inspect", s(&out.join("dataset.csv")), "--classes", "3"]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        code(&ncflow(&["dataset", "inspect", s(&tmp.path().join("nope.csv"))])),
        3
    );
}

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use hjm_hypo::{run, Command, RunOptions};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

/// Relative path -> bytes for every file below `root`.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn report(dir: &Path, name: &str) -> serde_json::Value {
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(name)).unwrap()).unwrap();
    v["report"].clone()
}

fn assert_same_across_workers(command: Command, cfg: &str, paths: usize) {
    let tmp = tempfile::tempdir().unwrap();
    let mut snaps = Vec::new();
    for threads in [1, 2, 8] {
        let out = tmp.path().join(format!("w{threads}"));
        let opts = RunOptions {
            seed: Some(42),
            paths: Some(paths),
            threads: Some(threads),
        };
        let outcome = run(command, &config(cfg), &out, opts).unwrap();
        assert_eq!(outcome.threads, threads);
        let mut snap = snapshot(&out);
        assert!(snap.remove(Path::new("meta.json")).is_some());
        assert!(!snap.is_empty());
        snaps.push(snap);
    }
    assert_eq!(snaps[0], snaps[1], "{command:?}: 1 vs 2 workers");
    assert_eq!(snaps[0], snaps[2], "{command:?}: 1 vs 8 workers");
}

#[test]
fn covariance_identical_at_any_worker_count() {
    assert_same_across_workers(Command::Covariance, "scalar_gate.json", 64);
}

#[test]
fn simulate_identical_at_any_worker_count() {
    assert_same_across_workers(Command::Simulate, "hjm_generic.json", 24);
}

#[test]
fn flowcheck_identical_at_any_worker_count() {
    assert_same_across_workers(Command::Flowcheck, "scalar_gate.json", 1);
}

#[test]
fn seed_changes_results() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    run(
        Command::Simulate,
        &config("scalar_gate.json"),
        &a,
        RunOptions {
            seed: Some(1),
            paths: Some(8),
            threads: Some(1),
        },
    )
    .unwrap();
    run(
        Command::Simulate,
        &config("scalar_gate.json"),
        &b,
        RunOptions {
            seed: Some(2),
            paths: Some(8),
            threads: Some(1),
        },
    )
    .unwrap();
    assert_ne!(
        fs::read(a.join("terminal.csv")).unwrap(),
        fs::read(b.join("terminal.csv")).unwrap()
    );
}

#[test]
fn expdecay_hormander_is_finite_dimensional() {
    let tmp = tempfile::tempdir().unwrap();
    run(
        Command::Hormander,
        &config("expdecay_vasicek.json"),
        tmp.path(),
        RunOptions::default(),
    )
    .unwrap();
    let r = report(tmp.path(), "rank.json");
    assert_eq!(r["verdict"], serde_json::json!({ "FiniteDimensional": 1 }));
    assert!(fs::read_to_string(tmp.path().join("basis.csv"))
        .unwrap()
        .starts_with("# hjm-hypo"));
}

#[test]
fn additive_bump_covariance_is_density_plausible() {
    let tmp = tempfile::tempdir().unwrap();
    let outcome = run(
        Command::Covariance,
        &config("additive_bump.json"),
        tmp.path(),
        RunOptions::default(),
    )
    .unwrap();
    let r = report(tmp.path(), "verdict.json");
    assert_eq!(r["verdict"], "DensityPlausible", "{}", outcome.headline);
    assert_eq!(r["n_paths"], 10_000);
}

#[test]
fn meta_records_config_digest_and_version() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("hjm_generic.json");
    run(
        Command::Longrate,
        &cfg,
        tmp.path(),
        RunOptions {
            paths: Some(4),
            ..Default::default()
        },
    )
    .unwrap();
    let meta: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("meta.json")).unwrap()).unwrap();
    assert_eq!(
        meta["input_sha256"],
        hjm_hypo::config::sha256_hex(&fs::read(&cfg).unwrap())
    );
    assert_eq!(meta["version"], hjm_hypo::core::VERSION);
    assert_eq!(meta["config"]["experiment"]["paths"], 4);
    assert!(meta["timestamp_unix"].as_u64().unwrap() > 0);
    let files: Vec<&str> = meta["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f.as_str().unwrap())
        .collect();
    assert!(files.contains(&"longrate.json") && files.contains(&"deviations.csv"));
    let lr = report(tmp.path(), "longrate.json");
    assert!(lr["max_deviation"].as_f64().unwrap() <= 1e-10);
}

fn bin() -> Proc {
    Proc::new(env!("CARGO_BIN_EXE_hjm-hypo"))
}

#[test]
fn missing_grid_exits_nonzero_naming_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_slice(&fs::read(config("expdecay_vasicek.json")).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("grid");
    let path = tmp.path().join("bad.json");
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
    let out = bin()
        .args([
            "hormander",
            "--config",
            path.to_str().unwrap(),
            "--out",
            tmp.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing field `grid`"), "{err}");
}

#[test]
fn unknown_subcommand_is_config_error() {
    let out = bin()
        .args(["sample", "--config", "x.json", "--out", "o"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unwritable_output_is_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = bin()
        .args([
            "hormander",
            "--config",
            config("expdecay_vasicek.json").to_str().unwrap(),
            "--out",
            blocker.join("sub").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn step_cap_is_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_slice(&fs::read(config("additive_bump.json")).unwrap()).unwrap();
    v["experiment"]["max_steps"] = 5.into();
    let path = tmp.path().join("capped.json");
    fs::write(&path, v.to_string()).unwrap();
    let err = run(
        Command::Covariance,
        &path,
        &tmp.path().join("o"),
        RunOptions::default(),
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn overflow_is_numerical_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_slice(&fs::read(config("additive_bump.json")).unwrap()).unwrap();
    v["sim"]["initial"] = serde_json::json!({ "shape": "constant", "level": f64::MAX });
    v["model"]["fields"][0]["h"] = serde_json::json!({ "shape": "constant", "level": f64::MAX });
    let path = tmp.path().join("overflow.json");
    fs::write(&path, v.to_string()).unwrap();
    let err = run(
        Command::Simulate,
        &path,
        &tmp.path().join("o"),
        RunOptions {
            paths: Some(2),
            ..Default::default()
        },
    )
    .unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

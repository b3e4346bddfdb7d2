use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SHORT: &str = "[steer]\nN = 40\n\n[montecarlo]\nsamples = 500\nseed = 3\ntrajectories = 5\n";

fn covsteer(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_covsteer"));
    cmd.args(args).env_remove("COVSTEER_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &TempDir, name: &str, body: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn data_rows(path: &Path) -> usize {
    std::fs::read_to_string(path).unwrap().lines().count() - 1
}

fn steer(config: &Path, out: &Path) -> Output {
    covsteer(&["steer", "--config", s(config), "--out", s(out)], &[])
}

fn validate(config: &Path, out: &Path, extra: &[&str], envs: &[(&str, &str)]) -> Output {
    let policy = out.join("policy.json");
    let mut args = vec![
        "validate",
        "--config",
        s(config),
        "--policy",
        s(&policy),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    covsteer(&args, envs)
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn default_scenario_exports_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "empty.toml", "");
    let out = dir.path().join("out");
    let res = steer(&cfg, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(data_rows(&out.join("beliefs.csv")), 101);
    let header = std::fs::read_to_string(out.join("beliefs.csv")).unwrap();
    assert!(
        header.starts_with("t,mu_1,mu_2,sigma_11,sigma_12,sigma_21,sigma_22\n"),
        "{header:.80}"
    );
    for name in ["policy.json", "ellipses.csv", "sigma_points.csv", "config.toml"] {
        assert!(out.join(name).exists(), "{name} missing");
    }
    let policy: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["stages"].as_array().unwrap().len(), 100);
}

#[test]
fn single_stage_horizon() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "n1.toml", "[steer]\nN = 1\nsigma_f = [[7.0, 0.0], [0.0, 4.5]]\n");
    let out = dir.path().join("out");
    let res = steer(&cfg, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(data_rows(&out.join("beliefs.csv")), 2);
    let policy: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("policy.json")).unwrap()).unwrap();
    assert_eq!(policy["stages"].as_array().unwrap().len(), 1);
}

#[test]
fn unreachable_goal_exits_two_and_names_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "tight.toml",
        "[steer]\nN = 10\nsigma_f = [[0.001, 0.0], [0.0, 0.001]]\n",
    );
    let res = steer(&cfg, &dir.path().join("out"));
    assert_eq!(res.status.code(), Some(2));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("infeasible at stage 0"), "{err}");
}

#[test]
fn soften_flag_relaxes_unreachable_goal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        &dir,
        "tight.toml",
        "[steer]\nN = 10\nsigma_f = [[0.001, 0.0], [0.0, 0.001]]\n",
    );
    let out = dir.path().join("out");
    let res = covsteer(&["steer", "--config", s(&cfg), "--out", s(&out), "--soften"], &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let policy: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("policy.json")).unwrap()).unwrap();
    let slack = policy["stages"][0]["slack"].as_f64().unwrap();
    assert!(slack > 0.0);
}

#[test]
fn bad_configs_exit_one_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown.toml", "[steer]\nhorizon_length = 5\n", "horizon_length"),
        ("syntax.toml", "[steer\nN = 5\n", "steer"),
        (
            "asym.toml",
            "[steer]\nsigma0 = [[1.0, 0.5], [0.0, 1.0]]\n",
            "steer.sigma0",
        ),
        (
            "indef.toml",
            "[steer]\nsigma_f = [[1.0, 0.0], [0.0, -1.0]]\n",
            "steer.sigma_f",
        ),
    ];
    for (name, body, key) in cases {
        let cfg = write_config(&dir, name, body);
        let res = steer(&cfg, &dir.path().join("out"));
        assert_eq!(res.status.code(), Some(1), "{name}");
        let err = String::from_utf8_lossy(&res.stderr);
        assert!(err.contains(key), "{name}: {err}");
    }
    assert_eq!(covsteer(&["steer"], &[]).status.code(), Some(1));
    assert_eq!(covsteer(&["--help"], &[]).status.code(), Some(0));
}

#[test]
fn validate_with_two_samples() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "short.toml", SHORT);
    let out = dir.path().join("out");
    assert!(steer(&cfg, &out).status.success());
    let res = validate(&cfg, &out, &["--samples", "2"], &[]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("mc_report.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 2);
    // Trajectories are capped by the sample count.
    assert_eq!(data_rows(&out.join("trajectories.csv")), 2 * 41);
}

#[test]
fn validate_rejects_policy_of_other_dimension() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "short.toml", SHORT);
    let out = dir.path().join("out");
    assert!(steer(&cfg, &out).status.success());
    let linear = write_config(
        &dir,
        "linear.toml",
        "[system]\nname = \"linear\"\na = [[1.0]]\nb = [[1.0]]\nw = [[0.01]]\n\n\
         [steer]\nN = 3\nmu0 = [0.0]\nsigma0 = [[1.0]]\nmu_f = [2.0]\nsigma_f = [[0.5]]\n",
    );
    let res = validate(&linear, &out, &[], &[]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("dimension"));
}

#[test]
fn outputs_are_reproducible_and_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "short.toml", SHORT);
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for out in [&a, &b] {
        assert!(steer(&cfg, out).status.success());
        assert!(validate(&cfg, out, &["--seed", "11"], &[]).status.success());
    }
    assert_eq!(read_all(&a), read_all(&b));

    // Re-running from the effective configuration reproduces everything.
    let effective = dir.path().join("effective.toml");
    std::fs::copy(a.join("config.toml"), &effective).unwrap();
    assert!(steer(&effective, &c).status.success());
    assert!(validate(&effective, &c, &["--seed", "11"], &[]).status.success());
    assert_eq!(read_all(&a), read_all(&c));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(&dir, "short.toml", SHORT);
    let out = dir.path().join("out");
    assert!(steer(&cfg, &out).status.success());
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let res = validate(&cfg, &out, &[], &[("COVSTEER_THREADS", threads)]);
        assert!(res.status.success());
        reports.push(std::fs::read(out.join("mc_report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

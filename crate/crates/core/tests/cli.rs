use std::path::Path;

use kam_core::cli;

fn run_cli(dir: &Path, cmd: &str, config: &str, out: &str, extra: &[&str]) -> i32 {
    let cfg = dir.join(format!("{out}.toml"));
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join(out);
    let mut args = vec!["kamtorus", cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    cli::main(args)
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn schedule_reports_big_b() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_cli(dir.path(), "schedule", "a = 2\nb = 1\nd = 1\nmu = 1e-3\neps = 1e-3\n", "s", &[]);
    assert_eq!(code, 0);
    let v = json(&dir.path().join("s/schedule.json"));
    assert_eq!(v["params"]["big_b"].as_f64(), Some(13.0));
    assert_eq!(v["schedule"]["m0"].as_u64().map(|m| m > 0), Some(true));
    assert_eq!(v["config_hash"].as_str().map(str::len), Some(64));
}

#[test]
fn integrable_kam_run_has_zero_residual() {
    let dir = tempfile::tempdir().unwrap();
    let code = run_cli(dir.path(), "kam", "perturbation = []\n[engine]\nmain_steps = 1\n", "k", &[]);
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(dir.path().join("k/kam.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["residual"]["max"].as_f64(), Some(0.0));
    let hash = v["config_hash"].as_str().unwrap();
    for csv in ["kam_decay.csv", "kam_embedding.csv"] {
        let body = std::fs::read_to_string(dir.path().join("k").join(csv)).unwrap();
        assert_eq!(body.lines().next(), Some(format!("# config_hash={hash}").as_str()));
    }
    let emb = std::fs::read_to_string(dir.path().join("k/kam_embedding.csv")).unwrap();
    assert_eq!(emb.lines().nth(1), Some("phi_1,t,theta_1,action_1"));
}

#[test]
fn error_families_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_cli(dir.path(), "kam", "i0 = [1.3]\n", "rational", &[]), 10);
    // invalid documents stop before anything is written
    assert_eq!(run_cli(dir.path(), "dio", "a = 1\nb = 1\nfoo = 3\n", "bad", &[]), 2);
    assert!(!dir.path().join("bad").exists());
    let missing = dir.path().join("nope.toml");
    let out = dir.path().join("io");
    assert_eq!(cli::main(["kamtorus", "dio", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]), 3);
    assert_eq!(cli::main(["kamtorus", "frobnicate"]), 2);
}

#[test]
fn seed_override_changes_the_hash_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "eps = 1e-2\nn_samples = 200\n";
    assert_eq!(run_cli(dir.path(), "dio", cfg, "a", &["--seed", "3"]), 0);
    assert_eq!(run_cli(dir.path(), "dio", cfg, "b", &["--seed", "3"]), 0);
    assert_eq!(run_cli(dir.path(), "dio", cfg, "c", &["--seed", "4"]), 0);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("dio.json")).unwrap();
    assert_eq!(read("a"), read("b"));
    let (a, c) = (json(&dir.path().join("a/dio.json")), json(&dir.path().join("c/dio.json")));
    assert_ne!(a["config_hash"], c["config_hash"]);
    assert_eq!(a["curve"][0]["measure"]["seed"].as_u64(), Some(3));
}

#[test]
fn out_dir_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    std::env::set_var(cli::OUT_DIR_ENV, &target);
    let code = cli::main(["kamtorus", "schedule"]);
    std::env::remove_var(cli::OUT_DIR_ENV);
    assert_eq!(code, 0);
    assert!(target.join("schedule.json").exists());
}

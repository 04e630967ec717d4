use std::path::Path;
use std::process::Command;

fn run(args: &[&str], config: &str, dir: &Path) -> (i32, String) {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_convexctrl"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .env("CONVEXCTRL_THREADS", "2")
        .output()
        .unwrap();
    let text =
        String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap(), text)
}

#[test]
fn simulate_succeeds_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = run(
        &["simulate"],
        "[grid]\nsteps = 10\n[ensemble]\nparticles = 4\n",
        dir.path(),
    );
    assert_eq!(code, 0, "{text}");
    for f in ["trajectory.csv", "schedule.json", "summary.json"] {
        assert!(dir.path().join("out").join(f).is_file(), "{f}");
    }
    let csv = std::fs::read_to_string(dir.path().join("out/trajectory.csv")).unwrap();
    assert!(csv.starts_with("# "));
    assert_eq!(csv.lines().nth(1).unwrap(), "t,particle,x0,x1,lam0,lam1");
    assert_eq!(csv.lines().count(), 2 + 11 * 4);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = run(&["simulate"], "[grid]\nsteps = 0\nbogus = 1\n", dir.path());
    assert_eq!(code, 1);
    assert!(text.contains("grid.bogus"), "{text}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unfinished_sweep_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = run(
        &["optimize"],
        "[grid]\nsteps = 50\n[ensemble]\nparticles = 4\n[solver]\nmax_iters = 1\n",
        dir.path(),
    );
    assert_eq!(code, 2, "{text}");
    let report = std::fs::read_to_string(dir.path().join("out/sweep_report.json")).unwrap();
    assert!(report.contains("\"converged\": false"));
}

#[test]
fn bad_thread_count_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_convexctrl"))
        .args(["simulate", "--config"])
        .arg(&cfg)
        .env("CONVEXCTRL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

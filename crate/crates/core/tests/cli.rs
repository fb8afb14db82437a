use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn quadtune(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadtune")).args(args).current_dir(dir).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn version_help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = quadtune(&["--version"], dir.path());
    assert_eq!(v.status.code(), Some(0));
    assert!(stdout(&v).contains(env!("CARGO_PKG_VERSION")));
    let h = quadtune(&["--help"], dir.path());
    assert_eq!(h.status.code(), Some(0));
    assert!(stdout(&h).contains("reconstruct-check"));

    let bad = quadtune(&["simulate", "--frobnicate"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
    let bad = quadtune(&["simulate", "--gains", "sideways"], dir.path());
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn missing_or_invalid_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = quadtune(&["simulate", "--config", "does-not-exist.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("does-not-exist.toml"));

    fs::write(dir.path().join("bad.toml"), "[timing]\ndt_ctrl = 0.004\n").unwrap();
    let o = quadtune(&["simulate", "--config", "bad.toml"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bad.toml"));
}

#[test]
fn simulate_is_reproducible_and_writes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let a = quadtune(&["simulate", "--out", "a.csv"], dir.path());
    assert!(a.status.success(), "{}", stderr(&a));
    assert!(stdout(&a).contains("RMSE"));
    let b = quadtune(&["simulate", "--out", "b.csv"], dir.path());
    assert!(b.status.success());
    let ta = fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(ta, fs::read(dir.path().join("b.csv")).unwrap());
    assert!(ta.starts_with(b"t,x,y,z,phi,theta,psi,"));
    let resolved = fs::read_to_string(dir.path().join("a.config.toml")).unwrap();
    assert!(resolved.contains("[gains.inner]"));

    let c = quadtune(&["compare", "a.csv", "b.csv"], dir.path());
    assert!(c.status.success());
    assert!(stdout(&c).contains("0.0 %"));
}

#[test]
fn exported_policy_round_trip_and_reconstruction() {
    let dir = tempfile::tempdir().unwrap();
    let e = quadtune(&["export-policy", "--init-seed", "4", "--out", "p.json"], dir.path());
    assert!(e.status.success(), "{}", stderr(&e));
    let e = quadtune(&["export-policy", "--policy", "p.json", "--out", "p.bin"], dir.path());
    assert!(e.status.success());
    let e = quadtune(&["export-policy", "--policy", "p.bin", "--out", "q.json"], dir.path());
    assert!(e.status.success());
    assert_eq!(fs::read(dir.path().join("p.json")).unwrap(), fs::read(dir.path().join("q.json")).unwrap());

    for file in ["p.json", "p.bin"] {
        let r = quadtune(&["reconstruct-check", "--policy", file, "--trials", "1000"], dir.path());
        assert!(r.status.success());
        assert!(stdout(&r).contains("max deviation 0e0"), "{}", stdout(&r));
    }

    let s = quadtune(&["simulate", "--gains", "policy", "p.bin", "--out", "p.csv"], dir.path());
    assert!(s.status.success(), "{}", stderr(&s));
    let ev = quadtune(&["evaluate", "--policy", "p.json"], dir.path());
    assert!(ev.status.success());
    assert!(stdout(&ev).contains("Manually tuned") && stdout(&ev).contains("RL fine-tuned"));

    fs::write(dir.path().join("broken.json"), "{\"version\": 1}").unwrap();
    let r = quadtune(&["reconstruct-check", "--policy", "broken.json"], dir.path());
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn short_training_run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("tiny.toml"),
        "[agent]\nhidden = [8, 8]\nbatch_size = 128\n\n[agent.target]\nkind = \"absolute\"\nvalue = 1e9\n",
    )
    .unwrap();
    let o = quadtune(
        &[
            "train",
            "--config",
            "tiny.toml",
            "--seed",
            "3",
            "--episodes",
            "2",
            "--out-policy",
            "t.bin",
            "--curve",
            "c.csv",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let curve = fs::read_to_string(dir.path().join("c.csv")).unwrap();
    assert!(curve.starts_with("episode,train_return"));
    assert_eq!(curve.lines().count(), 3);
    assert!(dir.path().join("t.config.toml").exists());
    let r = quadtune(&["reconstruct-check", "--policy", "t.bin", "--trials", "100"], dir.path());
    assert!(r.status.success());
}

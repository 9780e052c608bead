use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_gramshield"));
    c.env_remove("GRAMSHIELD_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn succeed(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small campus set plus a built index.
fn fixture() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("small.conf");
    std::fs::write(&conf, "count = 40\nmax_len = 5\n").unwrap();
    let data = dir.path().join("data");
    succeed(&["datagen", "--config", s(&conf), "--seed", "5", "--out", s(&data)]);
    let index = dir.path().join("index");
    succeed(&[
        "build",
        "--pois",
        s(&data.join("pois.csv")),
        "--hierarchy",
        s(&data.join("hierarchy.csv")),
        "--config",
        s(&conf),
        "--out",
        s(&index),
    ]);
    (dir, data, index)
}

#[test]
fn missing_inputs_and_bad_arguments_exit_with_usage_code() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    let out = run(&["build", "--pois", s(&missing), "--hierarchy", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
    assert_eq!(run(&["perturb"]).status.code(), Some(2));
    let conf = dir.path().join("bad.conf");
    std::fs::write(&conf, "no_such_key = 1\n").unwrap();
    assert_eq!(run(&["datagen", "--config", s(&conf), "--out", s(dir.path())]).status.code(), Some(2));
}

#[test]
fn pipeline_is_reproducible_end_to_end() {
    let (dir, data, index) = fixture();
    let again = dir.path().join("index2");
    succeed(&[
        "build",
        "--pois",
        s(&data.join("pois.csv")),
        "--hierarchy",
        s(&data.join("hierarchy.csv")),
        "--config",
        s(&dir.path().join("small.conf")),
        "--out",
        s(&again),
    ]);
    assert_eq!(
        std::fs::read(index.join("index.json")).unwrap(),
        std::fs::read(again.join("index.json")).unwrap()
    );

    let real = data.join("trajectories.jsonl");
    let perturb = |name: &str, extra: &[&str]| -> PathBuf {
        let out = dir.path().join(name);
        let mut args = vec!["perturb", "--index", s(&index), "--trajectories", s(&real), "--out", s(&out)];
        args.extend_from_slice(extra);
        succeed(&args);
        out
    };
    let a = perturb("a.jsonl", &["--seed", "9"]);
    let b = perturb("b.jsonl", &["--seed", "9", "--jobs", "2"]);
    let c = perturb("c.jsonl", &["--seed", "10"]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    let from_env = dir.path().join("e.jsonl");
    let out = bin()
        .args(["perturb", "--index", s(&index), "--trajectories", s(&real), "--out", s(&from_env)])
        .env("GRAMSHIELD_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&from_env).unwrap());

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("a.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["mechanism"], "ngram");
    assert_eq!(manifest["input"], manifest["output"]);
    for t in manifest["trajectories"].as_array().unwrap() {
        let len = t["len"].as_u64().unwrap();
        assert_eq!(t["calls"].as_u64().unwrap(), len + 1);
        let eps_prime = t["epsilon_prime"].as_f64().unwrap();
        assert!((eps_prime * (len + 1) as f64 - 5.0).abs() < 1e-12);
    }

    let csv = |p: &Path, name: &str| -> String {
        let path = dir.path().join(name);
        succeed(&["evaluate", "--index", s(&index), "--real", s(&real), "--perturbed", s(p), "--csv", s(&path), "--seed", "1"]);
        std::fs::read_to_string(path).unwrap()
    };
    let same = csv(&real, "same.csv");
    for c in ["s", "t", "c", "d"] {
        assert!(same.contains(&format!("ne_{c},all,0\n")), "{same}");
    }
    assert_eq!(csv(&a, "m1.csv"), csv(&a, "m2.csv"));
}

#[test]
fn every_mechanism_runs_from_the_command_line() {
    let (dir, data, index) = fixture();
    let real = data.join("trajectories.jsonl");
    for m in ["ngram", "ngram-noh", "phys-dist", "ind-reach", "ind-noreach"] {
        let out = dir.path().join(format!("{m}.jsonl"));
        succeed(&["perturb", "--index", s(&index), "--trajectories", s(&real), "--mechanism", m, "--out", s(&out)]);
        assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 40, "{m}");
    }
    let out = run(&["perturb", "--index", s(&index), "--trajectories", s(&real), "--mechanism", "bogus", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["perturb", "--index", s(&index), "--trajectories", s(&real), "--epsilon", "0", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_commands() {
    let out = succeed(&["oracle", "cardinality", "--pois", "1000", "--len", "5", "--step-minutes", "15", "--mu", "0.2"]);
    let value: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!((value / 9.78e19 - 1.0).abs() < 0.005);

    let out = succeed(&["oracle", "reconstruction", "--instances", "50", "--seed", "3"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 mismatches"));

    let (dir, data, index) = fixture();
    let out = run(&[
        "oracle",
        "global",
        "--index",
        s(&index),
        "--trajectories",
        s(&data.join("trajectories.jsonl")),
        "--guard",
        "1000",
        "--out",
        s(&dir.path().join("g.jsonl")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("guard"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("g.jsonl").exists());
}

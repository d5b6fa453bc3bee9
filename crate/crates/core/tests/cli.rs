use std::path::Path;
use std::process::{Command, Output};

use radiomap::cli::{self, parse_config_str, Manifest, RunConfig};
use radiomap::dataset::{self, Provenance};
use radiomap::eval::EvalReport;
use radiomap::Error;

const TINY: &str = r#"{"samples_per_rp": 12, "seeds": [0],
    "train": {"epochs": 1, "steps_per_epoch": 3, "batch_size": 16, "n_critic": 1},
    "localizer": {"epochs": 2}, "bootstrap_resamples": 40}"#;

fn radiomap(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_radiomap"))
        .args(args)
        .current_dir(cwd)
        .env_remove(cli::SEED_ENV)
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(cli::run(["radiomap", "--help"]), 0);
    assert_eq!(cli::run(["radiomap", "--version"]), 0);
    assert_eq!(cli::run(["radiomap", "evaluate", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(cli::run(["radiomap", "frobnicate"]), 1);
    assert_eq!(cli::run(["radiomap", "simulate"]), 1);
    assert_eq!(cli::run(["radiomap", "complete", "--model", "/nonexistent/m.json", "--db", "x", "--out", "y"]), 1);
}

#[test]
fn zero_jobs_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = radiomap(&["--jobs", "0", "evaluate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--jobs"));
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    let o = radiomap(&["evaluate", "--config", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.epochz"), "{}", stderr(&o));
}

#[test]
fn config_parsing() {
    assert_eq!(parse_config_str("").unwrap(), RunConfig::default());
    assert_eq!(parse_config_str("  \n").unwrap(), RunConfig::default());
    let cfg = parse_config_str(r#"{"refine_k": 3, "train": {"lambda_3": 50.0}}"#).unwrap();
    assert_eq!(cfg.refine_k, 3);
    assert_eq!(cfg.train.reconstruction_weight, 50.0);
    match parse_config_str(r#"{"train": {"epochs": "many"}}"#) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "train.epochs"),
        other => panic!("{other:?}"),
    }
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("cfg.json");
    std::fs::write(&missing, r#"{"scene": "/nonexistent/scene.json"}"#).unwrap();
    assert!(matches!(cli::parse_config(&missing), Err(Error::Config { key, .. }) if key == "scene"));
    std::fs::write(&missing, r#"{"seeds": []}"#).unwrap();
    assert!(matches!(cli::parse_config(&missing), Err(Error::Config { key, .. }) if key == "seeds"));
}

#[test]
fn content_hash_is_git_blob_style() {
    // `git hash-object` with SHA-256 object format on an empty file.
    assert_eq!(
        cli::content_hash(b""),
        "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
    );
    assert_ne!(cli::content_hash(b"a"), cli::content_hash(b"b"));
}

#[test]
fn seed_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str], env: Option<&str>| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_radiomap"));
        c.args(args).current_dir(d).env_remove(cli::SEED_ENV);
        if let Some(s) = env {
            c.env(cli::SEED_ENV, s);
        }
        assert!(c.output().unwrap().status.success());
    };
    run(&["simulate", "--samples-per-rp", "3", "--seed", "5", "--out", "flag.csv"], None);
    run(&["simulate", "--samples-per-rp", "3", "--out", "env.csv"], Some("5"));
    run(&["simulate", "--samples-per-rp", "3", "--seed", "5", "--out", "both.csv"], Some("6"));
    run(&["simulate", "--samples-per-rp", "3", "--out", "other.csv"], Some("6"));
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("flag.csv"), read("env.csv"));
    assert_eq!(read("flag.csv"), read("both.csv"));
    assert_ne!(read("flag.csv"), read("other.csv"));
}

#[test]
fn pipeline_commands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), TINY).unwrap();
    let ok = |args: &[&str]| {
        let o = radiomap(args, d);
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    ok(&["simulate", "--samples-per-rp", "12", "--seed", "1", "--out", "db.csv"]);
    ok(&["split", "--db", "db.csv", "--out-dir", "parts", "--sizes", "15,15,10"]);
    let parts: Vec<_> = ["rss_train", "rss_test", "loc_test"]
        .iter()
        .map(|n| dataset::load(&d.join("parts").join(format!("{n}.csv"))).unwrap())
        .collect();
    assert_eq!(parts.iter().map(|p| p.rp_count()).collect::<Vec<_>>(), vec![15, 15, 10]);
    for (i, a) in parts.iter().enumerate() {
        for b in &parts[i + 1..] {
            assert!(a.rp_ids().iter().all(|r| !b.rp_ids().contains(r)));
        }
    }
    assert!(d.join("parts/stats.json").exists());

    ok(&["train", "--db", "parts/rss_train.csv", "--config", "cfg.json", "--out", "model.json"]);
    let m: Manifest = Manifest::load(&d.join("model.json.manifest.json")).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.inputs.len(), 2);
    assert!(m.inputs.values().all(|h| h.len() == 64));

    ok(&["refine", "--model", "model.json", "--db", "parts/rss_test.csv", "--rus", "0,3", "--out", "hybrid.csv"]);
    let hybrid = dataset::load(&d.join("hybrid.csv")).unwrap();
    let prov = hybrid.provenance().unwrap();
    assert!(hybrid.mask().iter().all(|&m| m));
    for (i, p) in prov.iter().enumerate() {
        let measured = matches!(i % 6, 0 | 3);
        assert_eq!(*p == Provenance::Measured, measured);
    }

    let sparse = parts[1].keep_rus(&[2]).unwrap();
    dataset::save(&sparse, &d.join("sparse.csv")).unwrap();
    ok(&["complete", "--model", "model.json", "--db", "sparse.csv", "--out", "done.csv"]);
    let done = dataset::load(&d.join("done.csv")).unwrap();
    for i in 0..done.len() {
        assert_eq!(done.row(i)[2], sparse.row(i)[2]);
        assert!(done.row(i).iter().all(|v| v.is_finite()));
    }
    assert_eq!(done.provenance().unwrap().iter().filter(|p| **p == Provenance::Measured).count(), done.len());

    let header: Vec<String> = (0..6).map(|i| format!("rss_{i}")).collect();
    let mut q = header.join(",") + "\n";
    for i in 0..4 {
        q += &parts[2].row(i).iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        q += "\n";
    }
    std::fs::write(d.join("q.csv"), q).unwrap();
    for kind in ["knn", "learned"] {
        ok(&["localize", "--db", "parts/rss_train.csv", "--queries", "q.csv", "--kind", kind, "--config", "cfg.json", "--out", "pos.csv"]);
        let text = std::fs::read_to_string(d.join("pos.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,y");
        assert_eq!(lines.len(), 5);
    }
}

#[test]
fn evaluate_writes_report_and_replays_from_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), TINY).unwrap();
    let o = radiomap(&["evaluate", "--config", "cfg.json", "--out-dir", "first"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = EvalReport::load(&d.join("first/comparison.json")).unwrap();
    let mut names: Vec<&str> = first.localization_rmse.keys().map(String::as_str).collect();
    names.sort();
    assert_eq!(names, ["full", "hybrid", "incomplete"]);
    let manifest = Manifest::load(&d.join("first/comparison.manifest.json")).unwrap();
    assert_eq!(manifest.command, "evaluate");
    assert_eq!(manifest.config_digest.len(), 64);
    assert!(manifest.outputs.iter().any(|p| p.ends_with("comparison.json")));

    let o = radiomap(&["evaluate", "--config", "first/comparison.manifest.json", "--out-dir", "second"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = EvalReport::load(&d.join("second/comparison.json")).unwrap();
    assert_eq!(first.canonical_json().unwrap(), second.canonical_json().unwrap());

    let o = radiomap(&["report", "first/comparison.json"], d);
    assert!(String::from_utf8_lossy(&o.stdout).contains("hybrid"));
}

#[test]
fn environment_seed_overrides_config_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), TINY.replace(r#""seeds": [0]"#, r#""seeds": [0, 1, 2]"#)).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_radiomap"))
        .args(["ksweep", "--config", "cfg.json", "--out-dir", "out"])
        .current_dir(d)
        .env(cli::SEED_ENV, "7")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let r = EvalReport::load(&d.join("out/k_sweep.json")).unwrap();
    assert_eq!(r.per_seed.iter().map(|s| s.seed).collect::<Vec<_>>(), vec![7]);
    let csv = std::fs::read_to_string(d.join("out/k_sweep.csv")).unwrap();
    assert!(csv.starts_with("K,rmse_mean,rmse_std\n1,"));
}

#[test]
fn sequential_and_parallel_runs_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("cfg.json"), TINY.replace(r#""seeds": [0]"#, r#""seeds": [0, 1]"#)).unwrap();
    for (jobs, out) in [("1", "seq"), ("2", "par")] {
        let o = radiomap(&["--jobs", jobs, "ablate", "--config", "cfg.json", "--out-dir", out], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let load = |o: &str| EvalReport::load(&d.join(o).join("ablation.json")).unwrap().canonical_json().unwrap();
    assert_eq!(load("seq"), load("par"));
}

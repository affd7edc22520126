use std::path::Path;
use std::process::{Command, Output};

fn ritp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ritp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("RITP_NUM_WORKERS")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: [&str; 14] = [
    "--set", "scenario_count=4",
    "--set", "il_steps=4",
    "--set", "irl_steps=2",
    "--set", "rl_steps=8",
    "--set", "warmup=4",
    "--set", "collect_envs=2",
    "--set", "log_every=4",
];

#[test]
fn gen_scenarios_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ritp(&["gen-scenarios", "--count", "6", "--seed", "3", "--out", p(out)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 7);
    for n in names {
        assert_eq!(std::fs::read(a.join(&n)).unwrap(), std::fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["scenario_ids"].as_array().unwrap().len(), 6);
    assert_eq!(manifest["seed"], 3);
}

#[test]
fn user_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = ritp(&["gen-scenarios", "--kinds", "roundabout", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("roundabout"));

    let o = ritp(&["train-reward", "--set", "no_such_key=3", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no_such_key"));

    let o = ritp(&["train-reward", "--preset", "huge", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let o = ritp(&["--workers", "0", "gen-scenarios", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));

    let o = ritp(&["simulate", "--planner", "magic", "--report", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_ritp_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = ritp(&["train-ritp", "--out", p(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train-reward"), "{}", stderr(&o));
}

#[test]
fn config_file_accepts_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let kv = dir.path().join("run.conf");
    std::fs::write(&kv, "# tiny\nscenario_count = 4\nmsr = false\n").unwrap();
    let json = dir.path().join("run.json");
    std::fs::write(&json, r#"{"scenario_count": 4, "msr": false}"#).unwrap();
    for (cfg, name) in [(&kv, "kv"), (&json, "json")] {
        let o = ritp(&["simulate", "--config", p(cfg), "--planner", "idm-only", "--mode", "nonreactive", "--report", p(&dir.path().join(name))]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let a = std::fs::read(dir.path().join("kv/report.json")).unwrap();
    let b = std::fs::read(dir.path().join("json/report.json")).unwrap();
    assert_eq!(a, b);
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("kv/manifest.json")).unwrap()).unwrap();
    assert!(m["ablations"].as_array().unwrap().iter().any(|v| v == "msr=false"));
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    let run = |cmd: &[&str]| {
        let mut args: Vec<&str> = cmd.to_vec();
        args.extend_from_slice(&TINY);
        let o = ritp(&args);
        assert!(o.status.success(), "{:?}: {}", cmd, stderr(&o));
        o
    };
    run(&["train-reward", "--out", p(&d("reward"))]);
    run(&["pretrain-policy", "--out", p(&d("policy"))]);
    run(&["train-ritp", "--reward", p(&d("reward")), "--pretrained", p(&d("policy")), "--out", p(&d("ritp"))]);
    for f in ["reward.json", "manifest.json", "train_reward.log.jsonl"] {
        assert!(d("reward").join(f).exists(), "{f}");
    }
    assert!(d("policy/policy.json").exists());
    assert!(d("ritp/actor.json").exists());
    assert!(d("ritp/summary.json").exists());

    let o = run(&["simulate", "--planner", "ritp-hybrid", "--mode", "nonreactive", "--checkpoint", p(&d("ritp")), "--report", p(&d("report")), "--plots"]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("ritp-hybrid"));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d("report/report.json")).unwrap()).unwrap();
    assert!(report.is_object() || report.is_array());
    assert!(d("report/deltas.json").exists());
    assert!(std::fs::read_dir(d("report/plots")).unwrap().any(|e| e.unwrap().path().extension().is_some_and(|x| x == "svg")));

    let o = run(&["simulate", "--planner", "ritp", "--mode", "nonreactive", "--checkpoint", p(&d("policy")), "--report", p(&d("warm"))]);
    assert!(o.status.success());
}

use std::path::Path;
use std::process::{Command, Output};

fn agentconf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agentconf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn json(out: &Output) -> serde_json::Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

const SMALL: &str = "seed = 2\noutput_dir = \"run\"\n[env]\neval_tasks = 30\n[policy]\nhidden = [32]\n[train.ppo]\nbatch_size = 32\ntotal_episodes = 128\n";

#[test]
fn enumerate_masks_counts_the_full_space() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("full.toml"), "[env]\nsuite = \"full\"\n").unwrap();
    std::fs::write(dir.path().join("ones.toml"), "[env]\nsuite = \"full\"\n[mask]\npreset = \"all-ones\"\n").unwrap();
    assert_eq!(json(&agentconf(&["enumerate-masks", "--config", "full.toml"], dir.path()))["total"], 27_984);
    assert_eq!(json(&agentconf(&["enumerate-masks", "--config", "ones.toml"], dir.path()))["total"], 62_208);
}

#[test]
fn train_eval_analyze_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let train = json(&agentconf(&["train", "--config", "run.toml"], dir.path()));
    assert_eq!(train["episodes"], 128);
    let run = dir.path().join("run");
    let eval = json(&agentconf(
        &["eval", "--config", "run.toml", "--policy", "run/policy", "--out", "evaluated"],
        dir.path(),
    ));
    assert_eq!(eval, train["evaluation"]);
    assert!(dir.path().join("evaluated/eval_report.json").is_file());
    let analysis = json(&agentconf(
        &["analyze", "run/buffer.jsonl", "run/eval_episodes.jsonl", "--frontier-csv", "f.csv"],
        dir.path(),
    ));
    assert_eq!(analysis["episodes"], 158);
    assert_eq!(analysis["points"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("f.csv")).unwrap();
    assert!(csv.starts_with("label,cost,accuracy\n"));
    assert!(run.join("config.toml").is_file());
}

#[test]
fn seed_override_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), SMALL).unwrap();
    let a = json(&agentconf(&["simulate", "--config", "run.toml", "--episodes", "40", "--out", "a"], dir.path()));
    let b = json(&agentconf(&["simulate", "--config", "run.toml", "--episodes", "40", "--out", "b"], dir.path()));
    let c = json(&agentconf(
        &["simulate", "--config", "run.toml", "--episodes", "40", "--seed", "9", "--out", "c"],
        dir.path(),
    ));
    assert_eq!(a, b);
    let read = |d: &str| std::fs::read_to_string(dir.path().join(d).join("episodes.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
    assert_eq!(c["counts"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>(), 40);
}

#[test]
fn search_methods_report_an_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), format!("{SMALL}[search]\nepisodes_per_evaluation = 2\n")).unwrap();
    for method in ["grid", "greedy", "bandit", "flat-episode"] {
        let out = format!("s-{method}");
        let eval = json(&agentconf(&["search", "--config", "run.toml", "--method", method, "--out", &out], dir.path()));
        assert_eq!(eval["episodes"], 30, "{method}");
        assert!(dir.path().join(&out).join("search_report.json").is_file());
    }
}

#[test]
fn config_errors_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[train.ppo]\nclip_eps = 1.5\n").unwrap();
    let out = agentconf(&["train", "--config", "bad.toml"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ppo.clip_eps"));
    std::fs::write(dir.path().join("typo.toml"), "[reward]\nalfa = 1.0\n").unwrap();
    let out = agentconf(&["train", "--config", "typo.toml"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("alfa"));
    let out = agentconf(&["train", "--mode", "real"], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("real.queries"));
}

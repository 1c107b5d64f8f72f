use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn propa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_propa"))
        .args(args)
        .env_remove("PROPA_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Default config shrunk to 20 training instances and 2+2 epochs.
fn tiny_config(dir: &Path) -> String {
    let text = stdout(&propa(&["default-config"]));
    let mut table: toml::Table = text.parse().unwrap();
    let set = |t: &mut toml::Table, section: &str, key: &str, v: toml::Value| {
        t[section].as_table_mut().unwrap().insert(key.into(), v);
    };
    set(&mut table, "run", "output_dir", dir.join("out").to_string_lossy().into_owned().into());
    set(&mut table, "run", "n_train", 20.into());
    set(&mut table, "run", "n_val", 10.into());
    set(&mut table, "run", "n_test", 30.into());
    set(&mut table, "run", "n_seeds", 2.into());
    set(&mut table, "schedule", "epochs_total", 4.into());
    set(&mut table, "schedule", "epochs_activation", 2.into());
    set(&mut table, "schedule", "lambda", 10.into());
    let path = dir.join("config.toml");
    fs::write(&path, table.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn train_emits_every_artifact_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let start = Instant::now();
    let out = propa(&["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(start.elapsed() < Duration::from_secs(60));
    let run = dir.path().join("out");
    for f in [
        "config.toml",
        "train.txt",
        "val.txt",
        "test.txt",
        "policy_epoch_01.txt",
        "policy_epoch_04.txt",
        "policy_best.txt",
        "prm.txt",
        "metrics.csv",
        "groups.csv",
        "trees.txt",
    ] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,flush_idx,n_grpo_groups,n_sft_instances,eval_accuracy\n"));
    // instance_id,parent_depth,child_token,q_raw,q_transformed,advantage
    let groups = fs::read_to_string(run.join("groups.csv")).unwrap();
    assert!(groups.lines().all(|l| l.split(',').count() == 6));
    let header = fs::read_to_string(run.join("policy_best.txt")).unwrap();
    assert!(header.starts_with("92 111 "));

    // identical rerun, identical bytes
    let metrics_before = fs::read(run.join("metrics.csv")).unwrap();
    let trees_before = fs::read(run.join("trees.txt")).unwrap();
    assert!(propa(&["train", "--config", &cfg]).status.success());
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), metrics_before);
    assert_eq!(fs::read(run.join("trees.txt")).unwrap(), trees_before);

    // eval reads the artifacts back and tags every row with its strategy
    let out = propa(&["eval", "--config", &cfg, "--strategy", "best-n"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(run.join("eval_best-n.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("instance_id,strategy,answer,correct,mean_q,nodes_expanded,fallback_used")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * 30);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("best-n")));

    let out = propa(&["inspect-tree", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("UCT="));
    assert!(text.contains("audit: ok"));
    assert!(text.lines().filter(|l| l.contains("audit:")).all(|l| l.ends_with("audit: ok")));
}

#[test]
fn missing_field_fails_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let text = stdout(&propa(&["default-config"])).replace("lambda = 40\n", "");
    let path = dir.path().join("c.toml");
    fs::write(&path, text).unwrap();
    let out = propa(&["train", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("lambda"), "{}", stderr(&out));
}

#[test]
fn invalid_override_names_the_field() {
    let out = propa(&["gen-data", "--set", "env.d_max=9"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("env.d_min"));
}

#[test]
fn missing_checkpoint_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = propa(&["eval", "--config", &cfg, "--oracle", "--policy", "/nonexistent/p.txt"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("failed to load"));
}

#[test]
fn output_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_propa"))
        .args(["gen-data", "--config", &cfg])
        .env("PROPA_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert!(out.status.success());
    let train = fs::read_to_string(elsewhere.join("train.txt")).unwrap();
    assert_eq!(train.lines().count(), 20);
    // instance_id,d,digits...,truth
    let first: Vec<i64> = train.lines().next().unwrap().split(',').map(|f| f.parse().unwrap()).collect();
    let d = first[1] as usize;
    assert_eq!(first.len(), d + 3);
    assert_eq!(first[2..2 + d].iter().sum::<i64>(), first[d + 2]);
}

#[test]
fn ablate_writes_one_row_per_variant_strategy_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = propa(&["ablate", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("out/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 3 * 2);
    // the no-transform runs log raw values as their transformed values
    let groups = fs::read_to_string(dir.path().join("out/groups_no-transform_s0.csv")).unwrap();
    assert!(!groups.is_empty());
    for line in groups.lines() {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3], f[4]);
    }
}

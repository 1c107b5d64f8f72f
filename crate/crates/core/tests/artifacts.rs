//! Persisted training artifacts are enough to replay every emitted number.

use std::fs::{self, File};
use std::io::BufReader;

use propa_core::env::read_instances;
use propa_core::grpo_data::{write_group_records, AdvantageGroup};
use propa_core::harness::{checkpoint_name, cmd_eval, cmd_train, EvalRequest, RunConfig, ScorerSource, Strategy};
use propa_core::interleave::{greedy_accuracy, partition_tree, Route};
use propa_core::mcts::{audit_tree, read_tree_dumps};
use propa_core::policy::read_checkpoint;
use propa_core::prm::read_prm_checkpoint;
use propa_core::{Chain, PolicyParams, PrefixSum, ReasoningEnv};

fn small_config(dir: &std::path::Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.run.output_dir = dir.to_path_buf();
    cfg.run.n_train = 40;
    cfg.run.n_val = 30;
    cfg.run.n_test = 40;
    cfg.schedule.epochs_total = 5;
    cfg.schedule.epochs_activation = 2;
    cfg.schedule.lambda = 10;
    cfg
}

#[test]
fn metrics_and_groups_replay_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_train(&cfg).unwrap();
    let env = cfg.env();
    let read = |name: &str| BufReader::new(File::open(dir.path().join(name)).unwrap());

    let val = read_instances(read("val.txt")).unwrap();
    let mut reader = csv::Reader::from_reader(read("metrics.csv"));
    let mut epoch_rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        if rec[1].is_empty() {
            let epoch: usize = rec[0].parse().unwrap();
            let policy = read_checkpoint(read(&checkpoint_name(epoch - 1))).unwrap();
            let acc = greedy_accuracy(&env, &policy, &val, cfg.mcts.max_depth).unwrap();
            assert_eq!(rec[4], format!("{acc:.6}"), "epoch {epoch}");
            epoch_rows += 1;
        }
    }
    assert_eq!(epoch_rows, 5);

    // the final epoch's groups are the tail of groups.csv
    let trees = read_tree_dumps(&env, read("trees.txt")).unwrap();
    assert_eq!(trees.len(), 40);
    let mut records = Vec::new();
    for t in &trees {
        assert!(audit_tree(t, &env, true).is_empty());
        if let Route::Grpo { groups, .. } = partition_tree(t, 0, cfg.grpo.tau, cfg.train_config(cfg.grpo.variant, 0).transform()) {
            records.extend(groups.iter().flat_map(AdvantageGroup::records));
        }
    }
    let mut replayed = Vec::new();
    write_group_records(&mut replayed, &records).unwrap();
    let logged = fs::read(dir.path().join("groups.csv")).unwrap();
    assert!(logged.ends_with(&replayed));

    let prm = read_prm_checkpoint(read("prm.txt")).unwrap();
    assert_eq!(prm.weights.len(), 111);
}

#[test]
fn untrained_greedy_matches_the_lowest_token_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let policy = dir.path().join("zero.txt");
    let env = PrefixSum::new();
    propa_core::policy::write_checkpoint(File::create(&policy).unwrap(), &PolicyParams::for_env(&env)).unwrap();
    let summary = cmd_eval(
        &cfg,
        &EvalRequest {
            policy,
            scorer: ScorerSource::Oracle,
            strategy: Strategy::Greedy,
            instances: None,
        },
    )
    .unwrap();
    // uniform logits tie everywhere and ties go to the lowest token id
    let test = propa_core::harness::generate_datasets(&cfg).unwrap().test;
    let correct = test
        .iter()
        .filter(|x| {
            let mut chain = Chain::empty((*x).clone());
            while !chain.is_terminal() && chain.len() < cfg.mcts.max_depth {
                chain.push(env.token(0)).unwrap();
            }
            chain.is_terminal() && env.verify_answer(&chain).unwrap() == 1
        })
        .count();
    let baseline = correct as f64 / test.len() as f64;
    assert_eq!(summary.per_seed, vec![baseline; cfg.run.n_seeds]);
    let csv = fs::read_to_string(summary.csv).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(2) == Some("")));
}

#[test]
fn checkpoint_dimension_mismatch_is_a_load_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let policy = dir.path().join("small.txt");
    propa_core::policy::write_checkpoint(File::create(&policy).unwrap(), &PolicyParams::zeros(92, 10)).unwrap();
    let err = cmd_eval(
        &cfg,
        &EvalRequest {
            policy,
            scorer: ScorerSource::Oracle,
            strategy: Strategy::Greedy,
            instances: None,
        },
    )
    .unwrap_err();
    assert!(matches!(err, propa_core::PropaError::Load { .. }), "{err}");
}

//! The interleaved training loop.
//!
//! After an SFT activation stage on teacher traces, every training instance
//! gets a search tree. Trees that reached a correct terminal node contribute
//! their filtered, transformed groups to the GRPO buffer; trees that did not
//! contribute their instance index to the SFT buffer. Both buffers are spent
//! every `lambda` processed instances, GRPO first.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Chain, ProblemInstance, ReasoningEnv};
use crate::error::{invalid, Result};
use crate::grpo_data::{
    compute_advantages_with, extract_groups, filter_groups, AdvantageGroup, GroupRecord, QTransform,
};
use crate::inference::{greedy_search, select_terminal};
use crate::mcts::{build_tree, MctsConfig, SearchTree};
use crate::policy::{grpo_update, sft_update, GrpoParams, PolicyParams, ReferenceSnapshot};
use crate::PropaError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lambda: usize,
    pub epochs_total: usize,
    pub epochs_activation: usize,
    pub lr: f64,
    pub grpo_batch: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda: 40,
            epochs_total: 10,
            epochs_activation: 3,
            lr: 1.0,
            grpo_batch: 4,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda == 0 {
            return Err(invalid("lambda must be positive"));
        }
        if self.epochs_activation > self.epochs_total {
            return Err(invalid("epochs_activation exceeds epochs_total"));
        }
        if !(self.lr >= 0.0) || self.grpo_batch == 0 {
            return Err(invalid("lr must be nonnegative and grpo_batch positive"));
        }
        Ok(())
    }
}

/// Which halves of the interleaved scheme are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// GRPO on successful trees, SFT on failed ones.
    Full,
    /// Failed trees are dropped.
    GrpoOnly,
    /// Successful trees train by SFT on their best-valued terminal path.
    SftOnly,
    /// Advantages use raw tree values.
    NoTransform,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::GrpoOnly, Variant::SftOnly, Variant::NoTransform];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::GrpoOnly => "grpo-only",
            Variant::SftOnly => "sft-only",
            Variant::NoTransform => "no-transform",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub mcts: MctsConfig,
    pub grpo: GrpoParams,
    pub tau: f64,
    pub alpha: f64,
    pub variant: Variant,
    /// Collect value-model data only from trees with a correct terminal.
    pub prm_successful_only: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: ScheduleConfig::default(),
            mcts: MctsConfig::default(),
            grpo: GrpoParams::default(),
            tau: 0.1,
            alpha: 10.0,
            variant: Variant::Full,
            prm_successful_only: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn transform(&self) -> QTransform {
        match self.variant {
            Variant::NoTransform => QTransform::Identity,
            _ => QTransform::Log { alpha: self.alpha },
        }
    }

    fn update_params(&self) -> GrpoParams {
        GrpoParams {
            lr: self.schedule.lr,
            ..self.grpo
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Partitions {
    pub d_grpo: Vec<AdvantageGroup>,
    /// Indices into the training set whose trees found no correct terminal.
    pub d_sft: Vec<usize>,
    pub d_act: BTreeMap<u64, Chain>,
    pub d_prm: Vec<(Chain, f64)>,
    /// Best-path traces, used only by [`Variant::SftOnly`].
    pub d_sft_paths: Vec<Chain>,
}

pub fn build_activation_set<E: ReasoningEnv>(env: &E, instances: &[ProblemInstance]) -> BTreeMap<u64, Chain> {
    instances
        .iter()
        .map(|x| (x.instance_id, env.teacher_trace(x)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Route {
    /// The tree reached a correct terminal; surviving groups (possibly none).
    Grpo {
        groups: Vec<AdvantageGroup>,
        extracted: usize,
        degenerate: usize,
    },
    Sft(usize),
}

/// Whether some terminal node in the tree was rewarded 1 during search.
pub fn has_correct_terminal(tree: &SearchTree) -> bool {
    tree.rollout_log
        .iter()
        .any(|r| r.reward == 1.0 && tree.node(r.leaf).terminal)
}

/// Routes a finished tree to GRPO (filtered, transformed groups) or SFT.
pub fn partition_tree(tree: &SearchTree, j: usize, tau: f64, transform: QTransform) -> Route {
    if !has_correct_terminal(tree) {
        return Route::Sft(j);
    }
    let extracted = extract_groups(tree);
    let n_extracted = extracted.len();
    let mut degenerate = 0;
    let groups = filter_groups(extracted, tau)
        .iter()
        .filter_map(|g| match compute_advantages_with(g, transform) {
            Ok(ag) => Some(ag),
            Err(_) => {
                degenerate += 1;
                None
            }
        })
        .collect();
    Route::Grpo {
        groups,
        extracted: n_extracted,
        degenerate,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlushStats {
    pub grpo_updates: usize,
    pub sft_updates: usize,
    pub n_grpo_groups: usize,
    pub n_sft_instances: usize,
}

/// Spends both buffers every `lambda`-th call: GRPO over `d_grpo` in batches
/// of `grpo_batch` groups against a snapshot taken at flush start, then SFT on
/// the activation traces named by `d_sft`. Returns `None` if no flush was due.
pub fn maybe_flush<E: ReasoningEnv>(
    env: &E,
    params: PolicyParams,
    partitions: &mut Partitions,
    cfg: &TrainConfig,
    calls: usize,
) -> Result<(PolicyParams, Option<FlushStats>)> {
    let due = calls > 0 && calls % cfg.schedule.lambda == 0;
    let empty = partitions.d_grpo.is_empty() && partitions.d_sft.is_empty() && partitions.d_sft_paths.is_empty();
    if !due || empty {
        return Ok((params, None));
    }
    let batch = cfg.schedule.grpo_batch;
    let mut stats = FlushStats {
        n_grpo_groups: partitions.d_grpo.len(),
        n_sft_instances: partitions.d_sft.len(),
        ..FlushStats::default()
    };
    let mut params = params;
    if !partitions.d_grpo.is_empty() {
        let hp = cfg.update_params();
        for chunk in partitions.d_grpo.chunks(batch) {
            let reference = ReferenceSnapshot::of(&params);
            params = grpo_update(env, &params, &reference, chunk, &hp)?;
            stats.grpo_updates += 1;
        }
    }
    let mut traces: Vec<Chain> = partitions
        .d_sft
        .iter()
        .map(|&j| {
            partitions
                .d_act
                .values()
                .nth(j)
                .cloned()
                .ok_or_else(|| invalid(format!("no activation trace for index {j}")))
        })
        .collect::<Result<_>>()?;
    traces.append(&mut partitions.d_sft_paths);
    for chunk in traces.chunks(batch) {
        params = sft_update(env, &params, chunk, cfg.schedule.lr)?;
        stats.sft_updates += 1;
    }
    partitions.d_grpo.clear();
    partitions.d_sft.clear();
    Ok((params, Some(stats)))
}

/// One row of the training metrics stream.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub flush_idx: Option<usize>,
    pub n_grpo_groups: usize,
    pub n_sft_instances: usize,
    /// Trees routed to GRPO in this window, and how many of them kept no group.
    pub n_grpo_instances: usize,
    pub n_grpo_empty: usize,
    pub eval_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub policy: PolicyParams,
    pub d_prm: Vec<(Chain, f64)>,
    pub metrics: Vec<MetricRow>,
    /// Policy after each epoch, activation epochs included.
    pub epoch_checkpoints: Vec<PolicyParams>,
    /// Trees of the final epoch, in processing order.
    pub final_trees: Vec<SearchTree>,
    pub group_records: Vec<GroupRecord>,
    /// Instances left in the buffers when training ended.
    pub unflushed: usize,
}

impl TrainingOutcome {
    pub fn flush_rows(&self) -> impl Iterator<Item = &MetricRow> {
        self.metrics.iter().filter(|m| m.flush_idx.is_some())
    }

    /// Validation accuracy after each epoch.
    pub fn epoch_accuracies(&self) -> Vec<f64> {
        self.metrics.iter().filter_map(|m| m.eval_accuracy).collect()
    }

    /// Epoch in `epochs` with the highest validation accuracy, earliest on ties.
    pub fn best_epoch(&self, epochs: std::ops::Range<usize>) -> Option<usize> {
        let accs = self.epoch_accuracies();
        let mut best: Option<usize> = None;
        for e in epochs.filter(|&e| e < accs.len()) {
            if best.map_or(true, |b| accs[e] > accs[b]) {
                best = Some(e);
            }
        }
        best
    }
}

/// Greedy-decoding accuracy.
pub fn greedy_accuracy<E: ReasoningEnv>(
    env: &E,
    policy: &PolicyParams,
    instances: &[ProblemInstance],
    max_depth: usize,
) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for x in instances {
        let r = greedy_search(env, x, policy, max_depth)?;
        if r.answer == Some(x.truth) {
            correct += 1;
        }
    }
    Ok(correct as f64 / instances.len() as f64)
}

/// SplitMix64 finalizer, used to derive independent seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Activation SFT, then tree-driven interleaved epochs. Value-model data is
/// collected from every visited node of every tree in the final epoch.
pub fn run_training<E: ReasoningEnv>(
    env: &E,
    train: &[ProblemInstance],
    val: &[ProblemInstance],
    policy: PolicyParams,
    cfg: &TrainConfig,
) -> Result<TrainingOutcome> {
    cfg.schedule.validate()?;
    cfg.mcts.validate()?;
    if train.is_empty() {
        return Err(invalid("empty training set"));
    }
    let sched = &cfg.schedule;
    let max_depth = cfg.mcts.max_depth;
    let mut partitions = Partitions {
        d_act: build_activation_set(env, train),
        ..Partitions::default()
    };
    if partitions.d_act.len() != train.len() {
        return Err(invalid("training instance ids must be unique"));
    }
    // d_sft indexes the activation set in id order
    let act_index: BTreeMap<u64, usize> = partitions.d_act.keys().enumerate().map(|(i, &id)| (id, i)).collect();

    let mut policy = policy;
    let mut metrics = Vec::new();
    let mut epoch_checkpoints = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0xAC7]));

    let act_traces: Vec<Chain> = partitions.d_act.values().cloned().collect();
    for epoch in 1..=sched.epochs_activation {
        let mut order: Vec<usize> = (0..act_traces.len()).collect();
        order.shuffle(&mut rng);
        let shuffled: Vec<Chain> = order.iter().map(|&i| act_traces[i].clone()).collect();
        for chunk in shuffled.chunks(sched.grpo_batch) {
            policy = sft_update(env, &policy, chunk, sched.lr)?;
        }
        metrics.push(MetricRow {
            epoch,
            flush_idx: None,
            n_grpo_groups: 0,
            n_sft_instances: 0,
            n_grpo_instances: 0,
            n_grpo_empty: 0,
            eval_accuracy: Some(greedy_accuracy(env, &policy, val, max_depth)?),
        });
        epoch_checkpoints.push(policy.clone());
    }

    let transform = cfg.transform();
    let mut calls = 0usize;
    let mut flush_idx = 0usize;
    let mut window_grpo = 0usize;
    let mut window_empty = 0usize;
    let mut final_trees = Vec::new();
    let mut group_records = Vec::new();
    for epoch in sched.epochs_activation + 1..=sched.epochs_total {
        let last_epoch = epoch == sched.epochs_total;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        for &i in &order {
            let x = &train[i];
            let tree_cfg = cfg.mcts.with_seed(mix_seed(&[cfg.seed, epoch as u64, x.instance_id]));
            let tree = build_tree(env, x, &policy, &tree_cfg)?;
            let j = act_index[&x.instance_id];
            let success = match partition_tree(&tree, j, cfg.tau, transform) {
                Route::Grpo { groups, .. } => {
                    window_grpo += 1;
                    if groups.is_empty() {
                        window_empty += 1;
                    }
                    match cfg.variant {
                        Variant::SftOnly => {
                            let (best, _) = select_terminal(&tree)?;
                            partitions.d_sft_paths.push(tree.chain(best));
                        }
                        _ => {
                            group_records.extend(groups.iter().flat_map(AdvantageGroup::records));
                            partitions.d_grpo.extend(groups);
                        }
                    }
                    true
                }
                Route::Sft(j) => {
                    if cfg.variant != Variant::GrpoOnly {
                        partitions.d_sft.push(j);
                    }
                    false
                }
            };
            if last_epoch && (success || !cfg.prm_successful_only) {
                partitions.d_prm.extend(
                    tree.nodes
                        .iter()
                        .filter(|n| n.n >= 1)
                        .map(|n| (tree.chain(n.node_id), n.w / n.n as f64)),
                );
            }
            calls += 1;
            let n_sft_routed = calls_window_sft(calls, sched.lambda, window_grpo);
            let (next, stats) = maybe_flush(env, policy, &mut partitions, cfg, calls)?;
            policy = next;
            if calls % sched.lambda == 0 {
                flush_idx += 1;
                let stats = stats.unwrap_or_default();
                metrics.push(MetricRow {
                    epoch,
                    flush_idx: Some(flush_idx),
                    n_grpo_groups: stats.n_grpo_groups,
                    n_sft_instances: n_sft_routed,
                    n_grpo_instances: window_grpo,
                    n_grpo_empty: window_empty,
                    eval_accuracy: None,
                });
                window_grpo = 0;
                window_empty = 0;
            }
            if last_epoch {
                final_trees.push(tree);
            }
        }
        metrics.push(MetricRow {
            epoch,
            flush_idx: None,
            n_grpo_groups: 0,
            n_sft_instances: 0,
            n_grpo_instances: 0,
            n_grpo_empty: 0,
            eval_accuracy: Some(greedy_accuracy(env, &policy, val, max_depth)?),
        });
        epoch_checkpoints.push(policy.clone());
    }
    let unflushed = calls % sched.lambda;
    if unflushed > 0 {
        log::info!("{unflushed} instances left unflushed at the end of training");
    }
    Ok(TrainingOutcome {
        policy,
        d_prm: partitions.d_prm,
        metrics,
        epoch_checkpoints,
        final_trees,
        group_records,
        unflushed,
    })
}

/// SFT-routed trees in the current window: every processed tree is routed to
/// exactly one side.
fn calls_window_sft(calls: usize, lambda: usize, window_grpo: usize) -> usize {
    let in_window = match calls % lambda {
        0 => lambda,
        r => r,
    };
    in_window - window_grpo
}

/// Writes `epoch,flush_idx,n_grpo_groups,n_sft_instances,eval_accuracy`.
pub fn write_metrics<W: std::io::Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "flush_idx", "n_grpo_groups", "n_sft_instances", "eval_accuracy"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.flush_idx.map(|f| f.to_string()).unwrap_or_default(),
            r.n_grpo_groups.to_string(),
            r.n_sft_instances.to_string(),
            r.eval_accuracy.map(|a| format!("{a:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(PropaError::from)?;
    Ok(())
}

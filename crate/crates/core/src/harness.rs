//! Experiment orchestration: run configuration, seeded datasets, training,
//! evaluation and ablation runs, and their on-disk artifacts.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::env::{read_instances, write_instances, PrefixSum, ProblemInstance, ReasoningEnv};
use crate::error::{PropaError, Result};
use crate::grpo_data::write_group_records;
use crate::inference::{bestn_search, greedy_search, mcts_with_prm, InferenceResult, OracleScorer};
use crate::interleave::{
    greedy_accuracy, mix_seed, run_training, write_metrics, ScheduleConfig, TrainConfig, TrainingOutcome, Variant,
};
use crate::mcts::{audit_tree, read_tree_dumps, uct_score, write_tree_dump, MctsConfig, SearchTree};
use crate::policy::{read_checkpoint, write_checkpoint, GrpoParams, PolicyParams, SamplingConfig};
use crate::prm::{read_prm_checkpoint, train_prm, write_prm_checkpoint, ChainScorer, PrmParams, PrmScorer};

/// The only environment variable consulted: it replaces `run.output_dir`.
pub const OUTPUT_DIR_ENV: &str = "PROPA_OUTPUT_DIR";

const TAG_TRAIN_SET: u64 = 1;
const TAG_VAL_SET: u64 = 2;
const TAG_TEST_SET: u64 = 3;
const TAG_TRAIN_RUN: u64 = 10;
const TAG_EVAL: u64 = 11;

pub const VAL_ID_BASE: u64 = 1_000_000;
pub const TEST_ID_BASE: u64 = 2_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Threads used for evaluation.
    pub workers: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Independent repeats for evaluation and ablation.
    pub n_seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub name: String,
    pub d_min: usize,
    pub d_max: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MctsSection {
    pub c: f64,
    pub k: usize,
    pub iterations: usize,
    pub max_depth: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrpoSection {
    pub tau: f64,
    pub alpha: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub variant: Variant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Greedy,
    BestN,
    MctsPrm,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Greedy, Strategy::BestN, Strategy::MctsPrm];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Greedy => "greedy",
            Strategy::BestN => "best-n",
            Strategy::MctsPrm => "mcts-prm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| config_err("inference.strategy", format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceSection {
    pub strategy: Strategy,
    /// Candidates per depth for best-of-n.
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrmSection {
    /// Collect value data only from trees that found a correct answer.
    pub successful_only: bool,
}

/// Every knob of a run. All fields are required in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub env: EnvSection,
    pub mcts: MctsSection,
    pub sampling: SamplingSection,
    pub schedule: ScheduleConfig,
    pub grpo: GrpoSection,
    pub inference: InferenceSection,
    pub prm: PrmSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mcts = MctsConfig::default();
        let sampling = SamplingConfig::default();
        let grpo = GrpoParams::default();
        let train = TrainConfig::default();
        Self {
            run: RunSection {
                seed: 0,
                output_dir: PathBuf::from("runs/default"),
                workers: 1,
                n_train: 200,
                n_val: 100,
                n_test: 500,
                n_seeds: 3,
            },
            env: EnvSection {
                name: "prefix-sum".into(),
                d_min: 1,
                d_max: 3,
            },
            mcts: MctsSection {
                c: mcts.exploration,
                k: mcts.k,
                iterations: mcts.iterations,
                max_depth: mcts.max_depth,
            },
            sampling: SamplingSection {
                temperature: sampling.temperature,
                top_k: sampling.top_k,
                top_p: sampling.top_p,
            },
            schedule: ScheduleConfig::default(),
            grpo: GrpoSection {
                tau: train.tau,
                alpha: train.alpha,
                clip_eps: grpo.clip_eps,
                kl_beta: grpo.kl_beta,
                variant: Variant::Full,
            },
            inference: InferenceSection {
                strategy: Strategy::MctsPrm,
                n: mcts.k,
            },
            prm: PrmSection {
                successful_only: false,
            },
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> PropaError {
    PropaError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn toml_err(e: toml::de::Error) -> PropaError {
    let message = e.message().to_string();
    // serde names the offending key in backticks
    let field = message
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".into());
    PropaError::Config { field, message }
}

impl RunConfig {
    /// Parses TOML text, applies `section.key=value` overrides, then the
    /// output directory variable, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(toml_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::from_str(&table.to_string()).map_err(toml_err)?;
        if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
            if !dir.is_empty() {
                cfg.run.output_dir = PathBuf::from(dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PropaError::Load {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.env.name != "prefix-sum" {
            return Err(config_err("env.name", format!("unknown environment `{}`", self.env.name)));
        }
        if self.env.d_min == 0 || self.env.d_min > self.env.d_max || self.env.d_max > PrefixSum::MAX_DIGITS {
            return Err(config_err(
                "env.d_min",
                format!("need 1 <= d_min <= d_max <= {}", PrefixSum::MAX_DIGITS),
            ));
        }
        if self.mcts.max_depth <= self.env.d_max {
            return Err(config_err("mcts.max_depth", "must exceed env.d_max so a teacher trace fits"));
        }
        if self.run.workers == 0 {
            return Err(config_err("run.workers", "must be at least 1"));
        }
        if self.run.n_seeds == 0 {
            return Err(config_err("run.n_seeds", "must be at least 1"));
        }
        if self.run.n_train == 0 {
            return Err(config_err("run.n_train", "must be at least 1"));
        }
        if self.inference.n == 0 {
            return Err(config_err("inference.n", "must be at least 1"));
        }
        if !(self.grpo.tau >= 0.0) {
            return Err(config_err("grpo.tau", "must be nonnegative"));
        }
        if !(self.grpo.alpha > 0.0) {
            return Err(config_err("grpo.alpha", "must be positive"));
        }
        if !(self.grpo.clip_eps >= 0.0) || !(self.grpo.kl_beta >= 0.0) {
            return Err(config_err("grpo.clip_eps", "clip_eps and kl_beta must be nonnegative"));
        }
        self.schedule
            .validate()
            .map_err(|e| config_err("schedule", e.to_string()))?;
        self.mcts_config(0)
            .validate()
            .map_err(|e| config_err("mcts", e.to_string()))?;
        let mut sampling = self.sampling_config(0);
        sampling.top_k = sampling.top_k.max(1);
        sampling
            .validate(usize::MAX)
            .map_err(|e| config_err("sampling", e.to_string()))?;
        if self.sampling.top_k == 0 {
            return Err(config_err("sampling.top_k", "must be at least 1"));
        }
        Ok(())
    }

    pub fn env(&self) -> PrefixSum {
        PrefixSum {
            max_depth: self.mcts.max_depth,
        }
    }

    /// Sampling settings with `top_k` clamped to the vocabulary.
    pub fn sampling_config(&self, seed: u64) -> SamplingConfig {
        let vocab = PrefixSum::VOCAB;
        let mut top_k = self.sampling.top_k;
        if top_k > vocab {
            log::warn!("sampling.top_k {top_k} exceeds the vocabulary; clamped to {vocab}");
            top_k = vocab;
        }
        SamplingConfig {
            temperature: self.sampling.temperature,
            top_k,
            top_p: self.sampling.top_p,
            rng_seed: seed,
        }
    }

    pub fn mcts_config(&self, seed: u64) -> MctsConfig {
        MctsConfig {
            exploration: self.mcts.c,
            k: self.mcts.k,
            iterations: self.mcts.iterations,
            max_depth: self.mcts.max_depth,
            sampling: self.sampling_config(seed),
        }
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            schedule: self.schedule,
            mcts: self.mcts_config(0),
            grpo: GrpoParams {
                lr: self.schedule.lr,
                clip_eps: self.grpo.clip_eps,
                kl_beta: self.grpo.kl_beta,
            },
            tau: self.grpo.tau,
            alpha: self.grpo.alpha,
            variant,
            prm_successful_only: self.prm.successful_only,
            seed,
        }
    }

    /// Seed of the `repeat`-th training run.
    pub fn train_seed(&self, repeat: usize) -> u64 {
        mix_seed(&[self.run.seed, TAG_TRAIN_RUN, repeat as u64])
    }

    fn eval_seed(&self, repeat: usize, instance_id: u64) -> u64 {
        mix_seed(&[self.run.seed, TAG_EVAL, repeat as u64, instance_id])
    }
}

/// Sets `section.key` to `value`, read as a TOML literal when it parses as
/// one and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(assignment, "override must look like section.key=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut keys: Vec<&str> = path.split('.').collect();
    let last = keys.pop().filter(|k| !k.is_empty()).ok_or_else(|| config_err(path, "empty key"))?;
    let mut cur = table;
    for k in keys {
        cur = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| config_err(path, format!("`{k}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub train: Vec<ProblemInstance>,
    pub val: Vec<ProblemInstance>,
    pub test: Vec<ProblemInstance>,
}

fn generate_split<E: ReasoningEnv>(env: &E, cfg: &RunConfig, tag: u64, n: usize, base: u64) -> Result<Vec<ProblemInstance>> {
    let span = (cfg.env.d_max - cfg.env.d_min + 1) as u64;
    (0..n as u64)
        .map(|i| {
            let s = mix_seed(&[cfg.run.seed, tag, i]);
            let d = cfg.env.d_min + (s % span) as usize;
            let mut x = env.generate_instance(s, d)?;
            x.instance_id = base + i;
            Ok(x)
        })
        .collect()
}

/// Train, validation and test splits drawn from the master seed, with
/// sequential ids starting at 0, `VAL_ID_BASE` and `TEST_ID_BASE`.
pub fn generate_datasets(cfg: &RunConfig) -> Result<Datasets> {
    let env = cfg.env();
    Ok(Datasets {
        train: generate_split(&env, cfg, TAG_TRAIN_SET, cfg.run.n_train, 0)?,
        val: generate_split(&env, cfg, TAG_VAL_SET, cfg.run.n_val, VAL_ID_BASE)?,
        test: generate_split(&env, cfg, TAG_TEST_SET, cfg.run.n_test, TEST_ID_BASE)?,
    })
}

/// A finished training run with its value model.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub variant: Variant,
    pub seed: u64,
    pub outcome: TrainingOutcome,
    /// Zero-based epoch of the best validation accuracy.
    pub best_epoch: usize,
    /// Best validation epoch within the activation stage.
    pub activation_epoch: usize,
    pub prm: PrmParams,
    pub prm_mse: f64,
}

impl TrainRun {
    pub fn best_policy(&self) -> &PolicyParams {
        &self.outcome.epoch_checkpoints[self.best_epoch]
    }

    pub fn activation_policy(&self) -> &PolicyParams {
        &self.outcome.epoch_checkpoints[self.activation_epoch]
    }
}

pub fn train_run(cfg: &RunConfig, data: &Datasets, variant: Variant, seed: u64) -> Result<TrainRun> {
    let env = cfg.env();
    let tc = cfg.train_config(variant, seed);
    let outcome = run_training(&env, &data.train, &data.val, PolicyParams::for_env(&env), &tc)?;
    let epochs = outcome.epoch_checkpoints.len();
    if epochs == 0 {
        return Err(config_err("schedule.epochs_total", "must be at least 1"));
    }
    let best_epoch = outcome.best_epoch(0..epochs).expect("nonempty");
    let activation_epoch = outcome
        .best_epoch(0..cfg.schedule.epochs_activation.max(1))
        .expect("nonempty");
    let (prm, prm_mse) = if outcome.d_prm.is_empty() {
        log::warn!("no value-model data collected; PRM stays at zero");
        (PrmParams::zeros(env.spec().feature_dim), f64::NAN)
    } else {
        let (prm, report) = train_prm(&env, &outcome.d_prm)?;
        (prm, report.final_mse())
    };
    Ok(TrainRun {
        variant,
        seed,
        outcome,
        best_epoch,
        activation_epoch,
        prm,
        prm_mse,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| PropaError::Load {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// File name of the checkpoint after the zero-based `epoch`; metrics count
/// epochs from 1.
pub fn checkpoint_name(epoch: usize) -> String {
    format!("policy_epoch_{:02}.txt", epoch + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub output_dir: PathBuf,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub prm_mse: f64,
    pub files: Vec<PathBuf>,
}

/// Writes the instance splits, every epoch checkpoint, `policy_best.txt`,
/// `prm.txt`, `metrics.csv`, `groups.csv`, `trees.txt` (final epoch) and
/// the resolved `config.toml`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let data = generate_datasets(cfg)?;
    let run = train_run(cfg, &data, cfg.grpo.variant, cfg.train_seed(0))?;
    let dir = &cfg.run.output_dir;
    let mut files = write_datasets(dir, &data)?;
    let mut emit = |name: &str, f: &mut dyn FnMut(&mut BufWriter<File>) -> Result<()>| -> Result<()> {
        let path = dir.join(name);
        let mut out = create(&path)?;
        f(&mut out)?;
        out.flush()?;
        files.push(path);
        Ok(())
    };
    emit("config.toml", &mut |o| Ok(o.write_all(cfg.to_toml().as_bytes())?))?;
    for (e, p) in run.outcome.epoch_checkpoints.iter().enumerate() {
        emit(&checkpoint_name(e), &mut |o| write_checkpoint(o, p))?;
    }
    emit("policy_best.txt", &mut |o| write_checkpoint(o, run.best_policy()))?;
    emit("prm.txt", &mut |o| write_prm_checkpoint(o, &run.prm))?;
    emit("metrics.csv", &mut |o| write_metrics(o, &run.outcome.metrics))?;
    emit("groups.csv", &mut |o| write_group_records(o, &run.outcome.group_records))?;
    emit("trees.txt", &mut |o| {
        for t in &run.outcome.final_trees {
            write_tree_dump(&mut *o, t)?;
        }
        Ok(())
    })?;
    let best_val_accuracy = run.outcome.epoch_accuracies()[run.best_epoch];
    Ok(TrainSummary {
        output_dir: dir.clone(),
        best_epoch: run.best_epoch,
        best_val_accuracy,
        prm_mse: run.prm_mse,
        files,
    })
}

fn write_datasets(dir: &Path, data: &Datasets) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (name, split) in [("train.txt", &data.train), ("val.txt", &data.val), ("test.txt", &data.test)] {
        let path = dir.join(name);
        let mut out = create(&path)?;
        write_instances(&mut out, split)?;
        out.flush()?;
        files.push(path);
    }
    Ok(files)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    write_datasets(&cfg.run.output_dir, &generate_datasets(cfg)?)
}

/// One evaluated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub instance_id: u64,
    pub strategy: Strategy,
    pub answer: Option<i64>,
    pub correct: bool,
    pub mean_q: Option<f64>,
    pub nodes_expanded: usize,
    pub fallback_used: bool,
}

pub fn accuracy(rows: &[EvalRow]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().filter(|r| r.correct).count() as f64 / rows.len() as f64
}

fn solve(
    cfg: &RunConfig,
    instance: &ProblemInstance,
    policy: &PolicyParams,
    scorer: &(dyn ChainScorer + Sync),
    strategy: Strategy,
    repeat: usize,
) -> Result<InferenceResult> {
    let env = cfg.env();
    let seed = cfg.eval_seed(repeat, instance.instance_id);
    match strategy {
        Strategy::Greedy => greedy_search(&env, instance, policy, cfg.mcts.max_depth),
        Strategy::BestN => bestn_search(
            &env,
            instance,
            policy,
            scorer,
            cfg.inference.n,
            &cfg.sampling_config(seed),
            cfg.mcts.max_depth,
        ),
        Strategy::MctsPrm => mcts_with_prm(&env, instance, policy, scorer, &cfg.mcts_config(seed)),
    }
}

/// Runs one strategy over `instances`, split across `run.workers` threads.
/// Rows come back in instance order regardless of the worker count.
pub fn evaluate(
    cfg: &RunConfig,
    instances: &[ProblemInstance],
    policy: &PolicyParams,
    scorer: &(dyn ChainScorer + Sync),
    strategy: Strategy,
    repeat: usize,
) -> Result<Vec<EvalRow>> {
    let one = |x: &ProblemInstance| -> Result<EvalRow> {
        let r = solve(cfg, x, policy, scorer, strategy, repeat)?;
        Ok(EvalRow {
            instance_id: x.instance_id,
            strategy,
            answer: r.answer,
            correct: r.answer == Some(x.truth),
            mean_q: r.mean_q,
            nodes_expanded: r.nodes_expanded,
            fallback_used: r.fallback_used,
        })
    };
    let workers = cfg.run.workers.min(instances.len()).max(1);
    if workers == 1 {
        return instances.iter().map(one).collect();
    }
    let chunk = instances.len().div_ceil(workers);
    let parts: Vec<Result<Vec<EvalRow>>> = std::thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|part| s.spawn(move || part.iter().map(one).collect::<Result<Vec<_>>>()))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut rows = Vec::with_capacity(instances.len());
    for p in parts {
        rows.extend(p?);
    }
    Ok(rows)
}

/// Writes `instance_id,strategy,answer,correct,mean_q,nodes_expanded,fallback_used`.
pub fn write_eval_rows<W: Write>(out: W, rows: &[EvalRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "instance_id",
        "strategy",
        "answer",
        "correct",
        "mean_q",
        "nodes_expanded",
        "fallback_used",
    ])?;
    for r in rows {
        w.write_record([
            r.instance_id.to_string(),
            r.strategy.name().to_string(),
            r.answer.map(|a| a.to_string()).unwrap_or_default(),
            u8::from(r.correct).to_string(),
            r.mean_q.map(|q| format!("{q:.6}")).unwrap_or_default(),
            r.nodes_expanded.to_string(),
            u8::from(r.fallback_used).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Which value model guides search at evaluation time.
#[derive(Debug, Clone)]
pub enum ScorerSource {
    Checkpoint(PathBuf),
    /// Scores 1 on prefixes of the teacher trace and 0 elsewhere.
    Oracle,
}

#[derive(Debug, Clone)]
pub struct EvalRequest {
    pub policy: PathBuf,
    pub scorer: ScorerSource,
    pub strategy: Strategy,
    /// Instances to evaluate; the configured test split when `None`.
    pub instances: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub strategy: Strategy,
    pub per_seed: Vec<f64>,
    pub mean_accuracy: f64,
    pub csv: PathBuf,
}

pub fn load_policy(path: &Path, feature_dim: usize) -> Result<PolicyParams> {
    let p = read_checkpoint(open(path)?)?;
    if p.feature_dim() != feature_dim || p.vocab() != PrefixSum::VOCAB {
        return Err(PropaError::Load {
            path: path.to_path_buf(),
            message: format!(
                "checkpoint is {}x{}, environment needs {}x{feature_dim}",
                p.vocab(),
                p.feature_dim(),
                PrefixSum::VOCAB
            ),
        });
    }
    Ok(p)
}

pub fn load_prm(path: &Path, feature_dim: usize) -> Result<PrmParams> {
    let p = read_prm_checkpoint(open(path)?)?;
    if p.weights.len() != feature_dim {
        return Err(PropaError::Load {
            path: path.to_path_buf(),
            message: format!("PRM has {} weights, environment needs {feature_dim}", p.weights.len()),
        });
    }
    Ok(p)
}

/// Evaluates one strategy `run.n_seeds` times and writes
/// `eval_<strategy>.csv`, the repeats' rows one block after another.
pub fn cmd_eval(cfg: &RunConfig, req: &EvalRequest) -> Result<EvalSummary> {
    let env = cfg.env();
    let dim = env.spec().feature_dim;
    let policy = load_policy(&req.policy, dim)?;
    let instances = match &req.instances {
        Some(path) => read_instances(open(path)?)?,
        None => generate_datasets(cfg)?.test,
    };
    let prm;
    let oracle = OracleScorer { env: &env };
    let prm_scorer;
    let scorer: &(dyn ChainScorer + Sync) = match &req.scorer {
        ScorerSource::Checkpoint(path) => {
            prm = load_prm(path, dim)?;
            prm_scorer = PrmScorer { env: &env, prm: &prm };
            &prm_scorer
        }
        ScorerSource::Oracle => &oracle,
    };
    let mut rows = Vec::new();
    let mut per_seed = Vec::new();
    for repeat in 0..cfg.run.n_seeds {
        let r = evaluate(cfg, &instances, &policy, scorer, req.strategy, repeat)?;
        per_seed.push(accuracy(&r));
        rows.extend(r);
    }
    let csv = cfg.run.output_dir.join(format!("eval_{}.csv", req.strategy.name()));
    let mut out = create(&csv)?;
    write_eval_rows(&mut out, &rows)?;
    out.flush()?;
    Ok(EvalSummary {
        strategy: req.strategy,
        mean_accuracy: per_seed.iter().sum::<f64>() / per_seed.len() as f64,
        per_seed,
        csv,
    })
}

/// One (variant, strategy, seed) cell of an ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub strategy: Strategy,
    pub seed: usize,
    pub accuracy: f64,
    pub n_instances: usize,
    pub mean_nodes_expanded: f64,
    pub fallback_rate: f64,
}

#[derive(Debug, Clone)]
pub struct Ablation {
    pub rows: Vec<AblationRow>,
    /// Greedy test accuracy of the activation checkpoint, per seed.
    pub activation: Vec<f64>,
    pub runs: Vec<TrainRun>,
}

impl Ablation {
    /// Mean accuracy over seeds.
    pub fn mean(&self, variant: Variant, strategy: Strategy) -> f64 {
        let v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.strategy == strategy)
            .map(|r| r.accuracy)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn activation_mean(&self) -> f64 {
        self.activation.iter().sum::<f64>() / self.activation.len().max(1) as f64
    }

    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &TrainRun> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }
}

/// Trains every variant for `run.n_seeds` seeds and evaluates the best
/// validation checkpoint of each with all three strategies on the test split.
pub fn run_ablation(cfg: &RunConfig) -> Result<Ablation> {
    let env = cfg.env();
    let data = generate_datasets(cfg)?;
    let mut rows = Vec::new();
    let mut activation = Vec::new();
    let mut runs = Vec::new();
    for repeat in 0..cfg.run.n_seeds {
        let seed = cfg.train_seed(repeat);
        for variant in Variant::ALL {
            let run = train_run(cfg, &data, variant, seed)?;
            if variant == Variant::Full {
                activation.push(greedy_accuracy(&env, run.activation_policy(), &data.test, cfg.mcts.max_depth)?);
            }
            let scorer = PrmScorer { env: &env, prm: &run.prm };
            for strategy in Strategy::ALL {
                let r = evaluate(cfg, &data.test, run.best_policy(), &scorer, strategy, repeat)?;
                let n = r.len().max(1) as f64;
                rows.push(AblationRow {
                    variant,
                    strategy,
                    seed: repeat,
                    accuracy: accuracy(&r),
                    n_instances: r.len(),
                    mean_nodes_expanded: r.iter().map(|x| x.nodes_expanded as f64).sum::<f64>() / n,
                    fallback_rate: r.iter().filter(|x| x.fallback_used).count() as f64 / n,
                });
            }
            runs.push(run);
        }
    }
    Ok(Ablation {
        rows,
        activation,
        runs,
    })
}

pub fn write_ablation_rows<W: Write>(out: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "variant",
        "strategy",
        "seed",
        "accuracy",
        "n_instances",
        "mean_nodes_expanded",
        "fallback_rate",
    ])?;
    for r in rows {
        w.write_record([
            r.variant.name().to_string(),
            r.strategy.name().to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.accuracy),
            r.n_instances.to_string(),
            format!("{:.6}", r.mean_nodes_expanded),
            format!("{:.6}", r.fallback_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `ablation.csv`, `activation.csv`, and per run
/// `metrics_<variant>_s<seed>.csv` and `groups_<variant>_s<seed>.csv`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Ablation> {
    let ab = run_ablation(cfg)?;
    let dir = &cfg.run.output_dir;
    let mut out = create(&dir.join("ablation.csv"))?;
    write_ablation_rows(&mut out, &ab.rows)?;
    out.flush()?;

    let mut w = csv::Writer::from_writer(create(&dir.join("activation.csv"))?);
    w.write_record(["seed", "accuracy"])?;
    for (s, a) in ab.activation.iter().enumerate() {
        w.write_record([s.to_string(), format!("{a:.6}")])?;
    }
    w.flush()?;

    let n_variants = Variant::ALL.len();
    for (i, run) in ab.runs.iter().enumerate() {
        let tag = format!("{}_s{}", run.variant.name(), i / n_variants);
        let mut out = create(&dir.join(format!("metrics_{tag}.csv")))?;
        write_metrics(&mut out, &run.outcome.metrics)?;
        out.flush()?;
        let mut out = create(&dir.join(format!("groups_{tag}.csv")))?;
        write_group_records(&mut out, &run.outcome.group_records)?;
        out.flush()?;
    }
    Ok(ab)
}

/// Spearman rank correlation, ties given their average rank. `None` when
/// either side is constant or the lengths differ.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Correlation between flush index and GRPO-routed instances per flush.
pub fn grpo_trend(outcome: &TrainingOutcome) -> Option<f64> {
    let (x, y): (Vec<f64>, Vec<f64>) = outcome
        .flush_rows()
        .map(|m| (m.flush_idx.unwrap_or(0) as f64, m.n_grpo_instances as f64))
        .unzip();
    spearman(&x, &y)
}

/// Human-readable view of dumped trees with recomputed `Q` and UCT, followed
/// by any audit violations.
pub fn inspect_trees<E: ReasoningEnv>(env: &E, trees: &[SearchTree], c: f64) -> String {
    let mut s = String::new();
    for tree in trees {
        let inst = &tree.instance;
        let _ = writeln!(
            s,
            "instance {} digits {:?} truth {} ({} nodes, {} rollouts)",
            inst.instance_id,
            inst.inputs,
            inst.truth,
            tree.len(),
            tree.rollout_log.len()
        );
        let mut stack = vec![SearchTree::ROOT];
        while let Some(id) = stack.pop() {
            let node = tree.node(id);
            let label = node.step.map_or("ROOT".to_string(), |t| t.to_string());
            let q = node.q().map_or("-".to_string(), |q| format!("{q:.4}"));
            let uct = node.parent_id.map_or("-".to_string(), |p| {
                let v = uct_score(node, tree.node(p).n, c);
                if v.is_finite() {
                    format!("{v:.4}")
                } else {
                    "inf".to_string()
                }
            });
            let _ = writeln!(
                s,
                "{:indent$}#{id} {label} W={} N={} Q={q} UCT={uct}{}",
                "",
                node.w,
                node.n,
                if node.terminal { " terminal" } else { "" },
                indent = 2 * node.depth + 2
            );
            stack.extend(node.children.iter().rev());
        }
        let violations = audit_tree(tree, env, true);
        if violations.is_empty() {
            s.push_str("  audit: ok\n");
        } else {
            for v in violations {
                let _ = writeln!(s, "  audit: {v}");
            }
        }
    }
    s
}

pub fn cmd_inspect_tree(cfg: &RunConfig, dump: &Path) -> Result<String> {
    let env = cfg.env();
    let trees = read_tree_dumps(&env, open(dump)?)?;
    Ok(inspect_trees(&env, &trees, cfg.mcts.c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(back.to_toml(), cfg.to_toml());
    }

    #[test]
    fn missing_field_is_named() {
        let text = RunConfig::default().to_toml().replace("lambda = 40\n", "");
        match RunConfig::from_toml(&text, &[]) {
            Err(PropaError::Config { field, .. }) => assert_eq!(field, "lambda"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_field_is_rejected() {
        let text = RunConfig::default().to_toml().replace("lambda = 40", "lambda = 40\nlamda = 3");
        assert!(matches!(RunConfig::from_toml(&text, &[]), Err(PropaError::Config { .. })));
    }

    #[test]
    fn overrides_apply() {
        let cfg = RunConfig::from_toml(
            &RunConfig::default().to_toml(),
            &["schedule.lambda=7".into(), "inference.strategy=greedy".into(), "run.output_dir=/tmp/x".into()],
        )
        .unwrap();
        assert_eq!(cfg.schedule.lambda, 7);
        assert_eq!(cfg.inference.strategy, Strategy::Greedy);
    }

    #[test]
    fn invalid_values_name_their_field() {
        let mut cfg = RunConfig::default();
        cfg.env.d_max = 9;
        assert!(matches!(cfg.validate(), Err(PropaError::Config { field, .. }) if field == "env.d_min"));
    }

    #[test]
    fn top_k_is_clamped_to_vocab() {
        let mut cfg = RunConfig::default();
        cfg.sampling.top_k = 500;
        cfg.validate().unwrap();
        assert_eq!(cfg.sampling_config(0).top_k, PrefixSum::VOCAB);
    }

    #[test]
    fn datasets_are_seeded_and_sequential() {
        let cfg = RunConfig::default();
        let a = generate_datasets(&cfg).unwrap();
        assert_eq!(a, generate_datasets(&cfg).unwrap());
        assert_eq!(a.train.len(), 200);
        assert!(a.train.iter().enumerate().all(|(i, x)| x.instance_id == i as u64));
        assert_eq!(a.val[0].instance_id, VAL_ID_BASE);
        assert_eq!(a.test[3].instance_id, TEST_ID_BASE + 3);
        assert!(a.test.iter().all(|x| (1..=3).contains(&x.inputs.len())));
    }

    #[test]
    fn spearman_matches_hand_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), None);
        // ranks [1,2,3,4] vs [1.5,1.5,3,4]
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[0.0, 0.0, 1.0, 2.0]).unwrap();
        assert!((r - 0.9486832980505138).abs() < 1e-12);
    }

    #[test]
    fn parallel_evaluation_matches_serial() {
        let mut cfg = RunConfig::default();
        cfg.run.n_test = 30;
        let data = generate_datasets(&cfg).unwrap();
        let env = cfg.env();
        let policy = PolicyParams::for_env(&env);
        let oracle = OracleScorer { env: &env };
        let serial = evaluate(&cfg, &data.test, &policy, &oracle, Strategy::MctsPrm, 0).unwrap();
        cfg.run.workers = 4;
        let parallel = evaluate(&cfg, &data.test, &policy, &oracle, Strategy::MctsPrm, 0).unwrap();
        assert_eq!(serial, parallel);
    }
}

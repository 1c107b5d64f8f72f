//! Linear-softmax step policy.
//!
//! Logits are `W · φ(chain)` with `W` of shape `vocab × feature_dim`. Features
//! are sparse, so every pass only touches the active columns of `W`.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Chain, Features, ReasoningEnv, StepToken};
use crate::error::{invalid, PropaError, Result};
use crate::grpo_data::AdvantageGroup;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: usize,
    dim: usize,
    weights: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        Self {
            vocab,
            dim,
            weights: vec![0.0; vocab * dim],
            version: 0,
        }
    }

    pub fn for_env<E: ReasoningEnv>(env: &E) -> Self {
        let spec = env.spec();
        Self::zeros(spec.vocab_size, spec.feature_dim)
    }

    pub fn from_weights(vocab: usize, dim: usize, weights: Vec<f64>, version: u64) -> Result<Self> {
        if weights.len() != vocab * dim {
            return Err(invalid(format!(
                "expected {} weights, got {}",
                vocab * dim,
                weights.len()
            )));
        }
        Ok(Self {
            vocab,
            dim,
            weights,
            version,
        })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn get(&self, token: usize, feature: usize) -> f64 {
        self.weights[token * self.dim + feature]
    }

    pub fn set(&mut self, token: usize, feature: usize, value: f64) {
        self.weights[token * self.dim + feature] = value;
    }

    pub fn logits(&self, features: &Features) -> Vec<f64> {
        debug_assert_eq!(features.dim(), self.dim);
        (0..self.vocab)
            .map(|v| {
                let row = &self.weights[v * self.dim..(v + 1) * self.dim];
                features.active().iter().map(|&(j, x)| row[j] * x).sum()
            })
            .collect()
    }

    /// `self += scale * grad`, bumping the version.
    fn apply(&mut self, grad: &[f64], scale: f64) {
        for (w, g) in self.weights.iter_mut().zip(grad) {
            *w += scale * g;
        }
        self.version += 1;
    }
}

/// Frozen copy of the policy used as the ratio and KL reference for a batch.
#[derive(Debug, Clone)]
pub struct ReferenceSnapshot(Arc<PolicyParams>);

impl ReferenceSnapshot {
    pub fn of(params: &PolicyParams) -> Self {
        Self(Arc::new(params.clone()))
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub rng_seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.2,
            top_k: 50,
            top_p: 0.95,
            rng_seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(invalid("temperature must be positive"));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return Err(invalid(format!("top_k must be in 1..={vocab}")));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(invalid("top_p must be in (0, 1]"));
        }
        Ok(())
    }

    pub fn greedy() -> Self {
        Self {
            temperature: 1e-9,
            top_k: 1,
            top_p: 1.0,
            rng_seed: 0,
        }
    }
}

/// Numerically stable softmax at temperature 1.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(PropaError::Numerical("non-finite logit".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Lowest-id index of the maximum entry.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn step_distribution<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    chain: &Chain,
) -> Result<Vec<f64>> {
    let features = env.featurize(chain)?;
    softmax(&params.logits(&features))
}

/// Temperature scaling, then top-k, then top-p, then renormalization.
///
/// Returns the sampling distribution over the full vocabulary with truncated
/// tokens set to zero. Below temperature 1e-6 the result is the argmax one-hot.
pub fn truncated_distribution(logits: &[f64], cfg: &SamplingConfig) -> Result<Vec<f64>> {
    let n = logits.len();
    if cfg.temperature < 1e-6 {
        let mut out = vec![0.0; n];
        out[argmax(logits)] = 1.0;
        return Ok(out);
    }
    let scaled: Vec<f64> = logits.iter().map(|z| z / cfg.temperature).collect();
    let probs = softmax(&scaled)?;

    // descending probability, ascending id on ties
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order.truncate(cfg.top_k.clamp(1, n));

    let kept_mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut cum = 0.0;
    let mut support = 0;
    for &i in &order {
        cum += probs[i] / kept_mass;
        support += 1;
        if cum >= cfg.top_p - 1e-12 {
            break;
        }
    }
    order.truncate(support);
    assert!(!order.is_empty(), "truncation left an empty support");

    let mass: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; n];
    for &i in &order {
        out[i] = probs[i] / mass;
    }
    Ok(out)
}

/// Uniform draw in `[0, 1)` fixed by `(seed, draw_index)`.
pub fn uniform_draw(seed: u64, draw_index: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw_index);
    rng.gen::<f64>()
}

/// Inverse-CDF pick over token ids in ascending order.
pub fn pick(dist: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_nonzero = i;
            if u < cum {
                return i;
            }
        }
    }
    last_nonzero
}

pub fn sample_step<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    chain: &Chain,
    cfg: &SamplingConfig,
    draw_index: u64,
) -> Result<StepToken> {
    let features = env.featurize(chain)?;
    let dist = truncated_distribution(&params.logits(&features), cfg)?;
    let id = pick(&dist, uniform_draw(cfg.rng_seed, draw_index));
    Ok(env.token(id))
}

pub fn greedy_step<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    chain: &Chain,
) -> Result<StepToken> {
    let features = env.featurize(chain)?;
    Ok(env.token(argmax(&params.logits(&features))))
}

/// `grad += scale * (onehot(step) - probs) ⊗ φ`, touching active columns only.
fn accumulate_score(
    grad: &mut [f64],
    dim: usize,
    probs: &[f64],
    step: usize,
    features: &Features,
    scale: f64,
) {
    for (v, &p) in probs.iter().enumerate() {
        let coeff = scale * (f64::from(u8::from(v == step)) - p);
        if coeff == 0.0 {
            continue;
        }
        for &(j, x) in features.active() {
            grad[v * dim + j] += coeff * x;
        }
    }
}

/// Log-probability of `step` and its gradient w.r.t. the weights (row-major
/// `vocab × feature_dim`).
pub fn log_prob_and_grad<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    chain: &Chain,
    step: StepToken,
) -> Result<(f64, Vec<f64>)> {
    if step.id >= params.vocab {
        return Err(invalid(format!("token {} outside vocabulary", step.id)));
    }
    let features = env.featurize(chain)?;
    let probs = softmax(&params.logits(&features))?;
    let mut grad = vec![0.0; params.weights.len()];
    accumulate_score(&mut grad, params.dim, &probs, step.id, &features, 1.0);
    Ok((probs[step.id].ln(), grad))
}

fn trace_steps(trace: &Chain) -> impl Iterator<Item = (Chain, StepToken)> + '_ {
    (0..trace.len()).map(move |i| {
        let prefix = Chain {
            instance: trace.instance.clone(),
            steps: trace.steps[..i].to_vec(),
        };
        (prefix, trace.steps[i])
    })
}

/// Mean token-level negative log-likelihood of a batch of traces.
pub fn sft_loss<E: ReasoningEnv>(env: &E, params: &PolicyParams, traces: &[Chain]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for trace in traces {
        for (prefix, step) in trace_steps(trace) {
            let probs = step_distribution(env, params, &prefix)?;
            total -= probs[step.id].ln();
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("SFT batch has no steps"));
    }
    Ok(total / count as f64)
}

/// One full-batch gradient step on the mean token-level NLL.
pub fn sft_update<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    traces: &[Chain],
    lr: f64,
) -> Result<PolicyParams> {
    if traces.is_empty() {
        return Err(invalid("empty SFT batch"));
    }
    let mut grad = vec![0.0; params.weights.len()];
    let mut count = 0usize;
    for trace in traces {
        for (prefix, step) in trace_steps(trace) {
            let features = env.featurize(&prefix)?;
            let probs = softmax(&params.logits(&features))?;
            accumulate_score(&mut grad, params.dim, &probs, step.id, &features, 1.0);
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("SFT batch has no steps"));
    }
    let mut next = params.clone();
    next.apply(&grad, lr / count as f64);
    Ok(next)
}

/// Exact token-level `KL(p ‖ q)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * (pi.ln() - qi.ln()))
        .sum()
}

pub fn policy_kl<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    reference: &ReferenceSnapshot,
    chain: &Chain,
) -> Result<f64> {
    let features = env.featurize(chain)?;
    let p = softmax(&params.logits(&features))?;
    let q = softmax(&reference.params().logits(&features))?;
    Ok(kl_divergence(&p, &q))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoParams {
    pub lr: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
}

impl Default for GrpoParams {
    fn default() -> Self {
        Self {
            lr: 1.0,
            clip_eps: 0.2,
            kl_beta: 1e-3,
        }
    }
}

fn check_groups(batch: &[AdvantageGroup]) -> Result<()> {
    for g in batch {
        let k = g.group.children.len();
        if k < 2 || g.advantages.len() != k {
            return Err(invalid(format!(
                "group with {k} children and {} advantages",
                g.advantages.len()
            )));
        }
    }
    Ok(())
}

/// Clipped surrogate minus KL penalty, averaged over every child in the batch,
/// plus its gradient. Each child contributes its single next-step token only.
pub fn grpo_objective<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    reference: &ReferenceSnapshot,
    batch: &[AdvantageGroup],
    clip_eps: f64,
    kl_beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_groups(batch)?;
    let dim = params.dim;
    let mut grad = vec![0.0; params.weights.len()];
    let mut value = 0.0;
    let mut count = 0usize;
    for g in batch {
        let features = env.featurize(&g.group.parent_chain)?;
        let p = softmax(&params.logits(&features))?;
        let q = softmax(&reference.params().logits(&features))?;
        let kl = kl_divergence(&p, &q);
        let k = g.group.children.len();
        for (child, &adv) in g.group.children.iter().zip(&g.advantages) {
            let a = child.step.id;
            let ratio = p[a] / q[a];
            let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
            value += (ratio * adv).min(clipped * adv) - kl_beta * kl;
            let clip_active = (adv > 0.0 && ratio > 1.0 + clip_eps)
                || (adv < 0.0 && ratio < 1.0 - clip_eps);
            if !clip_active && adv != 0.0 {
                // d(r A) = A r ∇log π(a)
                accumulate_score(&mut grad, dim, &p, a, &features, adv * ratio);
            }
        }
        if kl_beta != 0.0 {
            // dKL/dz_v = p_v (log p_v - log q_v - KL), once per child
            let scale = -kl_beta * k as f64;
            for v in 0..params.vocab {
                if p[v] == 0.0 {
                    continue;
                }
                let coeff = scale * p[v] * (p[v].ln() - q[v].ln() - kl);
                for &(j, x) in features.active() {
                    grad[v * dim + j] += coeff * x;
                }
            }
        }
        count += k;
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((value * inv, grad))
}

/// One gradient-ascent step on [`grpo_objective`].
pub fn grpo_update<E: ReasoningEnv>(
    env: &E,
    params: &PolicyParams,
    reference: &ReferenceSnapshot,
    batch: &[AdvantageGroup],
    hp: &GrpoParams,
) -> Result<PolicyParams> {
    let (_, grad) = grpo_objective(env, params, reference, batch, hp.clip_eps, hp.kl_beta)?;
    let mut next = params.clone();
    next.apply(&grad, hp.lr);
    Ok(next)
}

/// Header `vocab feature_dim version`, then one row of weights per token.
pub fn write_checkpoint<W: Write>(mut out: W, params: &PolicyParams) -> Result<()> {
    writeln!(out, "{} {} {}", params.vocab, params.dim, params.version)?;
    for row in params.weights.chunks(params.dim) {
        let line: Vec<String> = row.iter().map(|w| format!("{w:.16e}")).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<PolicyParams> {
    let mut lines = input.lines().enumerate();
    let (_, header) = lines.next().ok_or(PropaError::Parse {
        line: 1,
        message: "empty checkpoint".into(),
    })?;
    let header = header?;
    let head: Vec<u64> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e: std::num::ParseIntError| PropaError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
    let [vocab, dim, version] = head[..] else {
        return Err(PropaError::Parse {
            line: 1,
            message: "expected `vocab_size feature_dim version`".into(),
        });
    };
    let mut weights = Vec::with_capacity((vocab * dim) as usize);
    for (idx, line) in lines {
        let line = line?;
        for tok in line.split_whitespace() {
            weights.push(tok.parse::<f64>().map_err(|e| PropaError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?);
        }
    }
    PolicyParams::from_weights(vocab as usize, dim as usize, weights, version)
}

//! Reasoning environments: verifiable answers, exact teacher traces and the
//! chain featurizer shared by the step policy and the process reward model.
//!
//! A chain is a sequence of [`StepToken`]s. Exactly the `Answer` tokens end a
//! chain; the verifier only looks at the final answer value, so any credit for
//! intermediate steps has to come from tree search.

use std::fmt;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, PropaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepKind {
    Reason,
    Answer(i64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StepToken {
    pub id: usize,
    pub kind: StepKind,
}

impl StepToken {
    pub fn is_answer(&self) -> bool {
        matches!(self.kind, StepKind::Answer(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemInstance {
    pub instance_id: u64,
    pub inputs: Vec<i64>,
    pub truth: i64,
}

impl ProblemInstance {
    /// Builds a prefix-sum instance whose truth is the digit sum.
    pub fn from_digits(instance_id: u64, digits: &[i64]) -> Result<Self> {
        if digits.is_empty() || digits.len() > PrefixSum::MAX_DIGITS {
            return Err(invalid(format!("{} digits, expected 1..=5", digits.len())));
        }
        if let Some(bad) = digits.iter().find(|d| !(0..=9).contains(*d)) {
            return Err(invalid(format!("digit {bad} outside 0..=9")));
        }
        Ok(Self {
            instance_id,
            inputs: digits.to_vec(),
            truth: digits.iter().sum(),
        })
    }

    pub fn difficulty(&self) -> usize {
        self.inputs.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chain {
    pub instance: ProblemInstance,
    pub steps: Vec<StepToken>,
}

impl Chain {
    pub fn empty(instance: ProblemInstance) -> Self {
        Self {
            instance,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn last(&self) -> Option<&StepToken> {
        self.steps.last()
    }

    pub fn is_terminal(&self) -> bool {
        self.last().is_some_and(StepToken::is_answer)
    }

    pub fn answer(&self) -> Option<i64> {
        match self.last()?.kind {
            StepKind::Answer(v) => Some(v),
            StepKind::Reason => None,
        }
    }

    /// Appends a step. Nothing may follow an answer.
    pub fn push(&mut self, step: StepToken) -> Result<()> {
        if self.is_terminal() {
            return Err(PropaError::Contract("cannot extend a terminal chain".into()));
        }
        self.steps.push(step);
        Ok(())
    }

    pub fn extended(&self, step: StepToken) -> Result<Chain> {
        let mut next = self.clone();
        next.push(step)?;
        Ok(next)
    }

    pub fn token_ids(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnvSpec {
    pub vocab_size: usize,
    pub max_inputs: usize,
    pub max_depth: usize,
    pub feature_dim: usize,
}

/// Sparse binary-or-real feature vector of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    dim: usize,
    active: Vec<(usize, f64)>,
}

impl Features {
    pub fn new(dim: usize, active: Vec<(usize, f64)>) -> Self {
        debug_assert!(active.iter().all(|&(i, _)| i < dim));
        Self { dim, active }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Nonzero entries as `(index, value)`.
    pub fn active(&self) -> &[(usize, f64)] {
        &self.active
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(i, v) in &self.active {
            out[i] += v;
        }
        out
    }
}

/// Contract every environment satisfies: a binary verifier, an exact teacher
/// and a featurizer of fixed width.
pub trait ReasoningEnv: Send + Sync {
    fn spec(&self) -> EnvSpec;

    fn token(&self, id: usize) -> StepToken;

    fn generate_instance(&self, seed: u64, difficulty: usize) -> Result<ProblemInstance>;

    /// 1 iff the final answer equals the instance truth.
    fn verify_answer(&self, chain: &Chain) -> Result<u8>;

    fn teacher_trace(&self, instance: &ProblemInstance) -> Chain;

    fn featurize(&self, chain: &Chain) -> Result<Features>;
}

impl<E: ReasoningEnv + ?Sized> ReasoningEnv for &E {
    fn spec(&self) -> EnvSpec {
        (**self).spec()
    }
    fn token(&self, id: usize) -> StepToken {
        (**self).token(id)
    }
    fn generate_instance(&self, seed: u64, difficulty: usize) -> Result<ProblemInstance> {
        (**self).generate_instance(seed, difficulty)
    }
    fn verify_answer(&self, chain: &Chain) -> Result<u8> {
        (**self).verify_answer(chain)
    }
    fn teacher_trace(&self, instance: &ProblemInstance) -> Chain {
        (**self).teacher_trace(instance)
    }
    fn featurize(&self, chain: &Chain) -> Result<Features> {
        (**self).featurize(chain)
    }
}

/// Running-sum task: digits `x_1..x_d`, the correct chain writes every prefix
/// sum as a `Reason` step and finishes with `Answer(total)`.
///
/// Token ids: `Reason(v)` is `v`, `Answer(v)` is `46 + v`, for `v` in `0..=45`.
///
/// Features are three one-hot blocks: last step token (92), position clipped
/// to 7 (8), and the next unread digit or a sentinel (11). The empty chain has
/// no last token and lights slot 0 of the first block; position 0 tells it
/// apart from a real `Reason(0)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PrefixSum {
    pub max_depth: usize,
}

impl PrefixSum {
    pub const MAX_DIGITS: usize = 5;
    pub const MAX_VALUE: i64 = 45;
    pub const VOCAB: usize = 92;
    pub const POSITIONS: usize = 8;
    pub const DIGIT_SLOTS: usize = 11;
    pub const FEATURE_DIM: usize = Self::VOCAB + Self::POSITIONS + Self::DIGIT_SLOTS;

    pub fn new() -> Self {
        Self { max_depth: 8 }
    }

    pub fn reason(v: i64) -> StepToken {
        assert!((0..=Self::MAX_VALUE).contains(&v), "value {v} out of range");
        StepToken {
            id: v as usize,
            kind: StepKind::Reason,
        }
    }

    pub fn answer(v: i64) -> StepToken {
        assert!((0..=Self::MAX_VALUE).contains(&v), "value {v} out of range");
        StepToken {
            id: 46 + v as usize,
            kind: StepKind::Answer(v),
        }
    }
}

impl ReasoningEnv for PrefixSum {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            vocab_size: Self::VOCAB,
            max_inputs: Self::MAX_DIGITS,
            max_depth: self.max_depth,
            feature_dim: Self::FEATURE_DIM,
        }
    }

    fn token(&self, id: usize) -> StepToken {
        assert!(id < Self::VOCAB, "token id {id} out of vocabulary");
        if id < 46 {
            Self::reason(id as i64)
        } else {
            Self::answer(id as i64 - 46)
        }
    }

    fn generate_instance(&self, seed: u64, difficulty: usize) -> Result<ProblemInstance> {
        if !(1..=Self::MAX_DIGITS).contains(&difficulty) {
            return Err(invalid(format!("difficulty {difficulty} outside 1..=5")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(difficulty as u64);
        let digits: Vec<i64> = (0..difficulty).map(|_| rng.gen_range(0..=9)).collect();
        ProblemInstance::from_digits(seed, &digits)
    }

    fn verify_answer(&self, chain: &Chain) -> Result<u8> {
        chain
            .answer()
            .map(|a| u8::from(a == chain.instance.truth))
            .ok_or(PropaError::NotTerminal)
    }

    fn teacher_trace(&self, instance: &ProblemInstance) -> Chain {
        let mut steps = Vec::with_capacity(instance.inputs.len() + 1);
        let mut acc = 0;
        for &x in &instance.inputs {
            acc += x;
            steps.push(Self::reason(acc));
        }
        steps.push(Self::answer(acc));
        Chain {
            instance: instance.clone(),
            steps,
        }
    }

    fn featurize(&self, chain: &Chain) -> Result<Features> {
        if chain.len() > self.max_depth {
            return Err(invalid(format!(
                "chain length {} exceeds max depth {}",
                chain.len(),
                self.max_depth
            )));
        }
        let last = chain.last().map_or(0, |s| s.id);
        let pos = chain.len().min(Self::POSITIONS - 1);
        let next = chain
            .instance
            .inputs
            .get(chain.len())
            .map_or(10, |&d| d as usize);
        Ok(Features::new(
            Self::FEATURE_DIM,
            vec![
                (last, 1.0),
                (Self::VOCAB + pos, 1.0),
                (Self::VOCAB + Self::POSITIONS + next, 1.0),
            ],
        ))
    }
}

impl fmt::Display for StepToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            StepKind::Reason => write!(f, "R{}", self.id),
            StepKind::Answer(v) => write!(f, "A{v}"),
        }
    }
}

/// Writes `instance_id,d,digits...,truth`, one instance per line.
pub fn write_instances<W: Write>(mut out: W, instances: &[ProblemInstance]) -> Result<()> {
    for inst in instances {
        write!(out, "{},{}", inst.instance_id, inst.inputs.len())?;
        for d in &inst.inputs {
            write!(out, ",{d}")?;
        }
        writeln!(out, ",{}", inst.truth)?;
    }
    Ok(())
}

pub fn read_instances<R: BufRead>(input: R) -> Result<Vec<ProblemInstance>> {
    let mut out = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |message: String| PropaError::Parse {
            line: idx + 1,
            message,
        };
        let fields = line
            .split(',')
            .map(|f| f.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(e.to_string()))?;
        if fields.len() < 3 {
            return Err(parse_err("too few fields".into()));
        }
        let d = fields[1] as usize;
        if fields.len() != d + 3 {
            return Err(parse_err(format!("expected {} fields, got {}", d + 3, fields.len())));
        }
        let inst = ProblemInstance::from_digits(fields[0] as u64, &fields[2..2 + d])
            .map_err(|e| parse_err(e.to_string()))?;
        if inst.truth != fields[d + 2] {
            return Err(parse_err(format!("truth {} does not match digits", fields[d + 2])));
        }
        out.push(inst);
    }
    Ok(out)
}

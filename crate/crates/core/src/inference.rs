//! Test-time answer production: tree search scored by a value model, and the
//! greedy and best-of-n baselines.

use crate::env::{Chain, ProblemInstance, ReasoningEnv};
use crate::error::{PropaError, Result};
use crate::mcts::{run_search, LeafEvaluator, MctsConfig, NodeId, RolloutRecord, SearchTree};
use crate::policy::{greedy_step, sample_step, PolicyParams, SamplingConfig};
use crate::prm::ChainScorer;

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub chosen_chain: Chain,
    /// `None` when the chain hit the depth cap without answering.
    pub answer: Option<i64>,
    pub path_scores: Vec<(NodeId, f64)>,
    pub mean_q: Option<f64>,
    pub nodes_expanded: usize,
    pub fallback_used: bool,
}

/// Scores leaves with a value model instead of a rollout.
pub struct ScorerEvaluator<'a, S: ?Sized> {
    pub scorer: &'a S,
}

impl<S: ChainScorer + ?Sized> LeafEvaluator for ScorerEvaluator<'_, S> {
    fn evaluate(&mut self, tree: &mut SearchTree, node_id: NodeId) -> Result<f64> {
        let reward = self.scorer.score(&tree.chain(node_id))?.clamp(0.0, 1.0);
        tree.rollout_log.push(RolloutRecord {
            leaf: node_id,
            continuation: Vec::new(),
            reward,
        });
        Ok(reward)
    }
}

/// Mean `Q` along each visited terminal's root path. The root itself is
/// counted only with `include_root`.
pub fn terminal_path_scores(tree: &SearchTree, include_root: bool) -> Vec<(NodeId, f64)> {
    tree.terminals()
        .filter(|t| t.n >= 1)
        .map(|t| {
            let qs: Vec<f64> = tree
                .path(t.node_id)
                .into_iter()
                .filter(|&id| include_root || id != SearchTree::ROOT)
                .map(|id| tree.node(id).q().unwrap_or(0.0))
                .collect();
            (t.node_id, qs.iter().sum::<f64>() / qs.len() as f64)
        })
        .collect()
}

/// Terminal with the highest mean path value (root excluded); lowest id wins
/// ties.
pub fn select_terminal(tree: &SearchTree) -> Result<(NodeId, f64)> {
    argmax_score(&terminal_path_scores(tree, false)).ok_or(PropaError::NoTerminal)
}

fn argmax_score(scores: &[(NodeId, f64)]) -> Option<(NodeId, f64)> {
    let mut best: Option<(NodeId, f64)> = None;
    for &(id, s) in scores {
        best = match best {
            Some((bid, bs)) if bs > s || (bs == s && bid < id) => Some((bid, bs)),
            _ => Some((id, s)),
        };
    }
    best
}

fn greedy_complete<E: ReasoningEnv>(
    env: &E,
    policy: &PolicyParams,
    mut chain: Chain,
    max_depth: usize,
) -> Result<Chain> {
    while !chain.is_terminal() && chain.len() < max_depth {
        let step = greedy_step(env, policy, &chain)?;
        chain.push(step)?;
    }
    Ok(chain)
}

/// Tree search where every new leaf is scored by `scorer` and the answer is
/// read from the best terminal path. If no terminal was reached, the
/// highest-valued open leaf is completed greedily and the result is flagged.
pub fn mcts_with_prm<E: ReasoningEnv, S: ChainScorer + ?Sized>(
    env: &E,
    instance: &ProblemInstance,
    policy: &PolicyParams,
    scorer: &S,
    cfg: &MctsConfig,
) -> Result<InferenceResult> {
    cfg.validate()?;
    let mut tree = SearchTree::new(instance.clone(), cfg.sampling, cfg.max_depth);
    let mut evaluator = ScorerEvaluator { scorer };
    run_search(&mut tree, env, policy, cfg, &mut evaluator)?;
    let path_scores = terminal_path_scores(&tree, false);
    let nodes_expanded = tree.len() - 1;
    match argmax_score(&path_scores) {
        Some((id, mean_q)) => {
            let chain = tree.chain(id);
            Ok(InferenceResult {
                answer: chain.answer(),
                chosen_chain: chain,
                path_scores,
                mean_q: Some(mean_q),
                nodes_expanded,
                fallback_used: false,
            })
        }
        None => {
            let frontier = tree
                .nodes
                .iter()
                .filter(|n| n.children.is_empty() && !n.terminal && n.n >= 1)
                .map(|n| (n.node_id, n.q().unwrap_or(0.0)))
                .collect::<Vec<_>>();
            let start = argmax_score(&frontier).map_or(SearchTree::ROOT, |(id, _)| id);
            let chain = greedy_complete(env, policy, tree.chain(start), cfg.max_depth)?;
            Ok(InferenceResult {
                answer: chain.answer(),
                chosen_chain: chain,
                path_scores,
                mean_q: None,
                nodes_expanded,
                fallback_used: true,
            })
        }
    }
}

/// Argmax step until an answer or the depth cap.
pub fn greedy_search<E: ReasoningEnv>(
    env: &E,
    instance: &ProblemInstance,
    policy: &PolicyParams,
    max_depth: usize,
) -> Result<InferenceResult> {
    let chain = greedy_complete(env, policy, Chain::empty(instance.clone()), max_depth)?;
    Ok(InferenceResult {
        answer: chain.answer(),
        nodes_expanded: chain.len(),
        chosen_chain: chain,
        path_scores: Vec::new(),
        mean_q: None,
        fallback_used: false,
    })
}

/// At every depth draws `n` candidate steps, keeps the one whose extended
/// chain scores highest (first drawn wins ties) and continues.
pub fn bestn_search<E: ReasoningEnv, S: ChainScorer + ?Sized>(
    env: &E,
    instance: &ProblemInstance,
    policy: &PolicyParams,
    scorer: &S,
    n: usize,
    sampling: &SamplingConfig,
    max_depth: usize,
) -> Result<InferenceResult> {
    if n == 0 {
        return Err(crate::error::invalid("best-of-n needs n >= 1"));
    }
    let mut chain = Chain::empty(instance.clone());
    let mut draw = 0u64;
    let mut scores = Vec::new();
    while !chain.is_terminal() && chain.len() < max_depth {
        let mut best: Option<(Chain, f64)> = None;
        for _ in 0..n {
            let step = sample_step(env, policy, &chain, sampling, draw)?;
            draw += 1;
            let candidate = chain.extended(step)?;
            let score = scorer.score(&candidate)?;
            if best.as_ref().is_none_or(|(_, s)| score > *s) {
                best = Some((candidate, score));
            }
        }
        let (next, score) = best.expect("n >= 1");
        scores.push(score);
        chain = next;
    }
    let mean_q = (!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64);
    Ok(InferenceResult {
        answer: chain.answer(),
        nodes_expanded: n * chain.len(),
        chosen_chain: chain,
        path_scores: Vec::new(),
        mean_q,
        fallback_used: false,
    })
}

/// Scores 1 for chains that are a prefix of the teacher trace, else 0.
pub struct OracleScorer<'a, E> {
    pub env: &'a E,
}

impl<E: ReasoningEnv> ChainScorer for OracleScorer<'_, E> {
    fn score(&self, chain: &Chain) -> Result<f64> {
        let teacher = self.env.teacher_trace(&chain.instance);
        Ok(f64::from(u8::from(teacher.steps.starts_with(&chain.steps))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PrefixSum;
    use crate::mcts::audit_tree;
    use crate::prm::PrmParams;
    use crate::prm::PrmScorer;

    fn tree_with_paths() -> SearchTree {
        // two terminal paths with node values [0.8, 0.6] and [0.9, 0.4]
        let inst = ProblemInstance::from_digits(0, &[3]).unwrap();
        let mut tree = SearchTree::new(inst, SamplingConfig::default(), 8);
        let a = tree.add_child(0, PrefixSum::reason(3));
        let at = tree.add_child(a, PrefixSum::answer(3));
        let b = tree.add_child(0, PrefixSum::reason(4));
        let bt = tree.add_child(b, PrefixSum::answer(4));
        for (id, w, n) in [(0, 5.0, 10), (a, 4.0, 5), (at, 3.0, 5), (b, 4.5, 5), (bt, 2.0, 5)] {
            tree.nodes[id].w = w;
            tree.nodes[id].n = n;
        }
        tree
    }

    #[test]
    fn terminal_selection_by_path_mean() {
        let tree = tree_with_paths();
        let (id, mean) = select_terminal(&tree).unwrap();
        assert_eq!(id, 2);
        assert!((mean - 0.7).abs() < 1e-12);
        let scores = terminal_path_scores(&tree, false);
        assert!((scores[1].1 - 0.65).abs() < 1e-12);
    }

    #[test]
    fn no_terminal_is_an_error() {
        let inst = ProblemInstance::from_digits(0, &[3]).unwrap();
        let tree = SearchTree::new(inst, SamplingConfig::default(), 8);
        assert!(matches!(select_terminal(&tree), Err(PropaError::NoTerminal)));
    }

    #[test]
    fn greedy_on_uniform_policy_repeats_lowest_token() {
        let env = PrefixSum::new();
        let policy = PolicyParams::for_env(&env);
        let inst = ProblemInstance::from_digits(0, &[3, 1]).unwrap();
        let r = greedy_search(&env, &inst, &policy, 8).unwrap();
        assert_eq!(r.chosen_chain.steps, vec![PrefixSum::reason(0); 8]);
        assert_eq!(r.answer, None);
    }

    #[test]
    fn constant_prm_tree_stays_consistent() {
        let env = PrefixSum::new();
        let policy = crate::policy::sft_update(
            &env,
            &PolicyParams::for_env(&env),
            &[env.teacher_trace(&ProblemInstance::from_digits(0, &[2]).unwrap())],
            2.0,
        )
        .unwrap();
        let inst = ProblemInstance::from_digits(0, &[2]).unwrap();
        let prm = PrmParams::constant(111, 0.5);
        let scorer = PrmScorer { env: &env, prm: &prm };
        let cfg = MctsConfig::default().with_seed(3);
        let r = mcts_with_prm(&env, &inst, &policy, &scorer, &cfg).unwrap();
        if !r.fallback_used {
            assert!(r.path_scores.iter().all(|&(_, s)| (s - 0.5).abs() < 1e-12));
            let lowest = r.path_scores.iter().map(|p| p.0).min().unwrap();
            assert_eq!(r.mean_q, Some(0.5));
            let mut tree = SearchTree::new(inst.clone(), cfg.sampling, cfg.max_depth);
            run_search(&mut tree, &env, &policy, &cfg, &mut ScorerEvaluator { scorer: &scorer }).unwrap();
            assert_eq!(tree.chain(lowest), r.chosen_chain);
            assert!(audit_tree(&tree, &env, false).is_empty());
        }
    }

    #[test]
    fn single_iteration_is_reproducible() {
        let env = PrefixSum::new();
        let policy = PolicyParams::for_env(&env);
        let inst = ProblemInstance::from_digits(0, &[2, 5]).unwrap();
        let prm = PrmParams::constant(111, 0.3);
        let scorer = PrmScorer { env: &env, prm: &prm };
        let cfg = MctsConfig { iterations: 1, ..MctsConfig::default() };
        let a = mcts_with_prm(&env, &inst, &policy, &scorer, &cfg).unwrap();
        assert!(a.nodes_expanded <= cfg.k);
        assert_eq!(a, mcts_with_prm(&env, &inst, &policy, &scorer, &cfg).unwrap());
    }

    #[test]
    fn best_of_one_is_a_sampled_path() {
        let env = PrefixSum::new();
        let policy = PolicyParams::for_env(&env);
        let inst = ProblemInstance::from_digits(0, &[2, 5]).unwrap();
        let prm = PrmParams::constant(111, 0.3);
        let scorer = PrmScorer { env: &env, prm: &prm };
        let sampling = SamplingConfig { rng_seed: 11, ..Default::default() };
        let r = bestn_search(&env, &inst, &policy, &scorer, 1, &sampling, 8).unwrap();
        let mut chain = Chain::empty(inst);
        let mut draw = 0;
        while !chain.is_terminal() && chain.len() < 8 {
            chain.push(sample_step(&env, &policy, &chain, &sampling, draw).unwrap()).unwrap();
            draw += 1;
        }
        assert_eq!(r.chosen_chain, chain);
        assert_eq!(r.nodes_expanded, chain.len());
    }
}

//! Monte Carlo tree search over reasoning steps.
//!
//! Each round selects a leaf by UCT, expands up to `k` distinct children
//! sampled from the policy, evaluates every new child once and backs each
//! reward up to the root. Training evaluates with verifier-scored rollouts;
//! inference plugs in a learned value model through [`LeafEvaluator`].
//!
//! Randomness comes from the tree's sampling seed and a per-tree draw counter:
//! expansion draws first, then each child's rollout in child order. Selection
//! draws nothing.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::env::{Chain, ProblemInstance, ReasoningEnv, StepToken};
use crate::error::{invalid, PropaError, Result};
use crate::policy::{sample_step, PolicyParams, SamplingConfig};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub node_id: NodeId,
    /// `None` for the root.
    pub step: Option<StepToken>,
    pub parent_id: Option<NodeId>,
    pub children: Vec<NodeId>,
    pub w: f64,
    pub n: u64,
    pub terminal: bool,
    pub depth: usize,
}

impl TreeNode {
    pub fn q(&self) -> Option<f64> {
        (self.n > 0).then(|| self.w / self.n as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub leaf: NodeId,
    pub continuation: Vec<StepToken>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchTree {
    pub instance: ProblemInstance,
    pub nodes: Vec<TreeNode>,
    pub rollout_log: Vec<RolloutRecord>,
    pub sampling: SamplingConfig,
    pub max_depth: usize,
    draws: u64,
}

impl SearchTree {
    pub const ROOT: NodeId = 0;

    pub fn new(instance: ProblemInstance, sampling: SamplingConfig, max_depth: usize) -> Self {
        Self {
            instance,
            nodes: vec![TreeNode {
                node_id: 0,
                step: None,
                parent_id: None,
                children: Vec::new(),
                w: 0.0,
                n: 0,
                terminal: false,
                depth: 0,
            }],
            rollout_log: Vec::new(),
            sampling,
            max_depth,
            draws: 0,
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[Self::ROOT]
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of sampler draws consumed so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    fn next_draw(&mut self) -> u64 {
        let d = self.draws;
        self.draws += 1;
        d
    }

    pub fn add_child(&mut self, parent: NodeId, step: StepToken) -> NodeId {
        let id = self.nodes.len();
        let depth = self.nodes[parent].depth + 1;
        self.nodes.push(TreeNode {
            node_id: id,
            step: Some(step),
            parent_id: Some(parent),
            children: Vec::new(),
            w: 0.0,
            n: 0,
            terminal: step.is_answer(),
            depth,
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Node ids from the root down to `id`, inclusive.
    pub fn path(&self, id: NodeId) -> Vec<NodeId> {
        let mut path = vec![id];
        let mut cur = id;
        while let Some(p) = self.nodes[cur].parent_id {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn chain(&self, id: NodeId) -> Chain {
        let steps = self
            .path(id)
            .into_iter()
            .filter_map(|n| self.nodes[n].step)
            .collect();
        Chain {
            instance: self.instance.clone(),
            steps,
        }
    }

    pub fn terminals(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.terminal)
    }

    /// Whether `ancestor` lies on the root path of `id` (inclusive).
    pub fn is_ancestor(&self, ancestor: NodeId, id: NodeId) -> bool {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == ancestor {
                return true;
            }
            cur = self.nodes[c].parent_id;
        }
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    #[serde(rename = "c")]
    pub exploration: f64,
    pub k: usize,
    pub iterations: usize,
    pub max_depth: usize,
    pub sampling: SamplingConfig,
}

impl Default for MctsConfig {
    fn default() -> Self {
        Self {
            exploration: 1.0,
            k: 4,
            iterations: 25,
            max_depth: 8,
            sampling: SamplingConfig::default(),
        }
    }
}

impl MctsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(invalid("k must be at least 2"));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if !(self.exploration >= 0.0) {
            return Err(invalid("exploration constant must be nonnegative"));
        }
        if self.max_depth == 0 {
            return Err(invalid("max_depth must be positive"));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sampling.rng_seed = seed;
        self
    }
}

/// `W/N + C·sqrt(ln N_parent / N)`, or `+∞` for an unvisited node.
pub fn uct_score(node: &TreeNode, parent_n: u64, c: f64) -> f64 {
    if node.n == 0 {
        return f64::INFINITY;
    }
    let n = node.n as f64;
    node.w / n + c * ((parent_n.max(1) as f64).ln() / n).sqrt()
}

/// Descends by maximal UCT until an unexpanded, terminal or depth-capped node.
/// Ties go to the lowest node id.
pub fn select(tree: &SearchTree, c: f64) -> NodeId {
    let mut cur = SearchTree::ROOT;
    loop {
        let node = &tree.nodes[cur];
        if node.children.is_empty() || node.terminal || node.depth >= tree.max_depth {
            return cur;
        }
        let mut best = None;
        let mut best_score = f64::NEG_INFINITY;
        for &child in &node.children {
            let score = uct_score(&tree.nodes[child], node.n, c);
            let better = match best {
                None => true,
                Some(b) => score > best_score || (score == best_score && child < b),
            };
            if better {
                best = Some(child);
                best_score = score;
            }
        }
        cur = best.expect("expanded node has children");
    }
}

/// Samples `k` next steps and adds one child per distinct token.
pub fn expand<E: ReasoningEnv>(
    tree: &mut SearchTree,
    node_id: NodeId,
    env: &E,
    policy: &PolicyParams,
    cfg: &MctsConfig,
) -> Result<Vec<NodeId>> {
    let node = &tree.nodes[node_id];
    if node.terminal {
        return Err(PropaError::Contract(format!("node {node_id} is terminal")));
    }
    if !node.children.is_empty() {
        return Err(PropaError::Contract(format!("node {node_id} already expanded")));
    }
    if node.depth >= tree.max_depth {
        return Err(PropaError::Contract(format!("node {node_id} is at max depth")));
    }
    let chain = tree.chain(node_id);
    let mut tokens: Vec<StepToken> = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        let draw = tree.next_draw();
        let step = sample_step(env, policy, &chain, &tree.sampling, draw)?;
        if !tokens.contains(&step) {
            tokens.push(step);
        }
    }
    Ok(tokens
        .into_iter()
        .map(|step| tree.add_child(node_id, step))
        .collect())
}

/// Rolls out from `node_id` with the policy until an answer or the depth cap
/// and scores the completed chain with the verifier. Depth-capped rollouts
/// score 0. A terminal node is verified directly.
pub fn simulate<E: ReasoningEnv>(
    tree: &mut SearchTree,
    node_id: NodeId,
    env: &E,
    policy: &PolicyParams,
) -> Result<f64> {
    let mut chain = tree.chain(node_id);
    let start = chain.len();
    while !chain.is_terminal() && chain.len() < tree.max_depth {
        let draw = tree.next_draw();
        let step = sample_step(env, policy, &chain, &tree.sampling, draw)?;
        chain.push(step)?;
    }
    let reward = if chain.is_terminal() {
        f64::from(env.verify_answer(&chain)?)
    } else {
        0.0
    };
    tree.rollout_log.push(RolloutRecord {
        leaf: node_id,
        continuation: chain.steps[start..].to_vec(),
        reward,
    });
    Ok(reward)
}

/// `N += 1`, `W += reward` on every node from the root to `node_id`.
pub fn backpropagate(tree: &mut SearchTree, node_id: NodeId, reward: f64) {
    let mut cur = Some(node_id);
    while let Some(id) = cur {
        let node = &mut tree.nodes[id];
        node.n += 1;
        node.w += reward;
        cur = node.parent_id;
    }
}

/// Produces the reward of a freshly expanded (or revisited terminal) node.
pub trait LeafEvaluator {
    fn evaluate(&mut self, tree: &mut SearchTree, node_id: NodeId) -> Result<f64>;
}

/// Verifier-scored policy rollouts, used during training.
pub struct RolloutEvaluator<'a, E> {
    pub env: &'a E,
    pub policy: &'a PolicyParams,
}

impl<E: ReasoningEnv> LeafEvaluator for RolloutEvaluator<'_, E> {
    fn evaluate(&mut self, tree: &mut SearchTree, node_id: NodeId) -> Result<f64> {
        simulate(tree, node_id, self.env, self.policy)
    }
}

/// Runs `cfg.iterations` rounds of select, expand, evaluate and backpropagate.
pub fn run_search<E: ReasoningEnv, V: LeafEvaluator>(
    tree: &mut SearchTree,
    env: &E,
    policy: &PolicyParams,
    cfg: &MctsConfig,
    evaluator: &mut V,
) -> Result<()> {
    for _ in 0..cfg.iterations {
        let selected = select(tree, cfg.exploration);
        let node = &tree.nodes[selected];
        if node.terminal || node.depth >= tree.max_depth {
            let reward = evaluator.evaluate(tree, selected)?;
            backpropagate(tree, selected, reward);
            continue;
        }
        for child in expand(tree, selected, env, policy, cfg)? {
            let reward = evaluator.evaluate(tree, child)?;
            backpropagate(tree, child, reward);
        }
    }
    Ok(())
}

pub fn build_tree<E: ReasoningEnv>(
    env: &E,
    instance: &ProblemInstance,
    policy: &PolicyParams,
    cfg: &MctsConfig,
) -> Result<SearchTree> {
    cfg.validate()?;
    let mut tree = SearchTree::new(instance.clone(), cfg.sampling, cfg.max_depth);
    let mut evaluator = RolloutEvaluator { env, policy };
    run_search(&mut tree, env, policy, cfg, &mut evaluator)?;
    Ok(tree)
}

/// Structural and statistical checks; returns every violation found.
///
/// With `replay_verifier`, each logged rollout is re-scored through the
/// verifier and must reproduce its stored reward exactly.
pub fn audit_tree<E: ReasoningEnv>(tree: &SearchTree, env: &E, replay_verifier: bool) -> Vec<String> {
    let mut errs = Vec::new();
    let n_nodes = tree.nodes.len();
    if n_nodes == 0 || tree.nodes[0].parent_id.is_some() {
        errs.push("missing root".into());
        return errs;
    }
    for (i, node) in tree.nodes.iter().enumerate() {
        if node.node_id != i {
            errs.push(format!("node {i} stores id {}", node.node_id));
        }
        if i != 0 && node.parent_id.is_none() {
            errs.push(format!("node {i} is a second root"));
        }
        if let Some(p) = node.parent_id {
            if p >= i {
                errs.push(format!("node {i} has parent {p} created after it"));
            } else if !tree.nodes[p].children.contains(&i) {
                errs.push(format!("parent {p} does not list child {i}"));
            } else if node.depth != tree.nodes[p].depth + 1 {
                errs.push(format!("node {i} depth inconsistent"));
            }
            if node.n > tree.nodes[p].n {
                errs.push(format!("N({i})={} exceeds parent N={}", node.n, tree.nodes[p].n));
            }
        }
        for &c in &node.children {
            if c >= n_nodes || tree.nodes[c].parent_id != Some(i) {
                errs.push(format!("child link {i}->{c} not mirrored"));
            }
        }
        if node.w > node.n as f64 + 1e-12 || node.w < 0.0 {
            errs.push(format!("node {i}: W={} outside [0, N={}]", node.w, node.n));
        }
        let is_answer = node.step.is_some_and(|s| s.is_answer());
        if node.terminal != is_answer {
            errs.push(format!("node {i}: terminal flag disagrees with step kind"));
        }
        if node.terminal && !node.children.is_empty() {
            errs.push(format!("terminal node {i} has children"));
        }
    }
    if tree.nodes[0].n != tree.rollout_log.len() as u64 {
        errs.push(format!(
            "N(root)={} but {} backpropagations logged",
            tree.nodes[0].n,
            tree.rollout_log.len()
        ));
    }

    let mut w = vec![0.0; n_nodes];
    let mut n = vec![0u64; n_nodes];
    for (r, rec) in tree.rollout_log.iter().enumerate() {
        if rec.leaf >= n_nodes {
            errs.push(format!("rollout {r} points at missing node {}", rec.leaf));
            continue;
        }
        for id in tree.path(rec.leaf) {
            w[id] += rec.reward;
            n[id] += 1;
        }
        if replay_verifier {
            let mut chain = tree.chain(rec.leaf);
            let mut ok = true;
            for &s in &rec.continuation {
                ok &= chain.push(s).is_ok();
            }
            let replayed = if ok && chain.is_terminal() {
                env.verify_answer(&chain).map(f64::from).unwrap_or(-1.0)
            } else {
                0.0
            };
            if replayed != rec.reward {
                errs.push(format!(
                    "rollout {r} reward {} but replay gives {replayed}",
                    rec.reward
                ));
            }
        }
    }
    for i in 0..n_nodes {
        if n[i] != tree.nodes[i].n || (w[i] - tree.nodes[i].w).abs() > 1e-9 {
            errs.push(format!(
                "node {i}: stored (W={}, N={}) vs replay (W={}, N={})",
                tree.nodes[i].w, tree.nodes[i].n, w[i], n[i]
            ));
        }
    }
    errs
}

/// Line-oriented tree dump:
///
/// ```text
/// tree <instance_id> <d> <digits...> <truth>
/// sampling <temperature> <top_k> <top_p> <rng_seed> <max_depth>
/// nodes <count>
/// <node_id> <parent_id|-> <step_token|ROOT> <W> <N> <terminal>
/// rollouts <count>
/// <leaf_id> <reward> <continuation token ids...>
/// ```
pub fn write_tree_dump<W: Write>(mut out: W, tree: &SearchTree) -> Result<()> {
    let inst = &tree.instance;
    write!(out, "tree {} {}", inst.instance_id, inst.inputs.len())?;
    for d in &inst.inputs {
        write!(out, " {d}")?;
    }
    writeln!(out, " {}", inst.truth)?;
    let s = &tree.sampling;
    writeln!(
        out,
        "sampling {:?} {} {:?} {} {}",
        s.temperature, s.top_k, s.top_p, s.rng_seed, tree.max_depth
    )?;
    writeln!(out, "nodes {}", tree.nodes.len())?;
    for node in &tree.nodes {
        let parent = node.parent_id.map_or("-".to_string(), |p| p.to_string());
        let step = node.step.map_or("ROOT".to_string(), |s| s.id.to_string());
        writeln!(
            out,
            "{} {} {} {:?} {} {}",
            node.node_id,
            parent,
            step,
            node.w,
            node.n,
            u8::from(node.terminal)
        )?;
    }
    writeln!(out, "rollouts {}", tree.rollout_log.len())?;
    for rec in &tree.rollout_log {
        write!(out, "{} {:?}", rec.leaf, rec.reward)?;
        for s in &rec.continuation {
            write!(out, " {}", s.id)?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads every tree in a dump file, in order.
pub fn read_tree_dumps<E: ReasoningEnv, R: BufRead>(env: &E, input: R) -> Result<Vec<SearchTree>> {
    let lines: Vec<String> = input.lines().collect::<std::io::Result<_>>()?;
    let mut trees = Vec::new();
    let mut i = 0;
    let vocab = env.spec().vocab_size;
    let err = |line: usize, message: &str| PropaError::Parse {
        line: line + 1,
        message: message.to_string(),
    };
    let num = |line: usize, tok: &str| -> Result<f64> {
        tok.parse::<f64>().map_err(|e| err(line, &e.to_string()))
    };
    let int = |line: usize, tok: &str| -> Result<u64> {
        tok.parse::<u64>().map_err(|e| err(line, &e.to_string()))
    };
    let token = |line: usize, tok: &str| -> Result<StepToken> {
        let id = int(line, tok)? as usize;
        if id >= vocab {
            return Err(err(line, "token id outside vocabulary"));
        }
        Ok(env.token(id))
    };
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let head: Vec<&str> = lines[i].split_whitespace().collect();
        if head.first() != Some(&"tree") || head.len() < 4 {
            return Err(err(i, "expected `tree` header"));
        }
        let id = int(i, head[1])?;
        let d = int(i, head[2])? as usize;
        if head.len() != d + 4 {
            return Err(err(i, "digit count mismatch"));
        }
        let digits = head[3..3 + d]
            .iter()
            .map(|t| t.parse::<i64>().map_err(|e| err(i, &e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        let instance = ProblemInstance::from_digits(id, &digits).map_err(|e| err(i, &e.to_string()))?;
        i += 1;

        let samp: Vec<&str> = lines.get(i).ok_or(err(i, "missing sampling line"))?.split_whitespace().collect();
        if samp.len() != 6 || samp[0] != "sampling" {
            return Err(err(i, "expected `sampling` line"));
        }
        let sampling = SamplingConfig {
            temperature: num(i, samp[1])?,
            top_k: int(i, samp[2])? as usize,
            top_p: num(i, samp[3])?,
            rng_seed: int(i, samp[4])?,
        };
        let max_depth = int(i, samp[5])? as usize;
        i += 1;

        let count_line: Vec<&str> = lines.get(i).ok_or(err(i, "missing nodes line"))?.split_whitespace().collect();
        if count_line.len() != 2 || count_line[0] != "nodes" {
            return Err(err(i, "expected `nodes <count>`"));
        }
        let n_nodes = int(i, count_line[1])? as usize;
        i += 1;
        let mut tree = SearchTree::new(instance, sampling, max_depth);
        tree.nodes.clear();
        for _ in 0..n_nodes {
            let f: Vec<&str> = lines.get(i).ok_or(err(i, "truncated node list"))?.split_whitespace().collect();
            if f.len() != 6 {
                return Err(err(i, "node line needs 6 fields"));
            }
            let node_id = int(i, f[0])? as usize;
            if node_id != tree.nodes.len() {
                return Err(err(i, "node ids must be dense and ordered"));
            }
            let parent_id = match f[1] {
                "-" => None,
                p => Some(int(i, p)? as usize),
            };
            let step = match f[2] {
                "ROOT" => None,
                t => Some(token(i, t)?),
            };
            let depth = match parent_id {
                None => 0,
                Some(p) if p < node_id => tree.nodes[p].depth + 1,
                Some(_) => return Err(err(i, "parent must precede child")),
            };
            if let Some(p) = parent_id {
                tree.nodes[p].children.push(node_id);
            }
            tree.nodes.push(TreeNode {
                node_id,
                step,
                parent_id,
                children: Vec::new(),
                w: num(i, f[3])?,
                n: int(i, f[4])?,
                terminal: f[5] == "1",
                depth,
            });
            i += 1;
        }
        let roll: Vec<&str> = lines.get(i).ok_or(err(i, "missing rollouts line"))?.split_whitespace().collect();
        if roll.len() != 2 || roll[0] != "rollouts" {
            return Err(err(i, "expected `rollouts <count>`"));
        }
        let n_roll = int(i, roll[1])? as usize;
        i += 1;
        for _ in 0..n_roll {
            let f: Vec<&str> = lines.get(i).ok_or(err(i, "truncated rollout list"))?.split_whitespace().collect();
            if f.len() < 2 {
                return Err(err(i, "rollout line needs leaf and reward"));
            }
            tree.rollout_log.push(RolloutRecord {
                leaf: int(i, f[0])? as usize,
                reward: num(i, f[1])?,
                continuation: f[2..].iter().map(|t| token(i, t)).collect::<Result<_>>()?,
            });
            i += 1;
        }
        tree.draws = 0;
        trees.push(tree);
    }
    Ok(trees)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::PrefixSum;
    use crate::policy::sft_update;

    fn instance(digits: &[i64]) -> ProblemInstance {
        ProblemInstance::from_digits(1, digits).unwrap()
    }

    fn teacher_policy(env: &PrefixSum, steps: usize) -> PolicyParams {
        let traces: Vec<Chain> = (0..60)
            .map(|s| env.teacher_trace(&env.generate_instance(s, 1 + (s % 3) as usize).unwrap()))
            .collect();
        let mut p = PolicyParams::for_env(env);
        for _ in 0..steps {
            p = sft_update(env, &p, &traces, 1.0).unwrap();
        }
        p
    }

    #[test]
    fn uct_values() {
        let mut node = SearchTree::new(instance(&[1]), SamplingConfig::default(), 8).nodes[0].clone();
        assert_eq!(uct_score(&node, 10, 1.0), f64::INFINITY);
        node.w = 2.0;
        node.n = 4;
        let expected = 0.5 + (10f64.ln() / 4.0).sqrt();
        assert!((uct_score(&node, 10, 1.0) - expected).abs() < 1e-15);
        assert!((uct_score(&node, 10, 1.0) - 1.25872).abs() < 1e-5);
        node.w = 4.0;
        assert_eq!(uct_score(&node, 10, 0.0), 1.0);
    }

    #[test]
    fn select_on_fresh_tree_and_ties() {
        let mut tree = SearchTree::new(instance(&[3, 1]), SamplingConfig::default(), 8);
        assert_eq!(select(&tree, 1.0), 0);
        let a = tree.add_child(0, PrefixSum::reason(3));
        let _b = tree.add_child(0, PrefixSum::reason(4));
        tree.nodes[0].n = 1;
        assert_eq!(select(&tree, 1.0), a);
    }

    #[test]
    fn select_matches_brute_force_on_three_levels() {
        let mut tree = SearchTree::new(instance(&[3, 1, 4]), SamplingConfig::default(), 8);
        let level1: Vec<_> = (0..3).map(|v| tree.add_child(0, PrefixSum::reason(v))).collect();
        let level2: Vec<_> = (0..3)
            .map(|v| tree.add_child(level1[1], PrefixSum::reason(10 + v)))
            .collect();
        let _level3: Vec<_> = (0..2)
            .map(|v| tree.add_child(level2[2], PrefixSum::reason(20 + v)))
            .collect();
        let stats = [(12, 9.0), (3, 1.0), (6, 4.0), (2, 0.0), (1, 1.0), (1, 0.0), (2, 1.0), (1, 1.0), (0, 0.0)];
        for (i, &(n, w)) in stats.iter().enumerate() {
            tree.nodes[i].n = n;
            tree.nodes[i].w = w;
        }
        for c in [0.0, 0.5, 1.0, 2.0] {
            // brute force: score every child of every node on the way down
            let mut expected = 0;
            loop {
                let kids = &tree.nodes[expected].children;
                if kids.is_empty() {
                    break;
                }
                let pn = tree.nodes[expected].n as f64;
                let scores: Vec<f64> = kids
                    .iter()
                    .map(|&k| {
                        let nd = &tree.nodes[k];
                        if nd.n == 0 {
                            f64::INFINITY
                        } else {
                            nd.w / nd.n as f64 + c * (pn.ln() / nd.n as f64).sqrt()
                        }
                    })
                    .collect();
                let best = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                expected = kids[scores.iter().position(|&s| s == best).unwrap()];
            }
            assert_eq!(select(&tree, c), expected, "c = {c}");
        }
    }

    #[test]
    fn expand_dedups_and_replays_sampler() {
        let env = PrefixSum::new();
        let policy = PolicyParams::for_env(&env);
        let cfg = MctsConfig::default().with_seed(5);
        let mut tree = SearchTree::new(instance(&[3, 1, 4]), cfg.sampling, 8);
        let kids = expand(&mut tree, 0, &env, &policy, &cfg).unwrap();

        let chain = Chain::empty(instance(&[3, 1, 4]));
        let mut replay = Vec::new();
        for d in 0..4 {
            let s = sample_step(&env, &policy, &chain, &cfg.sampling, d).unwrap();
            if !replay.contains(&s) {
                replay.push(s);
            }
        }
        let got: Vec<_> = kids.iter().map(|&k| tree.nodes[k].step.unwrap()).collect();
        assert_eq!(got, replay);
        assert!(expand(&mut tree, 0, &env, &policy, &cfg).is_err());

        let mut greedy = cfg;
        greedy.sampling.top_k = 1;
        let mut tree = SearchTree::new(instance(&[3, 1, 4]), greedy.sampling, 8);
        assert_eq!(expand(&mut tree, 0, &env, &policy, &greedy).unwrap().len(), 1);
    }

    #[test]
    fn expand_rejects_terminal_and_depth_capped_nodes() {
        let env = PrefixSum::new();
        let policy = PolicyParams::for_env(&env);
        let cfg = MctsConfig::default();
        let mut tree = SearchTree::new(instance(&[1]), cfg.sampling, 1);
        let t = tree.add_child(0, PrefixSum::answer(1));
        let r = tree.add_child(0, PrefixSum::reason(1));
        assert!(matches!(expand(&mut tree, t, &env, &policy, &cfg), Err(PropaError::Contract(_))));
        assert!(matches!(expand(&mut tree, r, &env, &policy, &cfg), Err(PropaError::Contract(_))));
    }

    #[test]
    fn simulate_terminal_and_capped() {
        let env = PrefixSum::new();
        let policy = PolicyParams::for_env(&env);
        let mut tree = SearchTree::new(instance(&[3, 1, 4]), SamplingConfig::default(), 2);
        let t = tree.add_child(0, PrefixSum::answer(8));
        assert_eq!(simulate(&mut tree, t, &env, &policy).unwrap(), 1.0);
        assert_eq!(tree.draws(), 0);

        // top_k=1 on zero weights always picks Reason(0): never answers
        let mut greedy = SamplingConfig::default();
        greedy.top_k = 1;
        let mut tree = SearchTree::new(instance(&[3, 1, 4]), greedy, 2);
        assert_eq!(simulate(&mut tree, 0, &env, &policy).unwrap(), 0.0);
        assert_eq!(tree.rollout_log[0].continuation.len(), 2);
    }

    #[test]
    fn seeded_rollout_replays_through_verifier() {
        let env = PrefixSum::new();
        let policy = teacher_policy(&env, 30);
        for seed in 0..20 {
            let mut tree = SearchTree::new(instance(&[3, 1, 4]), SamplingConfig { rng_seed: seed, ..Default::default() }, 8);
            let r = simulate(&mut tree, 0, &env, &policy).unwrap();
            let rec = &tree.rollout_log[0];
            let chain = Chain { instance: instance(&[3, 1, 4]), steps: rec.continuation.clone() };
            let replay = if chain.is_terminal() { f64::from(env.verify_answer(&chain).unwrap()) } else { 0.0 };
            assert_eq!(r, replay);
        }
    }

    #[test]
    fn backprop_counts_path() {
        let mut tree = SearchTree::new(instance(&[3, 1]), SamplingConfig::default(), 8);
        let a = tree.add_child(0, PrefixSum::reason(3));
        let b = tree.add_child(a, PrefixSum::reason(4));
        let other = tree.add_child(0, PrefixSum::reason(5));
        backpropagate(&mut tree, b, 1.0);
        for id in [0, a, b] {
            assert_eq!((tree.nodes[id].w, tree.nodes[id].n), (1.0, 1));
        }
        assert_eq!(tree.nodes[other].n, 0);
        backpropagate(&mut tree, other, 0.0);
        assert_eq!(tree.nodes[0].n, 2);
    }

    #[test]
    fn single_round_tree() {
        let env = PrefixSum::new();
        let policy = PolicyParams::for_env(&env);
        let cfg = MctsConfig { iterations: 1, ..MctsConfig::default() };
        let tree = build_tree(&env, &instance(&[2, 2]), &policy, &cfg).unwrap();
        let kids = tree.root().children.len();
        assert!(kids >= 1 && kids <= 4);
        assert_eq!(tree.root().n as usize, kids);
        assert!(audit_tree(&tree, &env, true).is_empty());
    }

    #[test]
    fn trees_pass_audit_and_are_reproducible() {
        let env = PrefixSum::new();
        let policy = teacher_policy(&env, 20);
        for seed in 0..30 {
            let x = env.generate_instance(seed, 1 + (seed % 3) as usize).unwrap();
            let cfg = MctsConfig::default().with_seed(seed);
            let tree = build_tree(&env, &x, &policy, &cfg).unwrap();
            let errs = audit_tree(&tree, &env, true);
            assert!(errs.is_empty(), "{errs:?}");
            assert_eq!(tree, build_tree(&env, &x, &policy, &cfg).unwrap());
            for node in &tree.nodes {
                if let Some(q) = node.q() {
                    assert!((0.0..=1.0).contains(&q));
                }
            }
        }
    }

    #[test]
    fn audit_flags_tampering() {
        let env = PrefixSum::new();
        let policy = teacher_policy(&env, 20);
        let x = env.generate_instance(3, 2).unwrap();
        let mut tree = build_tree(&env, &x, &policy, &MctsConfig::default()).unwrap();
        tree.nodes[1].w += 1.0;
        assert!(!audit_tree(&tree, &env, true).is_empty());
        let mut tree = build_tree(&env, &x, &policy, &MctsConfig::default()).unwrap();
        tree.rollout_log[0].reward = 1.0 - tree.rollout_log[0].reward;
        assert!(!audit_tree(&tree, &env, true).is_empty());
    }

    #[test]
    fn dump_round_trip() {
        let env = PrefixSum::new();
        let policy = teacher_policy(&env, 20);
        let mut buf = Vec::new();
        let mut trees = Vec::new();
        for seed in 0..3 {
            let x = env.generate_instance(seed, 3).unwrap();
            let tree = build_tree(&env, &x, &policy, &MctsConfig::default().with_seed(seed)).unwrap();
            write_tree_dump(&mut buf, &tree).unwrap();
            trees.push(tree);
        }
        let back = read_tree_dumps(&env, &buf[..]).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in trees.iter().zip(&back) {
            assert_eq!(a.nodes, b.nodes);
            assert_eq!(a.rollout_log, b.rollout_log);
            assert_eq!(a.sampling, b.sampling);
            assert!(audit_tree(b, &env, true).is_empty());
        }
    }
}

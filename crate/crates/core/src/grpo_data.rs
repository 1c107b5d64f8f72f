//! Turning finished search trees into GRPO groups.
//!
//! Every expanded parent whose children were all simulated yields one group:
//! the parent's chain is the prompt and each child's step is a one-token
//! completion rewarded by its tree value `Q = W/N`. Groups with too little
//! spread are dropped, the rest are reshaped by a concave log map and
//! standardized within the group.

use std::collections::VecDeque;
use std::io::Write;

use crate::env::{Chain, StepToken};
use crate::error::{PropaError, Result};
use crate::mcts::{NodeId, SearchTree};

#[derive(Debug, Clone, PartialEq)]
pub struct GroupChild {
    pub node_id: NodeId,
    pub step: StepToken,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub parent_id: NodeId,
    pub parent_chain: Chain,
    pub children: Vec<GroupChild>,
}

impl Group {
    pub fn q_values(&self) -> Vec<f64> {
        self.children.iter().map(|c| c.q).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageGroup {
    pub group: Group,
    pub q_transformed: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Reward shaping applied before standardization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QTransform {
    Log { alpha: f64 },
    Identity,
}

impl QTransform {
    pub fn apply(&self, q: f64) -> f64 {
        match *self {
            QTransform::Log { alpha } => log_transform(q, alpha),
            QTransform::Identity => q,
        }
    }
}

/// One group per expanded parent, breadth-first (by depth, then node id).
/// Unvisited children are dropped; parents left with fewer than two children
/// emit nothing.
pub fn extract_groups(tree: &SearchTree) -> Vec<Group> {
    let mut groups = Vec::new();
    let mut queue = VecDeque::from([SearchTree::ROOT]);
    let mut order = Vec::new();
    while let Some(id) = queue.pop_front() {
        order.push(id);
        queue.extend(tree.node(id).children.iter().copied());
    }
    order.sort_by_key(|&id| (tree.node(id).depth, id));
    for id in order {
        let node = tree.node(id);
        let children: Vec<GroupChild> = node
            .children
            .iter()
            .map(|&c| tree.node(c))
            .filter(|c| c.n >= 1)
            .map(|c| GroupChild {
                node_id: c.node_id,
                step: c.step.expect("non-root node has a step"),
                q: c.w / c.n as f64,
            })
            .collect();
        if children.len() >= 2 {
            groups.push(Group {
                parent_id: id,
                parent_chain: tree.chain(id),
                children,
            });
        }
    }
    groups
}

/// `max q - min q` over the children.
pub fn group_delta(group: &Group) -> f64 {
    let qs = group.q_values();
    let max = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = qs.iter().copied().fold(f64::INFINITY, f64::min);
    max - min
}

/// Keeps groups whose spread is at least `tau`.
pub fn filter_groups(groups: Vec<Group>, tau: f64) -> Vec<Group> {
    groups.into_iter().filter(|g| group_delta(g) >= tau).collect()
}

/// `clip(log(1 + αq) / log(1 + α), 0, 1)`.
pub fn log_transform(q: f64, alpha: f64) -> f64 {
    // ln_1p keeps the small-alpha limit accurate
    ((alpha * q).ln_1p() / alpha.ln_1p()).clamp(0.0, 1.0)
}

pub fn compute_advantages(group: &Group, alpha: f64) -> Result<AdvantageGroup> {
    compute_advantages_with(group, QTransform::Log { alpha })
}

/// `A_i = (q̃_i - mean q̃) / std q̃` with the population standard deviation.
pub fn compute_advantages_with(group: &Group, transform: QTransform) -> Result<AdvantageGroup> {
    let q_transformed: Vec<f64> = group.children.iter().map(|c| transform.apply(c.q)).collect();
    let advantages = standardize(&q_transformed)?;
    Ok(AdvantageGroup {
        group: group.clone(),
        q_transformed,
        advantages,
    })
}

pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= 1e-9) {
        return Err(PropaError::DegenerateGroup);
    }
    Ok(values.iter().map(|v| (v - mean) / std).collect())
}

/// One child of one group, flattened for audit logs.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupRecord {
    pub instance_id: u64,
    pub parent_depth: usize,
    pub child_token: usize,
    pub q_raw: f64,
    pub q_transformed: f64,
    pub advantage: f64,
}

impl AdvantageGroup {
    pub fn records(&self) -> Vec<GroupRecord> {
        let instance_id = self.group.parent_chain.instance.instance_id;
        let parent_depth = self.group.parent_chain.len();
        self.group
            .children
            .iter()
            .zip(&self.q_transformed)
            .zip(&self.advantages)
            .map(|((child, &q_transformed), &advantage)| GroupRecord {
                instance_id,
                parent_depth,
                child_token: child.step.id,
                q_raw: child.q,
                q_transformed,
                advantage,
            })
            .collect()
    }
}

/// Writes `instance_id,parent_depth,child_token,q_raw,q_transformed,advantage`
/// per child.
pub fn write_group_records<W: Write>(mut out: W, records: &[GroupRecord]) -> Result<()> {
    for r in records {
        writeln!(
            out,
            "{},{},{},{:?},{:?},{:?}",
            r.instance_id, r.parent_depth, r.child_token, r.q_raw, r.q_transformed, r.advantage
        )?;
    }
    Ok(())
}

//! Browser bindings for three small views of the training signal: the value
//! transform, group-relative advantages, and one search tree on chosen
//! digits. The plain functions carry the logic; the exported wrappers only
//! translate errors.

use std::fmt::Write as _;

use propa_core::grpo_data::{compute_advantages_with, log_transform, Group, GroupChild, QTransform};
use propa_core::harness::inspect_trees;
use propa_core::inference::greedy_search;
use propa_core::interleave::{mix_seed, partition_tree, Route};
use propa_core::mcts::build_tree;
use propa_core::policy::sft_update;
use propa_core::{Chain, MctsConfig, PolicyParams, PrefixSum, ProblemInstance, ReasoningEnv};
use wasm_bindgen::prelude::*;

/// `points` evenly spaced values of the transform over `Q` in `[0, 1]`.
pub fn transform_curve(alpha: f64, points: usize) -> Result<Vec<f64>, String> {
    if !(alpha > 0.0) || points < 2 {
        return Err("alpha must be positive and points at least 2".into());
    }
    Ok((0..points)
        .map(|i| log_transform(i as f64 / (points - 1) as f64, alpha))
        .collect())
}

/// Transformed values followed by advantages, both of length `q.len()`.
pub fn group_advantages(q: &[f64], alpha: f64, use_transform: bool) -> Result<Vec<f64>, String> {
    if q.len() < 2 {
        return Err("a group needs at least two children".into());
    }
    if q.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err("values must lie in [0, 1]".into());
    }
    let instance = ProblemInstance::from_digits(0, &[0]).map_err(|e| e.to_string())?;
    let group = Group {
        parent_id: 0,
        parent_chain: Chain::empty(instance),
        children: q
            .iter()
            .enumerate()
            .map(|(i, &q)| GroupChild {
                node_id: i + 1,
                step: PrefixSum::reason(i as i64 % 46),
                q,
            })
            .collect(),
    };
    let transform = if use_transform {
        QTransform::Log { alpha }
    } else {
        QTransform::Identity
    };
    let ag = compute_advantages_with(&group, transform).map_err(|e| e.to_string())?;
    Ok(ag.q_transformed.into_iter().chain(ag.advantages).collect())
}

fn activated_policy(env: &PrefixSum, epochs: u32) -> Result<PolicyParams, String> {
    let traces: Vec<Chain> = (0..200u64)
        .map(|i| {
            let s = mix_seed(&[0, 1, i]);
            env.generate_instance(s, 1 + (s % 3) as usize)
                .map(|x| env.teacher_trace(&x))
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut policy = PolicyParams::for_env(env);
    for _ in 0..epochs {
        for chunk in traces.chunks(4) {
            policy = sft_update(env, &policy, chunk, 1.0).map_err(|e| e.to_string())?;
        }
    }
    Ok(policy)
}

/// Builds one search tree for `digits` with a policy given `sft_epochs` of
/// teacher training, and describes its routing, groups and nodes.
pub fn explore(digits: &[u8], sft_epochs: u32, iterations: usize, seed: u32) -> Result<String, String> {
    if sft_epochs > 20 {
        return Err("at most 20 SFT epochs".into());
    }
    let digits: Vec<i64> = digits.iter().map(|&d| d as i64).collect();
    let env = PrefixSum::new();
    let instance = ProblemInstance::from_digits(0, &digits).map_err(|e| e.to_string())?;
    let policy = activated_policy(&env, sft_epochs)?;
    let cfg = MctsConfig {
        iterations,
        ..MctsConfig::default()
    }
    .with_seed(seed as u64);
    cfg.validate().map_err(|e| e.to_string())?;
    let tree = build_tree(&env, &instance, &policy, &cfg).map_err(|e| e.to_string())?;

    let mut out = String::new();
    let greedy = greedy_search(&env, &instance, &policy, cfg.max_depth).map_err(|e| e.to_string())?;
    let steps: Vec<String> = greedy.chosen_chain.steps.iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "greedy chain: {} (truth {})", steps.join(" "), instance.truth);
    match partition_tree(&tree, 0, 0.1, QTransform::Log { alpha: 10.0 }) {
        Route::Sft(_) => {
            let _ = writeln!(out, "route: SFT (no correct terminal reached)\n");
        }
        Route::Grpo {
            groups,
            extracted,
            degenerate,
        } => {
            let _ = writeln!(
                out,
                "route: GRPO, {} of {extracted} groups kept ({degenerate} degenerate)\n",
                groups.len()
            );
            for g in &groups {
                let prefix: Vec<String> = g.group.parent_chain.steps.iter().map(|s| s.to_string()).collect();
                let _ = writeln!(out, "group after [{}]", prefix.join(" "));
                for ((c, t), a) in g.group.children.iter().zip(&g.q_transformed).zip(&g.advantages) {
                    let _ = writeln!(out, "  {:>4}  Q={:.3}  Q~={:.3}  A={:+.3}", c.step.to_string(), c.q, t, a);
                }
            }
            out.push('\n');
        }
    }
    out.push_str(&inspect_trees(&env, std::slice::from_ref(&tree), cfg.exploration));
    Ok(out)
}

#[wasm_bindgen(js_name = transformCurve)]
pub fn transform_curve_js(alpha: f64, points: usize) -> Result<Vec<f64>, JsError> {
    transform_curve(alpha, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = groupAdvantages)]
pub fn group_advantages_js(q: Vec<f64>, alpha: f64, use_transform: bool) -> Result<Vec<f64>, JsError> {
    group_advantages(&q, alpha, use_transform).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = explore)]
pub fn explore_js(digits: Vec<u8>, sft_epochs: u32, iterations: usize, seed: u32) -> Result<String, JsError> {
    explore(&digits, sft_epochs, iterations, seed).map_err(|e| JsError::new(&e))
}

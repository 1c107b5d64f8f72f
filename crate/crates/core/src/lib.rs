//! Tree-search process rewards for step-wise reasoning policies.
//!
//! Search trees built with the current policy score every intermediate step
//! by its mean rollout reward. Those values drive group-relative policy
//! updates on the steps themselves, failed searches fall back to supervised
//! traces, and a learned value model replaces rollouts at test time.

pub mod env;
pub mod error;
pub mod grpo_data;
pub mod harness;
pub mod inference;
pub mod interleave;
pub mod mcts;
pub mod policy;
pub mod prm;

pub use env::{Chain, PrefixSum, ProblemInstance, ReasoningEnv, StepKind, StepToken};
pub use error::{PropaError, Result};
pub use mcts::{MctsConfig, SearchTree};
pub use policy::{PolicyParams, SamplingConfig};
pub use prm::PrmParams;

//! Reinforcement-learning agent that moves an initial guess toward the
//! region where Newton-Raphson converges in few iterations.

pub mod env;
pub mod eval;
pub mod policy;
pub mod ppo;

pub use env::{env_reset, env_step, EnvConfig, RlAction, RlState};
pub use eval::{eval_policy, rollout, PolicyEval, StepsMap, Trace};
pub use policy::{policy_sample, GaussianPolicy};
pub use ppo::{train_ppo, PpoConfig, PpoLog};

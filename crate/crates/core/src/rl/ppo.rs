//! Clipped-surrogate policy optimization with generalized advantage estimates.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::env::{env_reset, EnvConfig, Episode};
use super::policy::{observe, policy_sample, GaussianPolicy, ACT_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::neural::mlp::Adam;

#[derive(Debug, Clone, PartialEq)]
pub struct PpoConfig {
    pub learning_rate: f64,
    pub discount: f64,
    pub rollout_steps: usize,
    pub batch_size: usize,
    pub epochs_per_update: usize,
    pub clip_range: f64,
    pub entropy_coef: f64,
    pub total_timesteps: usize,
    pub gae_lambda: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            discount: 0.99,
            rollout_steps: 2048,
            batch_size: 64,
            epochs_per_update: 10,
            clip_range: 0.2,
            entropy_coef: 0.0,
            total_timesteps: 200_000,
            gae_lambda: 0.95,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            return bad("discount must lie in (0, 1)");
        }
        if !(self.clip_range > 0.0) {
            return bad("clip_range must be > 0");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if self.rollout_steps == 0 || self.batch_size == 0 || self.epochs_per_update == 0 {
            return bad("rollout_steps, batch_size and epochs_per_update must be >= 1");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateLog {
    pub update: usize,
    pub timesteps: usize,
    /// Undiscounted return averaged over episodes finished in this rollout.
    pub mean_return: f64,
    pub mean_ep_len: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PpoLog {
    pub updates: Vec<UpdateLog>,
}

impl PpoLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("update,timesteps,mean_return,mean_ep_len\n");
        for u in &self.updates {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                u.update, u.timesteps, u.mean_return, u.mean_ep_len
            );
        }
        s
    }
}

/// Mean of `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn clipped_surrogate(ratios: &[f64], advantages: &[f64], clip_range: f64) -> f64 {
    let n = ratios.len().max(1) as f64;
    ratios
        .iter()
        .zip(advantages)
        .map(|(&r, &a)| (r * a).min(r.clamp(1.0 - clip_range, 1.0 + clip_range) * a))
        .sum::<f64>()
        / n
}

/// `d/d log_prob` of one sample's surrogate term; zero where the clip binds.
fn surrogate_grad(ratio: f64, adv: f64, clip_range: f64) -> f64 {
    let clipped =
        (adv >= 0.0 && ratio > 1.0 + clip_range) || (adv < 0.0 && ratio < 1.0 - clip_range);
    if clipped {
        0.0
    } else {
        ratio * adv
    }
}

struct Rollout {
    obs: Vec<[f64; OBS_DIM]>,
    u: Vec<[f64; ACT_DIM]>,
    log_prob: Vec<f64>,
    advantage: Vec<f64>,
    returns: Vec<f64>,
}

/// Backward GAE pass. `starts[t]` marks `obs[t]` as the first of an episode;
/// `last_value` bootstraps past the final transition unless `last_done`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    starts: &[bool],
    last_value: f64,
    last_done: bool,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let (next_value, non_terminal) = if t + 1 == n {
            (last_value, if last_done { 0.0 } else { 1.0 })
        } else {
            (values[t + 1], if starts[t + 1] { 0.0 } else { 1.0 })
        };
        let delta = rewards[t] + gamma * next_value * non_terminal - values[t];
        acc = delta + gamma * lambda * non_terminal * acc;
        adv[t] = acc;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

fn global_norm(parts: &[&[f64]]) -> f64 {
    parts
        .iter()
        .flat_map(|p| p.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

pub fn train_ppo(env: &EnvConfig, config: &PpoConfig) -> Result<(GaussianPolicy, PpoLog)> {
    env.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut policy = GaussianPolicy::new(&config.hidden, &mut rng);
    let mut opt_mean = Adam::new(policy.mean_net.n_params(), config.learning_rate).with_eps(1e-5);
    let mut opt_std = Adam::new(ACT_DIM, config.learning_rate).with_eps(1e-5);
    let mut opt_value = Adam::new(policy.value_net.n_params(), config.learning_rate).with_eps(1e-5);
    let mut log = PpoLog::default();

    let mut episode = Episode::new(env, env_reset(env, &mut rng));
    let mut episode_start = true;
    let mut ep_return = 0.0;
    let mut timesteps = 0;
    let n_updates = config.total_timesteps.div_ceil(config.rollout_steps);

    for update in 0..n_updates {
        let n = config.rollout_steps;
        let mut obs = Vec::with_capacity(n);
        let mut us = Vec::with_capacity(n);
        let mut log_probs = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        let mut rewards = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        let (mut finished, mut sum_return, mut sum_len) = (0usize, 0.0, 0usize);
        let mut last_done = false;

        for _ in 0..n {
            let o = observe(&episode.state);
            let sample = policy_sample(&policy, &episode.state, &mut rng);
            let mean = policy.mean(&o);
            let value = policy.value(&o);
            let (step, truncated) = episode.step(sample.action);
            let mut reward = step.reward;
            ep_return += step.reward;
            if truncated {
                // time limit is not part of the state: bootstrap through it
                reward += config.discount * policy.value(&observe(&step.state));
            }
            obs.push(o);
            us.push(sample.u);
            log_probs.push(policy.log_prob_unsquashed(&mean, &sample.u));
            values.push(value);
            rewards.push(reward);
            starts.push(episode_start);
            timesteps += 1;
            last_done = step.terminated || truncated;
            episode_start = last_done;
            if last_done {
                finished += 1;
                sum_return += ep_return;
                sum_len += episode.t;
                ep_return = 0.0;
                episode = Episode::new(env, env_reset(env, &mut rng));
            }
        }
        let last_value = policy.value(&observe(&episode.state));
        let (advantage, returns) = gae(
            &rewards,
            &values,
            &starts,
            last_value,
            last_done,
            config.discount,
            config.gae_lambda,
        );
        let rollout = Rollout {
            obs,
            u: us,
            log_prob: log_probs,
            advantage,
            returns,
        };
        optimize(
            &mut policy,
            &rollout,
            config,
            &mut rng,
            (&mut opt_mean, &mut opt_std, &mut opt_value),
            update,
        )?;
        log.updates.push(UpdateLog {
            update,
            timesteps,
            mean_return: if finished > 0 {
                sum_return / finished as f64
            } else {
                f64::NAN
            },
            mean_ep_len: if finished > 0 {
                sum_len as f64 / finished as f64
            } else {
                f64::NAN
            },
        });
    }
    Ok((policy, log))
}

fn optimize(
    policy: &mut GaussianPolicy,
    rollout: &Rollout,
    config: &PpoConfig,
    rng: &mut ChaCha8Rng,
    (opt_mean, opt_std, opt_value): (&mut Adam, &mut Adam, &mut Adam),
    update: usize,
) -> Result<()> {
    let n = rollout.obs.len();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..config.epochs_per_update {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let m = chunk.len() as f64;
            let adv: Vec<f64> = chunk.iter().map(|&i| rollout.advantage[i]).collect();
            let mean_adv = adv.iter().sum::<f64>() / m;
            let sd = if chunk.len() > 1 {
                (adv.iter().map(|a| (a - mean_adv).powi(2)).sum::<f64>() / (m - 1.0)).sqrt()
            } else {
                1.0
            };
            let mut g_mean = vec![0.0; policy.mean_net.n_params()];
            let mut g_std = [0.0; ACT_DIM];
            let mut g_value = vec![0.0; policy.value_net.n_params()];
            let mut loss = 0.0;
            let std: [f64; ACT_DIM] = [policy.log_std[0].exp(), policy.log_std[1].exp()];

            for (k, &i) in chunk.iter().enumerate() {
                let a = if chunk.len() > 1 {
                    (adv[k] - mean_adv) / (sd + 1e-8)
                } else {
                    adv[k]
                };
                let trace = policy.mean_trace(&rollout.obs[i]);
                let out = trace.output();
                let mean = [out[0], out[1]];
                let lp = policy.log_prob_unsquashed(&mean, &rollout.u[i]);
                let ratio = (lp - rollout.log_prob[i]).exp();
                loss -= (ratio * a)
                    .min(ratio.clamp(1.0 - config.clip_range, 1.0 + config.clip_range) * a)
                    / m;
                // loss = -surrogate, so d loss / d log_prob = -g / m
                let d_lp = -surrogate_grad(ratio, a, config.clip_range) / m;
                if d_lp != 0.0 {
                    let mut d_out = [0.0; ACT_DIM];
                    for j in 0..ACT_DIM {
                        let z = (rollout.u[i][j] - mean[j]) / std[j];
                        d_out[j] = d_lp * z / std[j];
                        g_std[j] += d_lp * (z * z - 1.0);
                    }
                    policy.mean_net.backward(&trace, &d_out, &mut g_mean);
                }

                let vtrace = policy.value_net.forward_trace(&rollout.obs[i]);
                let err = vtrace.output()[0] - rollout.returns[i];
                loss += config.value_coef * err * err / m;
                policy.value_net.backward(
                    &vtrace,
                    &[config.value_coef * 2.0 * err / m],
                    &mut g_value,
                );
            }
            // entropy bonus of the pre-squash Gaussian
            for g in &mut g_std {
                *g -= config.entropy_coef;
            }

            let norm = global_norm(&[&g_mean, &g_std, &g_value]);
            if !loss.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch: update,
                    message: format!("policy loss {loss}, gradient norm {norm}"),
                });
            }
            if norm > config.max_grad_norm {
                let s = config.max_grad_norm / (norm + 1e-6);
                g_mean
                    .iter_mut()
                    .chain(g_std.iter_mut())
                    .chain(g_value.iter_mut())
                    .for_each(|g| *g *= s);
            }
            opt_mean.step(policy.mean_net.params_mut(), &g_mean);
            opt_std.step(&mut policy.log_std, &g_std);
            opt_value.step(policy.value_net.params_mut(), &g_value);
        }
    }
    Ok(())
}

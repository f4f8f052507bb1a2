//! Deterministic evaluation: steps needed to reach the fast region from a
//! grid of starting guesses, plus full traces for chosen starts.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::env::{EnvConfig, Episode, THETA_RANGE_DEG, V_RANGE};
use super::policy::GaussianPolicy;

/// `n` points `lo + (i + 1) (hi - lo) / n`, covering `(lo, hi]`.
pub fn half_open_grid((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| lo + (i + 1) as f64 * (hi - lo) / n as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: usize,
    pub v: f64,
    pub theta_deg: f64,
    pub k: usize,
    /// Negated mismatch norm at this state; row 0 is the start.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    /// Actions taken until `k <= target_k`, `None` if never reached.
    pub steps_to_target: Option<usize>,
}

impl Trace {
    pub fn start_k(&self) -> usize {
        self.rows[0].k
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,v,theta_deg,k,reward\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.t, r.v, r.theta_deg, r.k, r.reward);
        }
        s
    }
}

/// Roll the mean action from `(v0, theta0_deg)` for at most the horizon.
pub fn rollout(policy: &GaussianPolicy, env: &EnvConfig, v0: f64, theta0_deg: f64) -> Trace {
    let start = env.state_at(v0, theta0_deg);
    let mut rows = vec![TraceRow {
        t: 0,
        v: start.v,
        theta_deg: start.theta_deg,
        k: start.k,
        reward: -env.residual_norm(start.v, start.theta_deg),
    }];
    if start.k <= env.target_k {
        return Trace {
            rows,
            steps_to_target: Some(0),
        };
    }
    let mut ep = Episode::new(env, start);
    loop {
        let (step, truncated) = ep.step(policy.deterministic_action(&ep.state));
        rows.push(TraceRow {
            t: ep.t,
            v: step.state.v,
            theta_deg: step.state.theta_deg,
            k: step.state.k,
            reward: step.reward,
        });
        if step.terminated {
            return Trace {
                rows,
                steps_to_target: Some(ep.t),
            };
        }
        if truncated {
            return Trace {
                rows,
                steps_to_target: None,
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepsMap {
    pub v_axis: Vec<f64>,
    pub theta_axis_deg: Vec<f64>,
    /// Row-major over `(v, theta)`; never-reached cells hold `horizon + 1`.
    pub steps: Vec<usize>,
    pub start_k: Vec<usize>,
    pub horizon: usize,
}

impl StepsMap {
    pub fn sentinel(&self) -> usize {
        self.horizon + 1
    }

    pub fn reached_fraction(&self) -> f64 {
        let hit = self.steps.iter().filter(|&&s| s <= self.horizon).count();
        hit as f64 / self.steps.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("v0,theta0_deg,steps_to_target\n");
        let nt = self.theta_axis_deg.len();
        for (iv, v) in self.v_axis.iter().enumerate() {
            for (it, t) in self.theta_axis_deg.iter().enumerate() {
                let _ = writeln!(s, "{v},{t},{}", self.steps[iv * nt + it]);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    pub map: StepsMap,
    pub traces: Vec<Trace>,
}

pub fn eval_policy(
    policy: &GaussianPolicy,
    env: &EnvConfig,
    v_axis: &[f64],
    theta_axis_deg: &[f64],
    trace_starts: &[(f64, f64)],
) -> PolicyEval {
    let cells: Vec<(f64, f64)> = v_axis
        .iter()
        .flat_map(|&v| theta_axis_deg.iter().map(move |&t| (v, t)))
        .collect();
    let runs: Vec<Trace> = cells
        .par_iter()
        .map(|&(v, t)| rollout(policy, env, v, t))
        .collect();
    let sentinel = env.horizon + 1;
    let map = StepsMap {
        v_axis: v_axis.to_vec(),
        theta_axis_deg: theta_axis_deg.to_vec(),
        steps: runs
            .iter()
            .map(|r| r.steps_to_target.unwrap_or(sentinel))
            .collect(),
        start_k: runs.iter().map(Trace::start_k).collect(),
        horizon: env.horizon,
    };
    let traces = trace_starts
        .iter()
        .map(|&(v, t)| rollout(policy, env, v, t))
        .collect();
    PolicyEval { map, traces }
}

/// The standard `n x n` evaluation grid over the full state ranges.
pub fn default_axes(n: usize) -> (Vec<f64>, Vec<f64>) {
    (
        half_open_grid(V_RANGE, n),
        half_open_grid(THETA_RANGE_DEG, n),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::StateVector;
    use crate::nr::nr_solve;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy() -> GaussianPolicy {
        GaussianPolicy::new(&[8, 8], &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn grid_is_half_open() {
        let g = half_open_grid((-90.0, 90.0), 20);
        assert_eq!(g.len(), 20);
        assert!(g[0] > -90.0);
        assert_eq!(*g.last().unwrap(), 90.0);
    }

    #[test]
    fn fast_start_takes_zero_steps() {
        let env = EnvConfig::default();
        let sol = nr_solve(&env.case, &StateVector::flat(1), &env.nr).solution;
        let t = rollout(&policy(), &env, sol.v[0], sol.theta[0].to_degrees());
        assert_eq!(t.steps_to_target, Some(0));
        assert_eq!(t.rows.len(), 1);
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let env = EnvConfig::default();
        let (va, ta) = default_axes(5);
        let a = eval_policy(&policy(), &env, &va, &ta, &[(2.0, 90.0)]);
        let b = eval_policy(&policy(), &env, &va, &ta, &[(2.0, 90.0)]);
        assert_eq!(a.map.to_csv(), b.map.to_csv());
        assert_eq!(a.traces[0].to_csv(), b.traces[0].to_csv());
        assert!(a.map.steps.iter().all(|&s| s <= env.horizon + 1));
        let tr = &a.traces[0];
        assert!(tr.rows.len() <= env.horizon + 1);
        assert!(tr.rows.iter().all(|r| r.reward <= 0.0));
        assert_eq!(a.map.to_csv().lines().count(), 26);
    }
}

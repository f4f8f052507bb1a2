//! Initial-guess adjustment as an episodic control problem on a two-bus case.
//!
//! The state is the guess `(V, theta)` at the load bus plus the number of
//! Newton-Raphson iterations `k` it needs; each action shifts the guess, and
//! the reward is the negated 2-norm of the power mismatch at the new guess.

use rand::Rng;

use crate::error::{Error, Result};
use crate::network::{norm_2, power_residual, GridCase, StateVector};
use crate::nr::{nr_solve, NrConfig};

pub const V_RANGE: (f64, f64) = (0.5, 2.0);
pub const THETA_RANGE_DEG: (f64, f64) = (-90.0, 90.0);
pub const DV_MAX: f64 = 0.5;
pub const DTHETA_MAX_DEG: f64 = 50.0;
/// `k` assigned to starts from which Newton-Raphson fails.
pub const K_FAILED: usize = 50;

/// Clamp into the half-open interval `(lo, hi]`.
pub fn clip_half_open(x: f64, (lo, hi): (f64, f64)) -> f64 {
    if x.is_nan() {
        return hi;
    }
    x.clamp(lo.next_up(), hi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlState {
    pub v: f64,
    pub theta_deg: f64,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlAction {
    pub dv: f64,
    pub dtheta_deg: f64,
}

impl RlAction {
    /// Map unbounded pre-squash values onto `(-0.5, 0.5] x (-50, 50]`.
    pub fn from_unbounded(u: [f64; 2]) -> Self {
        Self {
            dv: clip_half_open(DV_MAX * u[0].tanh(), (-DV_MAX, DV_MAX)),
            dtheta_deg: clip_half_open(
                DTHETA_MAX_DEG * u[1].tanh(),
                (-DTHETA_MAX_DEG, DTHETA_MAX_DEG),
            ),
        }
    }

    pub fn clipped(self) -> Self {
        Self {
            dv: clip_half_open(self.dv, (-DV_MAX, DV_MAX)),
            dtheta_deg: clip_half_open(self.dtheta_deg, (-DTHETA_MAX_DEG, DTHETA_MAX_DEG)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub case: GridCase,
    pub target_k: usize,
    pub horizon: usize,
    pub nr: NrConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            case: GridCase::rl_benchmark(),
            target_k: 3,
            horizon: 10,
            nr: NrConfig::default(),
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.nr.validate()?;
        if self.case.n_buses() != 2 {
            return Err(Error::InvalidCase(format!(
                "the adjustment environment needs a two-bus case, got {} buses",
                self.case.n_buses()
            )));
        }
        if self.target_k >= self.nr.max_iterations {
            return Err(Error::InvalidArgument(format!(
                "target_k ({}) must be below max_iterations ({})",
                self.target_k, self.nr.max_iterations
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        Ok(())
    }

    fn guess(&self, v: f64, theta_deg: f64) -> StateVector {
        StateVector::new(vec![v], vec![theta_deg.to_radians()])
    }

    /// Newton-Raphson iterations from a guess, `K_FAILED` on failure.
    pub fn iterations_from(&self, v: f64, theta_deg: f64) -> usize {
        let run = nr_solve(&self.case, &self.guess(v, theta_deg), &self.nr);
        if run.converged {
            run.iterations.min(K_FAILED)
        } else {
            K_FAILED
        }
    }

    pub fn residual_norm(&self, v: f64, theta_deg: f64) -> f64 {
        norm_2(&power_residual(&self.case, &self.guess(v, theta_deg)))
    }

    /// State at a given guess, clipped into range.
    pub fn state_at(&self, v: f64, theta_deg: f64) -> RlState {
        let v = clip_half_open(v, V_RANGE);
        let theta_deg = clip_half_open(theta_deg, THETA_RANGE_DEG);
        RlState {
            v,
            theta_deg,
            k: self.iterations_from(v, theta_deg),
        }
    }
}

/// Uniform draw over `(0.5, 2] x (-90, 90]`.
pub fn env_reset<R: Rng + ?Sized>(config: &EnvConfig, rng: &mut R) -> RlState {
    // 1 - u lies in (0, 1], giving the half-open intervals exactly
    let mut draw = |(lo, hi): (f64, f64)| lo + (hi - lo) * (1.0 - rng.random::<f64>());
    let v = draw(V_RANGE);
    let theta = draw(THETA_RANGE_DEG);
    config.state_at(v, theta)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub state: RlState,
    pub reward: f64,
    /// `k <= target_k` at the new state.
    pub terminated: bool,
}

pub fn env_step(state: &RlState, action: RlAction, config: &EnvConfig) -> Step {
    let a = action.clipped();
    let next = config.state_at(state.v + a.dv, state.theta_deg + a.dtheta_deg);
    Step {
        reward: -config.residual_norm(next.v, next.theta_deg),
        terminated: next.k <= config.target_k,
        state: next,
    }
}

/// Episode wrapper that enforces the horizon.
#[derive(Debug, Clone)]
pub struct Episode<'a> {
    pub config: &'a EnvConfig,
    pub state: RlState,
    pub t: usize,
}

impl<'a> Episode<'a> {
    pub fn new(config: &'a EnvConfig, state: RlState) -> Self {
        Self {
            config,
            state,
            t: 0,
        }
    }

    /// Returns the step plus `truncated` (horizon reached without termination).
    pub fn step(&mut self, action: RlAction) -> (Step, bool) {
        assert!(self.t < self.config.horizon, "episode already finished");
        let s = env_step(&self.state, action, self.config);
        self.state = s.state;
        self.t += 1;
        let truncated = !s.terminated && self.t >= self.config.horizon;
        (s, truncated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn solution(cfg: &EnvConfig) -> (f64, f64) {
        let run = nr_solve(&cfg.case, &StateVector::flat(1), &cfg.nr);
        (run.solution.v[0], run.solution.theta[0].to_degrees())
    }

    #[test]
    fn seeded_resets_repeat() {
        let cfg = EnvConfig::default();
        let a = env_reset(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        let b = env_reset(&cfg, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
    }

    #[test]
    fn resets_stay_in_range() {
        let cfg = EnvConfig {
            nr: NrConfig {
                max_iterations: 5,
                ill_conditioned_threshold: 5,
                ..NrConfig::default()
            },
            target_k: 3,
            ..EnvConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let s = env_reset(&cfg, &mut rng);
            assert!(s.v > 0.5 && s.v <= 2.0);
            assert!(s.theta_deg > -90.0 && s.theta_deg <= 90.0);
            assert!(s.k <= K_FAILED);
        }
    }

    #[test]
    fn solution_state_needs_no_iterations() {
        let cfg = EnvConfig::default();
        let (v, t) = solution(&cfg);
        let s = cfg.state_at(v, t);
        assert_eq!(s.k, 0);
        let step = env_step(
            &s,
            RlAction {
                dv: 0.0,
                dtheta_deg: 0.0,
            },
            &cfg,
        );
        assert!(step.terminated);
        assert!(step.reward >= -2.0 * cfg.nr.tolerance * 2f64.sqrt());
    }

    #[test]
    fn reward_is_negated_residual_norm() {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = num_complex::Complex64::new(100.0, 10.0);
        for _ in 0..200 {
            let s = env_reset(&cfg, &mut rng);
            let a = RlAction::from_unbounded([
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
            ]);
            let step = env_step(&s, a, &cfg);
            // independent oracle: S2 = V2 conj(I2), I2 = y (V2 - V1)
            let v2 =
                num_complex::Complex64::from_polar(step.state.v, step.state.theta_deg.to_radians());
            let s2 = v2 * (y * (v2 - 1.0)).conj();
            let (dp, dq) = (s2.re + 0.9, s2.im + 0.6);
            let expected = -(dp * dp + dq * dq).sqrt();
            assert!((step.reward - expected).abs() <= 1e-9 * expected.abs().max(1.0));
            assert!(step.reward <= 0.0);
        }
    }

    #[test]
    fn clipping_is_idempotent_and_half_open() {
        for x in [-5.0, 0.5, 0.7, 2.0, 9.0, f64::NAN] {
            let c = clip_half_open(x, V_RANGE);
            assert!(c > 0.5 && c <= 2.0);
            assert_eq!(clip_half_open(c, V_RANGE), c);
        }
        for u in [-1e3, -2.0, 0.0, 1.0, 1e3] {
            let a = RlAction::from_unbounded([u, u]);
            assert!(a.dv > -DV_MAX && a.dv <= DV_MAX);
            assert!(a.dtheta_deg > -DTHETA_MAX_DEG && a.dtheta_deg <= DTHETA_MAX_DEG);
            assert_eq!(a.clipped(), a);
        }
    }

    #[test]
    fn episodes_end_by_the_horizon() {
        let cfg = EnvConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let mut ep = Episode::new(&cfg, env_reset(&cfg, &mut rng));
            loop {
                let a = RlAction::from_unbounded([
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                ]);
                let (s, truncated) = ep.step(a);
                assert_eq!(s.terminated, s.state.k <= cfg.target_k);
                if s.terminated || truncated {
                    break;
                }
            }
            assert!(ep.t <= cfg.horizon);
        }
    }

    #[test]
    fn config_checks() {
        let bad = EnvConfig {
            target_k: 50,
            ..EnvConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(EnvConfig {
            case: crate::network::fixtures::three_bus(),
            ..EnvConfig::default()
        }
        .validate()
        .is_err());
        assert!(EnvConfig::default().validate().is_ok());
    }
}

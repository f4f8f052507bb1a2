//! Tanh-squashed Gaussian policy with a separate value network.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use super::env::{RlAction, RlState, DTHETA_MAX_DEG, DV_MAX};
use crate::error::{Error, Result};
use crate::neural::mlp::{Mlp, Trace};

const FORMAT_TAG: &str = "pflab-policy 1";
const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const OBS_DIM: usize = 3;
pub const ACT_DIM: usize = 2;
const ACTION_SCALE: [f64; ACT_DIM] = [DV_MAX, DTHETA_MAX_DEG];

/// Fixed affine map of `(V, theta, k)` onto roughly `[-1, 1]^3`.
pub fn observe(state: &RlState) -> [f64; OBS_DIM] {
    [
        (state.v - 1.25) / 0.75,
        state.theta_deg / 90.0,
        state.k as f64 / 25.0 - 1.0,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicy {
    /// Observation to pre-squash action mean.
    pub mean_net: Mlp,
    pub log_std: [f64; ACT_DIM],
    pub value_net: Mlp,
}

/// `ln(1 - tanh(u)^2)` without cancellation for large `|u|`.
fn log_sech2(u: f64) -> f64 {
    let a = u.abs();
    2.0 * (std::f64::consts::LN_2 - a - (-2.0 * a).exp().ln_1p())
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(hidden: &[usize], rng: &mut R) -> Self {
        let sizes = |out: usize| {
            let mut s = vec![OBS_DIM];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let mut mean_net = Mlp::glorot(&sizes(ACT_DIM), rng);
        mean_net.scale_output_layer(0.01);
        let value_net = Mlp::glorot(&sizes(1), rng);
        Self {
            mean_net,
            log_std: [0.0; ACT_DIM],
            value_net,
        }
    }

    pub fn mean(&self, obs: &[f64; OBS_DIM]) -> [f64; ACT_DIM] {
        let m = self.mean_net.forward(obs);
        [m[0], m[1]]
    }

    pub fn mean_trace(&self, obs: &[f64; OBS_DIM]) -> Trace {
        self.mean_net.forward_trace(obs)
    }

    pub fn value(&self, obs: &[f64; OBS_DIM]) -> f64 {
        self.value_net.forward(obs)[0]
    }

    /// Gaussian log-density of pre-squash `u`.
    pub fn log_prob_unsquashed(&self, mean: &[f64; ACT_DIM], u: &[f64; ACT_DIM]) -> f64 {
        (0..ACT_DIM)
            .map(|i| {
                let z = (u[i] - mean[i]) * (-self.log_std[i]).exp();
                -0.5 * z * z - self.log_std[i] - 0.5 * LN_2PI
            })
            .sum()
    }

    /// Log-density of the squashed action `(dv, dtheta)` given pre-squash `u`.
    pub fn log_prob(&self, mean: &[f64; ACT_DIM], u: &[f64; ACT_DIM]) -> f64 {
        let correction: f64 = (0..ACT_DIM)
            .map(|i| ACTION_SCALE[i].ln() + log_sech2(u[i]))
            .sum();
        self.log_prob_unsquashed(mean, u) - correction
    }

    pub fn deterministic_action(&self, state: &RlState) -> RlAction {
        RlAction::from_unbounded(self.mean(&observe(state)))
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let sizes = |n: &Mlp| {
            n.sizes()
                .iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "{FORMAT_TAG}");
        let _ = writeln!(s, "mean_layers {}", sizes(&self.mean_net));
        let _ = writeln!(s, "value_layers {}", sizes(&self.value_net));
        let _ = writeln!(s, "activation tanh");
        let _ = writeln!(s, "log_std {}", join(&self.log_std));
        let _ = writeln!(s, "mean_params {}", join(self.mean_net.params()));
        let _ = writeln!(s, "value_params {}", join(self.value_net.params()));
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, field: &str, message: String| Error::Parse {
            path: source.to_string(),
            line,
            field: field.to_string(),
            message,
        };
        let lines: Vec<&str> = text.lines().collect();
        if lines.first().map(|l| l.trim()) != Some(FORMAT_TAG) {
            return Err(err(1, "header", format!("expected '{FORMAT_TAG}'")));
        }
        let field = |key: &str| -> Result<(usize, &str)> {
            lines
                .iter()
                .enumerate()
                .find_map(|(i, l)| {
                    l.strip_prefix(key)
                        .filter(|r| r.is_empty() || r.starts_with(' '))
                        .map(|r| (i + 1, r.trim()))
                })
                .ok_or_else(|| err(0, key, "missing".into()))
        };
        let floats = |key: &str| -> Result<Vec<f64>> {
            let (n, rest) = field(key)?;
            rest.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| err(n, key, format!("'{t}': {e}")))
                })
                .collect()
        };
        let ints = |key: &str| -> Result<Vec<usize>> {
            let (n, rest) = field(key)?;
            rest.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|e| err(n, key, format!("'{t}': {e}")))
                })
                .collect()
        };
        let (n, act) = field("activation")?;
        if act != "tanh" {
            return Err(err(
                n,
                "activation",
                format!("unsupported activation '{act}'"),
            ));
        }
        let net = |layers: &str, params: &str, out: usize| -> Result<Mlp> {
            let sizes = ints(layers)?;
            let (n, _) = field(layers)?;
            if sizes.first() != Some(&OBS_DIM) || sizes.last() != Some(&out) {
                return Err(err(
                    n,
                    layers,
                    format!("expected {OBS_DIM} inputs and {out} outputs"),
                ));
            }
            let p = floats(params)?;
            let count = p.len();
            Mlp::from_params(&sizes, p).ok_or_else(|| {
                err(
                    field(params).unwrap().0,
                    params,
                    format!("wrong parameter count {count}"),
                )
            })
        };
        let log_std = floats("log_std")?;
        if log_std.len() != ACT_DIM {
            return Err(err(
                field("log_std")?.0,
                "log_std",
                format!("expected {ACT_DIM} values"),
            ));
        }
        Ok(Self {
            mean_net: net("mean_layers", "mean_params", ACT_DIM)?,
            log_std: [log_std[0], log_std[1]],
            value_net: net("value_layers", "value_params", 1)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicySample {
    pub action: RlAction,
    /// Pre-squash draw.
    pub u: [f64; ACT_DIM],
    /// Log-density of `action`, squash correction included.
    pub log_prob: f64,
}

pub fn policy_sample<R: Rng + ?Sized>(
    policy: &GaussianPolicy,
    state: &RlState,
    rng: &mut R,
) -> PolicySample {
    let mean = policy.mean(&observe(state));
    let mut u = [0.0; ACT_DIM];
    for i in 0..ACT_DIM {
        let eps: f64 = rng.sample(StandardNormal);
        u[i] = mean[i] + policy.log_std[i].exp() * eps;
    }
    PolicySample {
        action: RlAction::from_unbounded(u),
        u,
        log_prob: policy.log_prob(&mean, &u),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> GaussianPolicy {
        let mut p = GaussianPolicy::new(&[8, 8], &mut ChaCha8Rng::seed_from_u64(seed));
        // larger output weights so the mean is not ~0
        p.mean_net.scale_output_layer(50.0);
        p
    }

    fn state() -> RlState {
        RlState {
            v: 1.4,
            theta_deg: -30.0,
            k: 7,
        }
    }

    #[test]
    fn tiny_std_returns_squashed_mean() {
        let mut p = policy(1);
        p.log_std = [-40.0; 2];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = policy_sample(&p, &state(), &mut rng).action;
        let d = p.deterministic_action(&state());
        assert!((a.dv - d.dv).abs() < 1e-12);
        assert!((a.dtheta_deg - d.dtheta_deg).abs() < 1e-10);
    }

    #[test]
    fn sample_mean_matches_squashed_mean() {
        let mut p = policy(2);
        p.log_std = [-3.0, -3.0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let a = policy_sample(&p, &state(), &mut rng).action.dv;
            s += a;
            s2 += a * a;
        }
        let mean = s / n as f64;
        let sd = (s2 / n as f64 - mean * mean).sqrt();
        let m = p.mean(&observe(&state()));
        // with small noise the mean of tanh(u) is tanh(mean) up to O(sigma^2)
        let sigma = (-3f64).exp();
        let bias = DV_MAX * (m[0].tanh() * (1.0 - m[0].tanh().powi(2))).abs() * sigma * sigma;
        assert!(
            (mean - DV_MAX * m[0].tanh()).abs() <= 3.0 * sd / (n as f64).sqrt() + bias,
            "{mean} vs {}",
            DV_MAX * m[0].tanh()
        );
    }

    #[test]
    fn log_prob_matches_histogram_density() {
        let mut p = policy(3);
        p.log_std = [-0.5, -0.5];
        let mean = p.mean(&observe(&state()));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 400_000;
        let bins = 20;
        let width = 2.0 * DV_MAX / bins as f64;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let dv = policy_sample(&p, &state(), &mut rng).action.dv;
            let b = (((dv + DV_MAX) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        // marginal density of dv: integrate out dtheta by using the 1-D formula
        let sd = p.log_std[0].exp();
        for (b, &c) in counts.iter().enumerate().skip(2).take(bins - 4) {
            let a = -DV_MAX + (b as f64 + 0.5) * width;
            let u = (a / DV_MAX).atanh();
            let z = (u - mean[0]) / sd;
            let density = (-0.5 * z * z).exp()
                / (sd * (2.0 * std::f64::consts::PI).sqrt())
                / (DV_MAX * (1.0 - (a / DV_MAX).powi(2)));
            let empirical = c as f64 / (n as f64 * width);
            let se = (c as f64).sqrt().max(1.0) / (n as f64 * width);
            assert!(
                (empirical - density).abs() < 4.0 * se + 0.02 * density,
                "bin {b}: {empirical} vs {density}"
            );
        }
        // the two-dimensional log_prob is the sum of the per-axis log densities
        let u = [0.3, -0.8];
        let lp = p.log_prob(&mean, &u);
        let per_axis: f64 = (0..2)
            .map(|i| {
                let sd = p.log_std[i].exp();
                let z = (u[i] - mean[i]) / sd;
                let a = u[i].tanh();
                (-0.5 * z * z).exp()
                    / (sd * (2.0 * std::f64::consts::PI).sqrt())
                    / (ACTION_SCALE[i] * (1.0 - a * a))
            })
            .map(f64::ln)
            .sum();
        assert!((lp - per_axis).abs() < 1e-12);
    }

    #[test]
    fn log_sech2_is_stable() {
        for u in [0.0f64, 0.5, -3.0, 30.0, -400.0] {
            let direct = (1.0 - u.tanh().powi(2)).ln();
            if direct.is_finite() {
                assert!((log_sech2(u) - direct).abs() < 1e-9);
            }
            assert!(log_sech2(u).is_finite());
        }
    }

    #[test]
    fn seeded_samples_repeat() {
        let p = policy(4);
        let a = policy_sample(&p, &state(), &mut ChaCha8Rng::seed_from_u64(9));
        let b = policy_sample(&p, &state(), &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn text_round_trip() {
        let p = policy(5);
        assert_eq!(GaussianPolicy::from_text(&p.to_text(), "mem").unwrap(), p);
        let broken = p.to_text().replace("log_std 0 0", "log_std 0");
        assert!(GaussianPolicy::from_text(&broken, "mem").is_err());
    }
}

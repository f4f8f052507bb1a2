use std::fmt;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;

use super::features::{n_features, n_outputs};
use super::mlp::{Mlp, Trace};
use crate::error::{Error, Result};
use crate::network::StateVector;

/// Offset added after the softplus so predicted magnitudes stay away from 0.
pub const V_FLOOR: f64 = 0.1;

const FORMAT_TAG: &str = "pflab-initializer 1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Supervised,
    Unsupervised,
    Semisupervised,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [
        Scheme::Supervised,
        Scheme::Semisupervised,
        Scheme::Unsupervised,
    ];

    pub fn needs_labels(self) -> bool {
        !matches!(self, Scheme::Unsupervised)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Supervised => "supervised",
            Scheme::Unsupervised => "unsupervised",
            Scheme::Semisupervised => "semisupervised",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Scheme::Supervised),
            "unsupervised" => Ok(Scheme::Unsupervised),
            "semisupervised" => Ok(Scheme::Semisupervised),
            other => Err(Error::InvalidArgument(format!(
                "unknown scheme '{other}' (expected supervised, unsupervised or semisupervised)"
            ))),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Learned map from case features to an initial state.
///
/// Raw network outputs are `[v_raw; theta]` over the PQ buses; magnitudes are
/// `softplus(v_raw) + V_FLOOR`, angles are used as-is (radians). Inputs are
/// standardized with statistics fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct InitModel {
    pub scheme: Scheme,
    n_buses: usize,
    input_mean: Vec<f64>,
    input_std: Vec<f64>,
    net: Mlp,
}

impl InitModel {
    /// Glorot-initialized network whose output at the mean input is the flat
    /// start (1.0, 0).
    pub fn new<R: Rng + ?Sized>(
        scheme: Scheme,
        n_buses: usize,
        hidden: &[usize],
        input_mean: Vec<f64>,
        input_std: Vec<f64>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut sizes = vec![n_features(n_buses)];
        sizes.extend_from_slice(hidden);
        sizes.push(n_outputs(n_buses));
        let mut net = Mlp::glorot(&sizes, rng);
        let m = n_buses - 1;
        let bias = softplus_inverse(1.0 - V_FLOOR);
        let n = net.n_params();
        let out = net.n_outputs();
        for p in &mut net.params_mut()[n - out..n - out + m] {
            *p = bias;
        }
        Self::from_parts(scheme, n_buses, input_mean, input_std, net)
    }

    pub fn from_parts(
        scheme: Scheme,
        n_buses: usize,
        input_mean: Vec<f64>,
        mut input_std: Vec<f64>,
        net: Mlp,
    ) -> Result<Self> {
        if n_buses < 2 {
            return Err(Error::InvalidArgument(format!(
                "n_buses must be >= 2, got {n_buses}"
            )));
        }
        let nf = n_features(n_buses);
        if net.n_inputs() != nf || net.n_outputs() != n_outputs(n_buses) {
            return Err(Error::Dimension(format!(
                "network is {}->{}, a {n_buses}-bus model needs {nf}->{}",
                net.n_inputs(),
                net.n_outputs(),
                n_outputs(n_buses)
            )));
        }
        if input_mean.len() != nf || input_std.len() != nf {
            return Err(Error::Dimension(format!(
                "standardization vectors have lengths {} and {}, expected {nf}",
                input_mean.len(),
                input_std.len()
            )));
        }
        for s in &mut input_std {
            if !(*s > 1e-12) || !s.is_finite() {
                *s = 1.0;
            }
        }
        Ok(Self {
            scheme,
            n_buses,
            input_mean,
            input_std,
            net,
        })
    }

    pub fn n_buses(&self) -> usize {
        self.n_buses
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    fn standardize(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.input_mean.len() {
            return Err(Error::Dimension(format!(
                "got {} features, model expects {}",
                features.len(),
                self.input_mean.len()
            )));
        }
        Ok(features
            .iter()
            .zip(self.input_mean.iter().zip(&self.input_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    fn transform(&self, raw: &[f64]) -> StateVector {
        let m = self.n_buses - 1;
        StateVector::new(
            raw[..m].iter().map(|&r| softplus(r) + V_FLOOR).collect(),
            raw[m..].to_vec(),
        )
    }

    pub fn predict(&self, features: &[f64]) -> Result<StateVector> {
        Ok(self.predict_trace(features)?.0)
    }

    pub fn predict_trace(&self, features: &[f64]) -> Result<(StateVector, Trace)> {
        let z = self.standardize(features)?;
        let trace = self.net.forward_trace(&z);
        Ok((self.transform(trace.output()), trace))
    }

    /// Accumulate parameter gradients given `d loss / d V` and `d loss / d theta`.
    pub fn backward(&self, trace: &Trace, d_v: &[f64], d_theta: &[f64], grad: &mut [f64]) {
        let m = self.n_buses - 1;
        let raw = trace.output();
        let mut g = Vec::with_capacity(2 * m);
        g.extend(d_v.iter().zip(&raw[..m]).map(|(d, &r)| d * sigmoid(r)));
        g.extend_from_slice(d_theta);
        self.net.backward(trace, &g, grad);
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(s, "{FORMAT_TAG}");
        let _ = writeln!(s, "scheme {}", self.scheme);
        let _ = writeln!(s, "buses {}", self.n_buses);
        let sizes: Vec<String> = self.net.sizes().iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "layers {}", sizes.join(" "));
        let _ = writeln!(s, "activation tanh");
        let _ = writeln!(s, "output softplus+{V_FLOOR} identity");
        let _ = writeln!(s, "input_mean {}", join(&self.input_mean));
        let _ = writeln!(s, "input_std {}", join(&self.input_std));
        let _ = writeln!(s, "params");
        let sizes = self.net.sizes();
        let mut offset = 0;
        for w in sizes.windows(2) {
            let (fi, fo) = (w[0], w[1]);
            for j in 0..fo {
                let _ = writeln!(
                    s,
                    "{}",
                    join(&self.net.params()[offset + j * fi..offset + (j + 1) * fi])
                );
            }
            offset += fi * fo;
            let _ = writeln!(s, "{}", join(&self.net.params()[offset..offset + fo]));
            offset += fo;
        }
        s
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, field: &str, message: String| Error::Parse {
            path: source.to_string(),
            line,
            field: field.to_string(),
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |field: &str| {
            lines
                .next()
                .ok_or_else(|| err(0, field, "unexpected end of file".into()))
        };
        let (n, tag) = next("header")?;
        if tag != FORMAT_TAG {
            return Err(err(
                n,
                "header",
                format!("expected '{FORMAT_TAG}', got '{tag}'"),
            ));
        }
        let keyed = |(n, l): (usize, &str), key: &str| -> Result<String> {
            l.strip_prefix(key)
                .filter(|rest| rest.is_empty() || rest.starts_with(' '))
                .map(|rest| rest.trim().to_string())
                .ok_or_else(|| err(n, key, format!("expected '{key}' line")))
        };
        let floats = |n: usize, field: &str, s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| err(n, field, format!("'{t}': {e}")))
                })
                .collect()
        };
        let l = next("scheme")?;
        let scheme: Scheme = keyed(l, "scheme")?
            .parse()
            .map_err(|e: Error| err(l.0, "scheme", e.to_string()))?;
        let l = next("buses")?;
        let n_buses: usize = keyed(l, "buses")?
            .parse()
            .map_err(|e| err(l.0, "buses", format!("{e}")))?;
        let l = next("layers")?;
        let sizes: Vec<usize> = keyed(l, "layers")?
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|e| err(l.0, "layers", format!("'{t}': {e}")))
            })
            .collect::<Result<_>>()?;
        let l = next("activation")?;
        let act = keyed(l, "activation")?;
        if act != "tanh" {
            return Err(err(
                l.0,
                "activation",
                format!("unsupported activation '{act}'"),
            ));
        }
        let l = next("output")?;
        keyed(l, "output")?;
        let l = next("input_mean")?;
        let mean = floats(l.0, "input_mean", &keyed(l, "input_mean")?)?;
        let l = next("input_std")?;
        let std = floats(l.0, "input_std", &keyed(l, "input_std")?)?;
        let l = next("params")?;
        keyed(l, "params")?;
        let mut params = Vec::new();
        let mut last_line = l.0;
        for (n, line) in lines {
            if line.is_empty() {
                continue;
            }
            params.extend(floats(n, "params", line)?);
            last_line = n;
        }
        if sizes.len() < 2 {
            return Err(err(0, "layers", "need at least two layer sizes".into()));
        }
        let expected: usize = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let net = Mlp::from_params(&sizes, params.clone()).ok_or_else(|| {
            err(
                last_line,
                "params",
                format!("expected {expected} parameters, found {}", params.len()),
            )
        })?;
        Self::from_parts(scheme, n_buses, mean, std, net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}

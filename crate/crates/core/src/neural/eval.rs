//! Initializer evaluation: Newton-Raphson from each predicted start.

use std::fmt::Write as _;

use rayon::prelude::*;

use super::data::Record;
use super::model::InitModel;
use crate::error::{Error, Result};
use crate::network::{power_residual, StateVector};
use crate::nr::{nr_solve, FailureKind, NrConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// Iterations, or the failure sentinel.
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<FailureKind>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub label: String,
    pub n_samples: usize,
    pub n_converged: usize,
    /// Mean over all samples, failures counted at the sentinel.
    pub mean_iterations: f64,
    pub mae_v: f64,
    /// Degrees.
    pub mae_theta_deg: f64,
    /// Mean `|dP|` and `|dQ|` at the final iterate of converged runs; `None`
    /// when nothing converged.
    pub mean_pf_residual: Option<(f64, f64)>,
    pub samples: Vec<SampleOutcome>,
}

impl EvalMetrics {
    pub fn samples_csv(&self) -> String {
        let mut s = String::from("sample,iterations,converged\n");
        for (i, o) in self.samples.iter().enumerate() {
            let _ = writeln!(s, "{i},{},{}", o.iterations, u8::from(o.converged));
        }
        s
    }

    /// Samples that converged within `limit` iterations.
    pub fn converged_within(&self, limit: usize) -> usize {
        self.samples
            .iter()
            .filter(|o| o.converged && o.iterations <= limit)
            .count()
    }

    /// Iteration histogram as `(iterations, count)` over converged runs, plus
    /// the number of failures.
    pub fn histogram(&self) -> (Vec<(usize, usize)>, usize) {
        let mut counts = std::collections::BTreeMap::new();
        let mut failed = 0;
        for o in &self.samples {
            if o.converged {
                *counts.entry(o.iterations).or_insert(0) += 1;
            } else {
                failed += 1;
            }
        }
        (counts.into_iter().collect(), failed)
    }
}

/// Run Newton-Raphson on each record from the matching start.
pub fn evaluate_starts(
    label: &str,
    records: &[&Record],
    starts: &[StateVector],
    config: &NrConfig,
) -> Result<EvalMetrics> {
    if records.len() != starts.len() {
        return Err(Error::Dimension(format!(
            "{} records but {} starts",
            records.len(),
            starts.len()
        )));
    }
    let mut labels = Vec::with_capacity(records.len());
    for r in records {
        labels.push(r.labels.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "test record of system {} has no reference solution",
                r.system
            ))
        })?);
    }
    config.validate()?;

    let runs: Vec<_> = records
        .par_iter()
        .zip(starts.par_iter())
        .map(|(r, x0)| nr_solve(&r.case, x0, config))
        .collect();

    let n = records.len();
    let mut mae_v = 0.0;
    let mut mae_t = 0.0;
    let mut n_entries = 0usize;
    for (x0, y) in starts.iter().zip(&labels) {
        for i in 0..y.len() {
            mae_v += (x0.v[i] - y.v[i]).abs();
            mae_t += (x0.theta[i] - y.theta[i]).abs().to_degrees();
            n_entries += 1;
        }
    }
    let (mut dp, mut dq, mut n_conv) = (0.0, 0.0, 0usize);
    let mut samples = Vec::with_capacity(n);
    for (r, run) in records.iter().zip(&runs) {
        if run.converged {
            let f = power_residual(&r.case, &run.solution);
            let m = f.len() / 2;
            dp += f[..m].iter().map(|x| x.abs()).sum::<f64>() / m as f64;
            dq += f[m..].iter().map(|x| x.abs()).sum::<f64>() / m as f64;
            n_conv += 1;
        }
        samples.push(SampleOutcome {
            iterations: run.iterations_or_sentinel(config),
            converged: run.converged,
            failure: run.failure,
        });
    }
    let denom = n_entries.max(1) as f64;
    Ok(EvalMetrics {
        label: label.to_string(),
        n_samples: n,
        n_converged: n_conv,
        mean_iterations: samples.iter().map(|s| s.iterations as f64).sum::<f64>() / n.max(1) as f64,
        mae_v: mae_v / denom,
        mae_theta_deg: mae_t / denom,
        mean_pf_residual: (n_conv > 0).then(|| (dp / n_conv as f64, dq / n_conv as f64)),
        samples,
    })
}

pub fn evaluate(model: &InitModel, records: &[&Record], config: &NrConfig) -> Result<EvalMetrics> {
    let starts = records
        .iter()
        .map(|r| model.predict(&r.features))
        .collect::<Result<Vec<_>>>()?;
    evaluate_starts(&model.scheme.to_string(), records, &starts, config)
}

/// The `V = 0, theta = 0` baseline.
pub fn evaluate_zero(records: &[&Record], config: &NrConfig) -> Result<EvalMetrics> {
    let starts: Vec<StateVector> = records
        .iter()
        .map(|r| StateVector::uniform(r.case.n_pq(), 0.0, 0.0))
        .collect();
    evaluate_starts("zero", records, &starts, config)
}

/// Side-by-side metrics table, one column per evaluated initializer.
pub fn metrics_table(metrics: &[EvalMetrics]) -> String {
    let width = 24;
    let mut s = String::new();
    let _ = write!(s, "{:<18}", "metric");
    for m in metrics {
        let _ = write!(s, "{:>width$}", m.label);
    }
    s.push('\n');
    let row = |s: &mut String, name: &str, cell: &dyn Fn(&EvalMetrics) -> String| {
        let _ = write!(s, "{name:<18}");
        for m in metrics {
            let _ = write!(s, "{:>width$}", cell(m));
        }
        s.push('\n');
    };
    row(&mut s, "iterations", &|m| {
        format!("{:.2}", m.mean_iterations)
    });
    row(&mut s, "converged", &|m| {
        format!("{}/{}", m.n_converged, m.n_samples)
    });
    row(&mut s, "mae_v", &|m| format!("{:.4}", m.mae_v));
    row(&mut s, "mae_theta_deg", &|m| {
        format!("{:.4}", m.mae_theta_deg)
    });
    row(&mut s, "pf_residual", &|m| match m.mean_pf_residual {
        Some((p, q)) => format!("{p:.2e}+{q:.2e}j"),
        None => "n/a".into(),
    });
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::data::{generate_dataset, DatasetConfig, Split};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_records() -> Vec<Record> {
        let cfg = DatasetConfig {
            n_systems: 4,
            n_states: 5,
            test_systems: 4,
            ..DatasetConfig::default()
        };
        generate_dataset(
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(8),
            &NrConfig::default(),
        )
        .unwrap()
        .records
    }

    #[test]
    fn exact_starts_take_zero_iterations() {
        let recs = test_records();
        let refs: Vec<&Record> = recs.iter().filter(|r| r.split == Split::Test).collect();
        let starts: Vec<StateVector> = refs.iter().map(|r| r.labels.clone().unwrap()).collect();
        let m = evaluate_starts("oracle", &refs, &starts, &NrConfig::default()).unwrap();
        assert_eq!(m.mean_iterations, 0.0);
        assert_eq!(m.mae_v, 0.0);
        assert_eq!(m.mae_theta_deg, 0.0);
        assert_eq!(m.n_converged, refs.len());
        let (p, q) = m.mean_pf_residual.unwrap();
        assert!(p <= 1e-8 && q <= 1e-8);
    }

    #[test]
    fn zero_start_never_converges() {
        let recs = test_records();
        let refs: Vec<&Record> = recs.iter().collect();
        let cfg = NrConfig::default();
        let m = evaluate_zero(&refs, &cfg).unwrap();
        assert_eq!(m.n_converged, 0);
        assert_eq!(m.mean_iterations, cfg.failure_sentinel() as f64);
        assert!(m.mean_pf_residual.is_none());
        assert!(metrics_table(std::slice::from_ref(&m)).contains("n/a"));
        assert_eq!(m.samples_csv().lines().count(), refs.len() + 1);
    }

    #[test]
    fn evaluation_is_pure() {
        let recs = test_records();
        let refs: Vec<&Record> = recs.iter().collect();
        let starts: Vec<StateVector> = refs
            .iter()
            .map(|r| StateVector::flat(r.case.n_pq()))
            .collect();
        let a = evaluate_starts("flat", &refs, &starts, &NrConfig::default()).unwrap();
        let b = evaluate_starts("flat", &refs, &starts, &NrConfig::default()).unwrap();
        assert_eq!(a, b);
        let (hist, failed) = a.histogram();
        assert_eq!(hist.iter().map(|h| h.1).sum::<usize>() + failed, refs.len());
    }
}

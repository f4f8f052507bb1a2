//! Analytical basin-of-attraction estimate for the fixed-point form of the
//! power-flow equations.
//!
//! With `Y_NN` the admittance matrix with the slack row and column removed,
//! `Z_N = Y_NN^-1`, and `Y_M` the column coupling the PQ buses to the slack,
//! the PQ voltages satisfy `V = T(V) = Z_N (conj(s_N / V) - Y_M v_S)`. For a
//! ball of radius `r` around `nu * 1`, the admissible radii are the positive
//! roots of
//!
//! ```text
//! r^3 - (2 nu + a2) r^2 + (nu^2 + 2 a2 nu - a1) r - a2 nu^2 = 0
//! a1 = |Z_N conj(s_N)|_inf
//! a2 = |V_c - Z_N (conj(s_N / V_c) - Y_M v_S)|_inf
//! ```
//!
//! The contraction constant of the underlying fixed-point theorem does not
//! enter the cubic; [`verify_contraction`] checks the estimate numerically by
//! running Newton-Raphson from warm starts inside the ball.

use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{GridCase, StateVector};
use crate::nr::{nr_solve, NrConfig, StartClass};

/// Lower clip for sampled warm-start magnitudes.
pub const MIN_WARM_VOLTAGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct BasinInputs {
    pub z_reduced: DMatrix<Complex64>,
    pub s_pq: DVector<Complex64>,
    pub y_slack_coupling: DVector<Complex64>,
    pub v_slack: Complex64,
    pub v_center: DVector<Complex64>,
    pub nu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasinEstimate {
    pub nu: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    /// All real roots of the cubic, ascending, repeated by multiplicity.
    pub roots: Vec<f64>,
    /// Smallest positive root (NaN when there is none).
    pub r_min: f64,
    /// Largest positive root (NaN when there is none).
    pub r_max: f64,
    /// At least two positive real roots.
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CenterChoice {
    /// `nu = 1`.
    Nominal,
    /// `nu = |v_S|`.
    Slack,
    /// `nu` = mean magnitude of a previous power-flow solution.
    PreviousSolution(StateVector),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RadiusChoice {
    Min,
    Max,
}

fn slack_removed(case: &GridCase) -> (Vec<usize>, DMatrix<Complex64>) {
    let pq = case.pq_buses();
    let y = case.admittance();
    let ynn = DMatrix::from_fn(pq.len(), pq.len(), |i, j| y[(pq[i], pq[j])]);
    (pq, ynn)
}

/// Inverse of the slack-removed admittance matrix.
pub fn reduced_impedance(case: &GridCase) -> Result<DMatrix<Complex64>> {
    let (_, ynn) = slack_removed(case);
    let z = ynn.clone().try_inverse().ok_or(Error::SingularSubmatrix)?;
    let check = &z * &ynn - DMatrix::identity(ynn.nrows(), ynn.nrows());
    let err = check.iter().map(|c| c.norm()).fold(0.0, f64::max);
    if !err.is_finite() || err > 1e-10 {
        return Err(Error::SingularSubmatrix);
    }
    Ok(z)
}

impl BasinInputs {
    /// Inputs for a ball centered at `nu * 1`.
    pub fn from_case(case: &GridCase, nu: f64) -> Result<Self> {
        if !(nu > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "center magnitude must be > 0, got {nu}"
            )));
        }
        let z_reduced = reduced_impedance(case)?;
        let pq = case.pq_buses();
        let y = case.admittance();
        let slack = case.slack_index();
        let s_pq = DVector::from_iterator(
            pq.len(),
            pq.iter()
                .map(|&i| Complex64::new(case.p_injection()[i], case.q_injection()[i])),
        );
        let y_slack_coupling = DVector::from_iterator(pq.len(), pq.iter().map(|&i| y[(i, slack)]));
        Ok(Self {
            z_reduced,
            s_pq,
            y_slack_coupling,
            v_slack: case.slack_voltage().to_complex(),
            v_center: DVector::from_element(pq.len(), Complex64::new(nu, 0.0)),
            nu,
        })
    }
}

fn max_modulus(v: &DVector<Complex64>) -> f64 {
    v.iter().map(|c| c.norm()).fold(0.0, f64::max)
}

/// `(alpha1, alpha2)` for the given inputs.
pub fn alpha_coefficients(inputs: &BasinInputs) -> Result<(f64, f64)> {
    if inputs.v_center.iter().any(|c| c.norm() == 0.0) {
        return Err(Error::InvalidArgument(
            "ball center has a zero entry".into(),
        ));
    }
    let z = &inputs.z_reduced;
    let alpha1 = max_modulus(&(z * inputs.s_pq.map(|s| s.conj())));
    let current = inputs.s_pq.zip_map(&inputs.v_center, |s, v| (s / v).conj())
        - &inputs.y_slack_coupling * inputs.v_slack;
    let alpha2 = max_modulus(&(&inputs.v_center - z * current));
    Ok((alpha1, alpha2))
}

/// Evaluate the basin cubic at `r`.
pub fn basin_cubic(nu: f64, alpha1: f64, alpha2: f64, r: f64) -> f64 {
    let b = -(2.0 * nu + alpha2);
    let c = nu * nu + 2.0 * alpha2 * nu - alpha1;
    let d = -alpha2 * nu * nu;
    ((r + b) * r + c) * r + d
}

/// Real roots of the monic cubic `r^3 + a r^2 + b r + c`, ascending and
/// repeated by multiplicity, by the trigonometric form of Cardano's method.
pub fn cubic_real_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let shift = a / 3.0;
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let half_q = q / 2.0;
    let third_p = p / 3.0;
    let disc = half_q * half_q + third_p * third_p * third_p;
    let scale = half_q * half_q + third_p.abs().powi(3);

    let mut roots: Vec<f64> = if scale == 0.0 {
        vec![-shift; 3]
    } else if disc > 1e-14 * scale {
        // one real root; pick the cube root that avoids cancellation
        let sq = disc.sqrt();
        let u = (-half_q - half_q.signum() * sq).cbrt();
        let t = if u == 0.0 { 0.0 } else { u - third_p / u };
        vec![t - shift]
    } else {
        let m = 2.0 * (-third_p).sqrt();
        let arg = (3.0 * q / (2.0 * p) * (-3.0 / p).sqrt()).clamp(-1.0, 1.0);
        let phi = arg.acos() / 3.0;
        (0..3)
            .map(|k| m * (phi - 2.0 * PI * k as f64 / 3.0).cos() - shift)
            .collect()
    };

    let f = |r: f64| ((r + a) * r + b) * r + c;
    let df = |r: f64| (3.0 * r + 2.0 * a) * r + b;
    for r in roots.iter_mut() {
        for _ in 0..3 {
            let d = df(*r);
            if d == 0.0 {
                break;
            }
            let next = *r - f(*r) / d;
            if next.is_finite() && f(next).abs() < f(*r).abs() {
                *r = next;
            } else {
                break;
            }
        }
    }
    roots.sort_by(f64::total_cmp);
    roots
}

pub fn basin_cubic_roots(nu: f64, alpha1: f64, alpha2: f64) -> BasinEstimate {
    let roots = cubic_real_roots(
        -(2.0 * nu + alpha2),
        nu * nu + 2.0 * alpha2 * nu - alpha1,
        -alpha2 * nu * nu,
    );
    let floor = 1e-12 * nu.max(1.0);
    let positive: Vec<f64> = roots.iter().copied().filter(|&r| r > floor).collect();
    BasinEstimate {
        nu,
        alpha1,
        alpha2,
        r_min: positive.first().copied().unwrap_or(f64::NAN),
        r_max: positive.last().copied().unwrap_or(f64::NAN),
        valid: positive.len() >= 2,
        roots,
    }
}

pub fn estimate_basin(case: &GridCase, center: &CenterChoice) -> Result<BasinEstimate> {
    let nu = match center {
        CenterChoice::Nominal => 1.0,
        CenterChoice::Slack => case.slack_voltage().magnitude,
        CenterChoice::PreviousSolution(x) => {
            if x.len() != case.n_pq() {
                return Err(Error::Dimension(format!(
                    "previous solution has {} buses, case has {} PQ buses",
                    x.len(),
                    case.n_pq()
                )));
            }
            x.v.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
        }
    };
    let inputs = BasinInputs::from_case(case, nu)?;
    let (a1, a2) = alpha_coefficients(&inputs)?;
    Ok(basin_cubic_roots(nu, a1, a2))
}

impl BasinEstimate {
    pub fn radius(&self, choice: RadiusChoice) -> f64 {
        match choice {
            RadiusChoice::Min => self.r_min,
            RadiusChoice::Max => self.r_max,
        }
    }

    pub fn report(&self) -> String {
        let roots: Vec<String> = self.roots.iter().map(|r| format!("{r:.12}")).collect();
        let mut out = String::new();
        let _ = writeln!(out, "nu       {:.12}", self.nu);
        let _ = writeln!(out, "alpha1   {:.12}", self.alpha1);
        let _ = writeln!(out, "alpha2   {:.12}", self.alpha2);
        let _ = writeln!(out, "roots    {}", roots.join(" "));
        let _ = writeln!(out, "r_min    {:.12}", self.r_min);
        let _ = writeln!(out, "r_max    {:.12}", self.r_max);
        let _ = writeln!(out, "valid    {}", self.valid);
        out
    }

    /// `bus,center,r_min_lo,r_min_hi,r_max_lo,r_max_hi` for every PQ bus
    /// (1-based bus numbers).
    pub fn bands_csv(&self, case: &GridCase) -> String {
        let mut out = String::from("bus,center,r_min_lo,r_min_hi,r_max_lo,r_max_hi\n");
        for bus in case.pq_buses() {
            let c = self.nu;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                bus + 1,
                c,
                c - self.r_min,
                c + self.r_min,
                c - self.r_max,
                c + self.r_max
            );
        }
        out
    }
}

/// Warm start with magnitudes drawn uniformly from `[nu - r, nu + r]`
/// (clipped to stay positive) and every angle at the slack angle.
pub fn sample_in_basin<R: Rng + ?Sized>(
    estimate: &BasinEstimate,
    case: &GridCase,
    rng: &mut R,
    radius: RadiusChoice,
) -> Result<StateVector> {
    if !estimate.valid {
        return Err(Error::InvalidEstimate);
    }
    let r = estimate.radius(radius);
    let m = case.n_pq();
    let v = (0..m)
        .map(|_| {
            let u: f64 = rng.random::<f64>() * 2.0 - 1.0;
            (estimate.nu + r * u).max(MIN_WARM_VOLTAGE)
        })
        .collect();
    Ok(StateVector::new(v, vec![case.slack_voltage().angle; m]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContractionReport {
    pub n_samples: usize,
    pub n_converged: usize,
    pub n_ill_conditioned: usize,
    /// `None` when there were no samples.
    pub converged_fraction: Option<f64>,
    pub ill_conditioned_fraction: Option<f64>,
    /// Mean over converged runs.
    pub mean_iterations: Option<f64>,
    /// Largest pairwise phasor distance between converged solutions.
    pub max_pairwise_distance: f64,
    pub unique_fixed_point: bool,
}

impl ContractionReport {
    pub fn report(&self) -> String {
        let fmt = |x: Option<f64>| x.map_or("undefined".to_string(), |v| format!("{v:.6}"));
        let mut out = String::new();
        let _ = writeln!(out, "samples                {}", self.n_samples);
        let _ = writeln!(
            out,
            "converged fraction     {}",
            fmt(self.converged_fraction)
        );
        let _ = writeln!(
            out,
            "ill-conditioned frac.  {}",
            fmt(self.ill_conditioned_fraction)
        );
        let _ = writeln!(out, "mean iterations        {}", fmt(self.mean_iterations));
        let _ = writeln!(
            out,
            "max pairwise distance  {:.3e}",
            self.max_pairwise_distance
        );
        let _ = writeln!(out, "unique fixed point     {}", self.unique_fixed_point);
        out
    }
}

/// Run Newton-Raphson from `n_samples` warm starts inside the `r_min` ball.
pub fn verify_contraction<R: Rng + ?Sized>(
    case: &GridCase,
    estimate: &BasinEstimate,
    n_samples: usize,
    config: &NrConfig,
    rng: &mut R,
) -> Result<ContractionReport> {
    verify_at_radius(case, estimate, estimate.r_min, n_samples, config, rng)
}

/// Like [`verify_contraction`] but at an arbitrary radius around `nu`.
pub fn verify_at_radius<R: Rng + ?Sized>(
    case: &GridCase,
    estimate: &BasinEstimate,
    radius: f64,
    n_samples: usize,
    config: &NrConfig,
    rng: &mut R,
) -> Result<ContractionReport> {
    if !estimate.valid {
        return Err(Error::InvalidEstimate);
    }
    let ball = BasinEstimate {
        r_min: radius,
        ..estimate.clone()
    };
    let starts = (0..n_samples)
        .map(|_| sample_in_basin(&ball, case, rng, RadiusChoice::Min))
        .collect::<Result<Vec<_>>>()?;
    let results: Vec<_> = starts
        .par_iter()
        .map(|x0| nr_solve(case, x0, config))
        .collect();

    let converged: Vec<&StateVector> = results
        .iter()
        .filter(|r| r.converged)
        .map(|r| &r.solution)
        .collect();
    let n_ill = results
        .iter()
        .filter(|r| StartClass::of(r, config) == StartClass::IllConditioned)
        .count();
    let mut max_dist: f64 = 0.0;
    for (i, a) in converged.iter().enumerate() {
        for b in &converged[i + 1..] {
            max_dist = max_dist.max(a.phasor_distance(b));
        }
    }
    let frac = |k: usize| (n_samples > 0).then(|| k as f64 / n_samples as f64);
    let mean_iterations = (!converged.is_empty()).then(|| {
        results
            .iter()
            .filter(|r| r.converged)
            .map(|r| r.iterations as f64)
            .sum::<f64>()
            / converged.len() as f64
    });
    Ok(ContractionReport {
        n_samples,
        n_converged: converged.len(),
        n_ill_conditioned: n_ill,
        converged_fraction: frac(converged.len()),
        ill_conditioned_fraction: frac(n_ill),
        mean_iterations,
        max_pairwise_distance: max_dist,
        unique_fixed_point: max_dist <= 1e-6,
    })
}

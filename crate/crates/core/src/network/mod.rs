//! Power network description and the power-flow mismatch function.
//!
//! Buses are indexed from 0 internally. Exactly one bus is the slack bus;
//! every other bus is a PQ bus whose voltage magnitude and angle are the
//! unknowns. Injections are net bus injections in per unit, so a load enters
//! with a negative sign.

mod case_file;
pub mod fixtures;

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub use case_file::{load_case, parse_case, save_case, write_case};

/// Voltage phasor in polar form. Angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Phasor {
    pub magnitude: f64,
    pub angle: f64,
}

impl Phasor {
    pub fn new(magnitude: f64, angle: f64) -> Self {
        Self { magnitude, angle }
    }

    pub fn to_complex(self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle)
    }

    pub fn from_complex(z: Complex64) -> Self {
        let (magnitude, angle) = z.to_polar();
        Self { magnitude, angle }
    }
}

/// A branch between two buses: series impedance `r + jx` and total shunt
/// susceptance, split evenly between both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub shunt: f64,
}

impl Line {
    pub fn new(from: usize, to: usize, r: f64, x: f64, shunt: f64) -> Self {
        Self {
            from,
            to,
            r,
            x,
            shunt,
        }
    }
}

/// Assemble the bus admittance matrix `Y = G + jB` from a line list.
///
/// Every bus must be reachable from bus 0 through the lines.
pub fn admittance_from_lines(
    n_buses: usize,
    lines: &[Line],
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if n_buses < 2 {
        return Err(Error::InvalidCase(format!(
            "network needs at least 2 buses, got {n_buses}"
        )));
    }
    let mut g = DMatrix::zeros(n_buses, n_buses);
    let mut b = DMatrix::zeros(n_buses, n_buses);
    let mut adjacency = vec![Vec::new(); n_buses];

    for (index, line) in lines.iter().enumerate() {
        if line.from >= n_buses || line.to >= n_buses {
            return Err(Error::InvalidCase(format!(
                "line {index} references bus outside 0..{n_buses}"
            )));
        }
        if line.from == line.to {
            return Err(Error::InvalidCase(format!(
                "line {index} connects bus {} to itself",
                line.from
            )));
        }
        let z = Complex64::new(line.r, line.x);
        if z.norm() == 0.0 || !z.is_finite() {
            return Err(Error::ZeroImpedance {
                index,
                from: line.from,
                to: line.to,
            });
        }
        let y = z.inv();
        let half_shunt = 0.5 * line.shunt;
        let (f, t) = (line.from, line.to);

        g[(f, f)] += y.re;
        g[(t, t)] += y.re;
        b[(f, f)] += y.im + half_shunt;
        b[(t, t)] += y.im + half_shunt;
        g[(f, t)] -= y.re;
        g[(t, f)] -= y.re;
        b[(f, t)] -= y.im;
        b[(t, f)] -= y.im;

        adjacency[f].push(t);
        adjacency[t].push(f);
    }

    let mut seen = vec![false; n_buses];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(bus) = queue.pop_front() {
        for &next in &adjacency[bus] {
            if !seen[next] {
                seen[next] = true;
                queue.push_back(next);
            }
        }
    }
    if let Some(bus) = seen.iter().position(|s| !s) {
        return Err(Error::Disconnected(bus));
    }

    Ok((g, b))
}

/// Network data for one power-flow problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCase {
    conductance: DMatrix<f64>,
    susceptance: DMatrix<f64>,
    p_injection: DVector<f64>,
    q_injection: DVector<f64>,
    slack_index: usize,
    slack_voltage: Phasor,
}

impl GridCase {
    /// Wrap admittance and injection data verbatim after dimension checks.
    pub fn build_direct(
        conductance: DMatrix<f64>,
        susceptance: DMatrix<f64>,
        p_injection: DVector<f64>,
        q_injection: DVector<f64>,
        slack_index: usize,
        slack_voltage: Phasor,
    ) -> Result<Self> {
        let n = conductance.nrows();
        if n < 2 {
            return Err(Error::InvalidCase(format!(
                "network needs at least 2 buses, got {n}"
            )));
        }
        if conductance.ncols() != n {
            return Err(Error::Dimension(format!(
                "G is {}x{}, expected square",
                n,
                conductance.ncols()
            )));
        }
        if susceptance.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "B is {:?}, G is {n}x{n}",
                susceptance.shape()
            )));
        }
        if p_injection.len() != n || q_injection.len() != n {
            return Err(Error::Dimension(format!(
                "injection vectors have lengths {} and {}, expected {n}",
                p_injection.len(),
                q_injection.len()
            )));
        }
        if slack_index >= n {
            return Err(Error::InvalidCase(format!(
                "slack bus {slack_index} outside 0..{n}"
            )));
        }
        Ok(Self {
            conductance,
            susceptance,
            p_injection,
            q_injection,
            slack_index,
            slack_voltage,
        })
    }

    /// Build from a line list. Injections are net (generation positive).
    pub fn from_lines(
        n_buses: usize,
        lines: &[Line],
        p_injection: DVector<f64>,
        q_injection: DVector<f64>,
        slack_index: usize,
        slack_voltage: Phasor,
    ) -> Result<Self> {
        let (g, b) = admittance_from_lines(n_buses, lines)?;
        Self::build_direct(g, b, p_injection, q_injection, slack_index, slack_voltage)
    }

    /// Two buses joined by one line: slack at bus 0 fixed at 1.0∠0, a load
    /// `p_load + j q_load` at bus 1.
    pub fn build_two_bus(r: f64, x: f64, p_load: f64, q_load: f64) -> Result<Self> {
        Self::from_lines(
            2,
            &[Line::new(0, 1, r, x, 0.0)],
            DVector::from_vec(vec![0.0, -p_load]),
            DVector::from_vec(vec![0.0, -q_load]),
            0,
            Phasor::new(1.0, 0.0),
        )
    }

    /// Two-bus case from a line admittance `g + jb` given directly, with
    /// `Y = [[y, -y], [-y, y]]`.
    pub fn two_bus_from_admittance(g: f64, b: f64, p_load: f64, q_load: f64) -> Result<Self> {
        Self::build_direct(
            DMatrix::from_row_slice(2, 2, &[g, -g, -g, g]),
            DMatrix::from_row_slice(2, 2, &[b, -b, -b, b]),
            DVector::from_vec(vec![0.0, -p_load]),
            DVector::from_vec(vec![0.0, -q_load]),
            0,
            Phasor::new(1.0, 0.0),
        )
    }

    /// The RL benchmark system: line admittance 100 + j10, load 0.9 + j0.6.
    pub fn rl_benchmark() -> Self {
        Self::two_bus_from_admittance(100.0, 10.0, 0.9, 0.6).expect("static case is valid")
    }

    pub fn n_buses(&self) -> usize {
        self.conductance.nrows()
    }

    pub fn n_pq(&self) -> usize {
        self.n_buses() - 1
    }

    pub fn conductance(&self) -> &DMatrix<f64> {
        &self.conductance
    }

    pub fn susceptance(&self) -> &DMatrix<f64> {
        &self.susceptance
    }

    pub fn p_injection(&self) -> &DVector<f64> {
        &self.p_injection
    }

    pub fn q_injection(&self) -> &DVector<f64> {
        &self.q_injection
    }

    pub fn slack_index(&self) -> usize {
        self.slack_index
    }

    pub fn slack_voltage(&self) -> Phasor {
        self.slack_voltage
    }

    /// Indices of the PQ buses in ascending order; this is the ordering of
    /// every state and mismatch vector.
    pub fn pq_buses(&self) -> Vec<usize> {
        (0..self.n_buses())
            .filter(|&i| i != self.slack_index)
            .collect()
    }

    pub fn admittance(&self) -> DMatrix<Complex64> {
        self.conductance
            .zip_map(&self.susceptance, Complex64::new)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let n = self.n_buses();
        (0..n).all(|i| {
            (0..i).all(|j| {
                (self.conductance[(i, j)] - self.conductance[(j, i)]).abs() <= tol
                    && (self.susceptance[(i, j)] - self.susceptance[(j, i)]).abs() <= tol
            })
        })
    }

    /// Same network with every injection multiplied by `s`.
    pub fn with_scaled_injections(&self, s: f64) -> Self {
        let mut scaled = self.clone();
        scaled.p_injection *= s;
        scaled.q_injection *= s;
        scaled
    }

    /// Same network with injections replaced.
    pub fn with_injections(&self, p: DVector<f64>, q: DVector<f64>) -> Result<Self> {
        Self::build_direct(
            self.conductance.clone(),
            self.susceptance.clone(),
            p,
            q,
            self.slack_index,
            self.slack_voltage,
        )
    }

    /// Full-length magnitude and angle vectors with the slack bus filled in.
    pub fn bus_voltages(&self, x: &StateVector) -> (Vec<f64>, Vec<f64>) {
        let n = self.n_buses();
        let mut vm = vec![0.0; n];
        let mut va = vec![0.0; n];
        vm[self.slack_index] = self.slack_voltage.magnitude;
        va[self.slack_index] = self.slack_voltage.angle;
        for (k, bus) in self.pq_buses().into_iter().enumerate() {
            vm[bus] = x.v[k];
            va[bus] = x.theta[k];
        }
        (vm, va)
    }

    fn check_state(&self, x: &StateVector) {
        assert_eq!(
            x.len(),
            self.n_pq(),
            "state length does not match PQ bus count"
        );
    }
}

/// Unknowns at the PQ buses, in the order of [`GridCase::pq_buses`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl StateVector {
    pub fn new(v: Vec<f64>, theta: Vec<f64>) -> Self {
        assert_eq!(v.len(), theta.len());
        Self { v, theta }
    }

    pub fn uniform(n: usize, v: f64, theta: f64) -> Self {
        Self {
            v: vec![v; n],
            theta: vec![theta; n],
        }
    }

    pub fn flat(n: usize) -> Self {
        Self::uniform(n, 1.0, 0.0)
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(&self.theta).all(|x| x.is_finite())
    }

    /// Stacked `[theta; v]`, the Newton unknown ordering.
    pub fn to_unknowns(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.v).copied().collect()
    }

    pub fn from_unknowns(x: &[f64]) -> Self {
        let m = x.len() / 2;
        Self {
            theta: x[..m].to_vec(),
            v: x[m..].to_vec(),
        }
    }

    /// Max-norm distance with angle differences wrapped to (-pi, pi].
    pub fn distance(&self, other: &StateVector) -> f64 {
        let dv = self.v.iter().zip(&other.v).map(|(a, b)| (a - b).abs());
        let dt = self
            .theta
            .iter()
            .zip(&other.theta)
            .map(|(a, b)| wrap_angle(a - b).abs());
        dv.chain(dt).fold(0.0, f64::max)
    }
}

impl StateVector {
    /// Max-norm distance between the complex bus voltages, so that
    /// `(-v, theta + pi)` and `(v, theta)` coincide.
    pub fn phasor_distance(&self, other: &StateVector) -> f64 {
        self.v
            .iter()
            .zip(&self.theta)
            .zip(other.v.iter().zip(&other.theta))
            .map(|((&va, &ta), (&vb, &tb))| {
                (Complex64::from_polar(va, ta) - Complex64::from_polar(vb, tb)).norm()
            })
            .fold(0.0, f64::max)
    }
}

pub(crate) fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w - 2.0 * PI
    } else {
        w
    }
}

/// Computed net active and reactive injections at every bus.
pub fn bus_powers(case: &GridCase, vm: &[f64], va: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = case.n_buses();
    let g = case.conductance();
    let b = case.susceptance();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for k in 0..n {
            let (s, c) = (va[i] - va[k]).sin_cos();
            let vv = vm[i] * vm[k];
            p[i] += vv * (g[(i, k)] * c + b[(i, k)] * s);
            q[i] += vv * (g[(i, k)] * s - b[(i, k)] * c);
        }
    }
    (p, q)
}

/// Power mismatch `[dP; dQ]` over the PQ buses: computed minus specified.
pub fn power_residual(case: &GridCase, x: &StateVector) -> Vec<f64> {
    case.check_state(x);
    let (vm, va) = case.bus_voltages(x);
    let (p, q) = bus_powers(case, &vm, &va);
    let pq = case.pq_buses();
    let mut out = Vec::with_capacity(2 * pq.len());
    out.extend(pq.iter().map(|&i| p[i] - case.p_injection()[i]));
    out.extend(pq.iter().map(|&i| q[i] - case.q_injection()[i]));
    out
}

pub fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| {
        if x.is_nan() || acc.is_nan() {
            f64::NAN
        } else {
            acc.max(x.abs())
        }
    })
}

pub fn norm_2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

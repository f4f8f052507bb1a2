//! Newton-Raphson power flow in polar coordinates.
//!
//! Unknowns are ordered `[theta; v]` over the PQ buses and mismatch rows are
//! ordered `[dP; dQ]`. Steps are full Newton steps with no damping or line
//! search. The iteration count is the number of updates performed, so a start
//! already within tolerance reports zero iterations.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{norm_inf, power_residual, GridCase, StateVector};

/// Condition numbers above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e14;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NrConfig {
    /// Bound on the max-norm of the mismatch.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Converged runs needing at least this many iterations are ill-conditioned.
    pub ill_conditioned_threshold: usize,
    /// A mismatch norm above this aborts the run.
    pub divergence_norm: f64,
}

impl Default for NrConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 50,
            ill_conditioned_threshold: 10,
            divergence_norm: 1e8,
        }
    }
}

impl NrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerance must be > 0".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if self.ill_conditioned_threshold > self.max_iterations {
            return Err(Error::InvalidArgument(
                "ill_conditioned_threshold must not exceed max_iterations".into(),
            ));
        }
        if !(self.divergence_norm > self.tolerance) {
            return Err(Error::InvalidArgument(
                "divergence_norm must exceed tolerance".into(),
            ));
        }
        Ok(())
    }

    /// Iteration count recorded for runs that did not converge.
    pub fn failure_sentinel(&self) -> usize {
        self.max_iterations + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FailureKind {
    MaxIterations,
    SingularJacobian,
    NumericBlowup,
}

impl std::fmt::Display for FailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FailureKind::MaxIterations => "max-iterations",
            FailureKind::SingularJacobian => "singular-jacobian",
            FailureKind::NumericBlowup => "numeric-blowup",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NrResult {
    pub converged: bool,
    pub iterations: usize,
    /// Last iterate (the solution when converged).
    pub solution: StateVector,
    /// Mismatch norm at every iterate, starting with the initial guess.
    pub residual_norms: Vec<f64>,
    pub failure: Option<FailureKind>,
}

impl NrResult {
    /// Iterations, or the config's sentinel when the run failed.
    pub fn iterations_or_sentinel(&self, config: &NrConfig) -> usize {
        if self.converged {
            self.iterations
        } else {
            config.failure_sentinel()
        }
    }
}

/// Analytic Jacobian of [`power_residual`] with respect to `[theta; v]`.
pub fn jacobian(case: &GridCase, x: &StateVector) -> DMatrix<f64> {
    let (vm, va) = case.bus_voltages(x);
    let g = case.conductance();
    let b = case.susceptance();
    let pq = case.pq_buses();
    let m = pq.len();
    let n = case.n_buses();
    let mut jac = DMatrix::zeros(2 * m, 2 * m);

    for (row, &i) in pq.iter().enumerate() {
        // sums over k != i of V_k (G cos + B sin) and V_k (G sin - B cos)
        let mut sum_cos = 0.0;
        let mut sum_sin = 0.0;
        for k in (0..n).filter(|&k| k != i) {
            let (s, c) = (va[i] - va[k]).sin_cos();
            sum_cos += vm[k] * (g[(i, k)] * c + b[(i, k)] * s);
            sum_sin += vm[k] * (g[(i, k)] * s - b[(i, k)] * c);
        }
        for (col, &j) in pq.iter().enumerate() {
            let (dp_dt, dp_dv, dq_dt, dq_dv) = if i == j {
                (
                    -vm[i] * sum_sin,
                    2.0 * vm[i] * g[(i, i)] + sum_cos,
                    vm[i] * sum_cos,
                    -2.0 * vm[i] * b[(i, i)] + sum_sin,
                )
            } else {
                let (s, c) = (va[i] - va[j]).sin_cos();
                let a = g[(i, j)] * c + b[(i, j)] * s;
                let d = g[(i, j)] * s - b[(i, j)] * c;
                (vm[i] * vm[j] * d, vm[i] * a, -vm[i] * vm[j] * a, vm[i] * d)
            };
            jac[(row, col)] = dp_dt;
            jac[(row, m + col)] = dp_dv;
            jac[(m + row, col)] = dq_dt;
            jac[(m + row, m + col)] = dq_dv;
        }
    }
    jac
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solve `J dx = -f` by LU with partial pivoting. `None` when the matrix is
/// singular or its condition number exceeds [`MAX_CONDITION`].
fn newton_step(jac: DMatrix<f64>, f: &[f64]) -> Option<DVector<f64>> {
    let norm = one_norm(&jac);
    let lu = jac.lu();
    let inv = lu.try_inverse()?;
    let cond = norm * one_norm(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return None;
    }
    let rhs = -DVector::from_column_slice(f);
    let dx = lu.solve(&rhs)?;
    dx.iter().all(|x| x.is_finite()).then_some(dx)
}

pub fn nr_solve(case: &GridCase, x0: &StateVector, config: &NrConfig) -> NrResult {
    assert_eq!(x0.len(), case.n_pq(), "initial state length mismatch");
    let mut x = x0.to_unknowns();
    let mut norms = Vec::new();
    let mut iterations = 0;

    let finish = |x: &[f64], norms: Vec<f64>, iterations, failure: Option<FailureKind>| NrResult {
        converged: failure.is_none(),
        iterations,
        solution: StateVector::from_unknowns(x),
        residual_norms: norms,
        failure,
    };

    loop {
        let state = StateVector::from_unknowns(&x);
        let f = power_residual(case, &state);
        let norm = norm_inf(&f);
        norms.push(norm);
        if !norm.is_finite() || !state.is_finite() || norm > config.divergence_norm {
            return finish(&x, norms, iterations, Some(FailureKind::NumericBlowup));
        }
        if norm <= config.tolerance {
            return finish(&x, norms, iterations, None);
        }
        if iterations >= config.max_iterations {
            return finish(&x, norms, iterations, Some(FailureKind::MaxIterations));
        }
        let Some(dx) = newton_step(jacobian(case, &state), &f) else {
            return finish(&x, norms, iterations, Some(FailureKind::SingularJacobian));
        };
        for (xi, d) in x.iter_mut().zip(dx.iter()) {
            *xi += d;
        }
        iterations += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StartClass {
    Fast,
    IllConditioned,
    Failed,
}

impl StartClass {
    pub fn of(result: &NrResult, config: &NrConfig) -> Self {
        if !result.converged {
            StartClass::Failed
        } else if result.iterations >= config.ill_conditioned_threshold {
            StartClass::IllConditioned
        } else {
            StartClass::Fast
        }
    }
}

pub fn classify_initial(case: &GridCase, x0: &StateVector, config: &NrConfig) -> StartClass {
    StartClass::of(&nr_solve(case, x0, config), config)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapCell {
    pub iterations: usize,
    pub converged: bool,
    pub matches_reference: bool,
}

/// NR iteration counts over a grid of uniform initial guesses: every PQ bus
/// starts at the same `(v, theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceMap {
    pub v_axis: Vec<f64>,
    /// Radians.
    pub theta_axis: Vec<f64>,
    /// Row-major: index `iv * theta_axis.len() + it`.
    pub cells: Vec<MapCell>,
    pub reference: Option<StateVector>,
}

impl ConvergenceMap {
    pub fn cell(&self, iv: usize, it: usize) -> &MapCell {
        &self.cells[iv * self.theta_axis.len() + it]
    }

    /// Grid cell closest to the reference solution's first PQ bus.
    pub fn reference_cell(&self) -> Option<(usize, usize)> {
        let r = self.reference.as_ref()?;
        let nearest = |axis: &[f64], x: f64| {
            axis.iter()
                .enumerate()
                .min_by(|a, b| (a.1 - x).abs().total_cmp(&(b.1 - x).abs()))
                .map(|(i, _)| i)
        };
        Some((
            nearest(&self.v_axis, r.v[0])?,
            nearest(&self.theta_axis, r.theta[0])?,
        ))
    }

    /// `v0,theta0_deg,iterations,converged,matches_reference`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("v0,theta0_deg,iterations,converged,matches_reference\n");
        for (iv, v) in self.v_axis.iter().enumerate() {
            for (it, t) in self.theta_axis.iter().enumerate() {
                let c = self.cell(iv, it);
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    v,
                    t.to_degrees(),
                    c.iterations,
                    c.converged,
                    c.matches_reference
                );
            }
        }
        out
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Sweep initial guesses. The reference solution defaults to the flat-start
/// solution; angles are in radians.
pub fn convergence_map(
    case: &GridCase,
    v_range: (f64, f64),
    theta_range: (f64, f64),
    resolution: (usize, usize),
    config: &NrConfig,
    reference: Option<StateVector>,
) -> Result<ConvergenceMap> {
    if resolution.0 < 2 || resolution.1 < 2 {
        return Err(Error::InvalidArgument(
            "map resolution must be at least 2 per axis".into(),
        ));
    }
    let m = case.n_pq();
    let reference = reference.or_else(|| {
        let r = nr_solve(case, &StateVector::flat(m), config);
        r.converged.then_some(r.solution)
    });
    let v_axis = linspace(v_range.0, v_range.1, resolution.0);
    let theta_axis = linspace(theta_range.0, theta_range.1, resolution.1);

    let cells = (0..v_axis.len() * theta_axis.len())
        .into_par_iter()
        .map(|idx| {
            let v = v_axis[idx / theta_axis.len()];
            let t = theta_axis[idx % theta_axis.len()];
            let r = nr_solve(case, &StateVector::uniform(m, v, t), config);
            let matches_reference = r.converged
                && reference
                    .as_ref()
                    .is_some_and(|s| r.solution.distance(s) <= 1e-6);
            MapCell {
                iterations: r.iterations_or_sentinel(config),
                converged: r.converged,
                matches_reference,
            }
        })
        .collect();

    Ok(ConvergenceMap {
        v_axis,
        theta_axis,
        cells,
        reference,
    })
}

/// Size of the 4-connected component of `cells(iv, it) <= max_iterations`
/// containing `start`; zero if `start` itself is outside the set.
pub fn fast_component_size(
    map: &ConvergenceMap,
    start: (usize, usize),
    max_iterations: usize,
) -> usize {
    let (nv, nt) = (map.v_axis.len(), map.theta_axis.len());
    let inside = |iv: usize, it: usize| map.cell(iv, it).iterations <= max_iterations;
    if !inside(start.0, start.1) {
        return 0;
    }
    let mut seen = vec![false; nv * nt];
    let mut stack = vec![start];
    seen[start.0 * nt + start.1] = true;
    let mut count = 0;
    while let Some((iv, it)) = stack.pop() {
        count += 1;
        let neighbours = [
            (iv.wrapping_sub(1), it),
            (iv + 1, it),
            (iv, it.wrapping_sub(1)),
            (iv, it + 1),
        ];
        for (a, b) in neighbours {
            if a < nv && b < nt && !seen[a * nt + b] && inside(a, b) {
                seen[a * nt + b] = true;
                stack.push((a, b));
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fd_jacobian(case: &GridCase, x: &StateVector, h: f64) -> DMatrix<f64> {
        let u = x.to_unknowns();
        let n = u.len();
        let mut jac = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[j] += h;
            dn[j] -= h;
            let fp = power_residual(case, &StateVector::from_unknowns(&up));
            let fm = power_residual(case, &StateVector::from_unknowns(&dn));
            for i in 0..n {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        jac
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases = [
            fixtures::two_bus(),
            fixtures::three_bus(),
            fixtures::seven_bus(),
        ];
        for trial in 0..50 {
            let case = &cases[trial % 3];
            let m = case.n_pq();
            let x = StateVector::new(
                (0..m).map(|_| rng.random_range(0.5..1.5)).collect(),
                (0..m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            );
            let a = jacobian(case, &x);
            let f = fd_jacobian(case, &x, 1e-6);
            let scale = a.amax().max(1.0);
            for (p, q) in a.iter().zip(f.iter()) {
                assert!((p - q).abs() <= 1e-5 * scale, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn no_load_two_bus_dq_dv() {
        let case = GridCase::build_two_bus(0.2, 0.5, 0.0, 0.0).unwrap();
        let jac = jacobian(&case, &StateVector::flat(1));
        let b = case.susceptance();
        assert!((jac[(1, 1)] - (-2.0 * b[(1, 1)] - b[(1, 0)])).abs() < 1e-12);
    }

    #[test]
    fn zero_voltage_zeroes_angle_derivative() {
        let case = fixtures::two_bus();
        let jac = jacobian(&case, &StateVector::uniform(1, 0.0, 0.3));
        assert_eq!(jac[(0, 0)], 0.0);
    }

    #[test]
    fn start_at_solution_takes_zero_iterations() {
        let case = fixtures::two_bus();
        let cfg = NrConfig::default();
        let sol = nr_solve(&case, &StateVector::flat(1), &cfg);
        assert!(sol.converged);
        let again = nr_solve(&case, &sol.solution, &cfg);
        assert!(again.converged);
        assert_eq!(again.iterations, 0);
        assert_eq!(again.residual_norms.len(), 1);
        assert_eq!(StartClass::of(&again, &cfg), StartClass::Fast);
    }

    #[test]
    fn light_load_flat_start() {
        let case = GridCase::build_two_bus(0.1, 0.1, 0.1, 0.05).unwrap();
        let r = nr_solve(&case, &StateVector::flat(1), &NrConfig::default());
        assert!(r.converged);
        assert!(r.iterations <= 4, "{}", r.iterations);
        assert!(*r.residual_norms.last().unwrap() <= 1e-8);
        assert_eq!(r.residual_norms.len(), r.iterations + 1);
        // last step contracts much faster than linearly
        let n = r.residual_norms.len();
        assert!(r.residual_norms[n - 1] < 0.5 * r.residual_norms[n - 2]);
        // grid cross-check: the solution is near the best grid point
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..=400 {
            let v = 0.8 + 0.3 * i as f64 / 400.0;
            for j in 0..=400 {
                let t = -0.1 + 0.1 * j as f64 / 400.0;
                let f = norm_inf(&power_residual(&case, &StateVector::uniform(1, v, t)));
                if f < best.0 {
                    best = (f, v, t);
                }
            }
        }
        assert!((best.1 - r.solution.v[0]).abs() < 2e-3);
        assert!((best.2 - r.solution.theta[0]).abs() < 2e-3);
    }

    #[test]
    fn zero_voltage_start_is_singular() {
        let r = nr_solve(
            &fixtures::two_bus(),
            &StateVector::uniform(1, 0.0, 0.0),
            &NrConfig::default(),
        );
        assert!(!r.converged);
        assert_eq!(r.failure, Some(FailureKind::SingularJacobian));
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn nan_start_blows_up() {
        let r = nr_solve(
            &fixtures::two_bus(),
            &StateVector::uniform(1, f64::NAN, 0.0),
            &NrConfig::default(),
        );
        assert_eq!(r.failure, Some(FailureKind::NumericBlowup));
        assert_eq!(
            classify_initial(
                &fixtures::two_bus(),
                &StateVector::uniform(1, f64::NAN, 0.0),
                &NrConfig::default()
            ),
            StartClass::Failed
        );
    }

    #[test]
    fn ill_conditioned_threshold() {
        let cfg = NrConfig::default();
        let result = NrResult {
            converged: true,
            iterations: 10,
            solution: StateVector::flat(1),
            residual_norms: vec![0.0; 11],
            failure: None,
        };
        assert_eq!(StartClass::of(&result, &cfg), StartClass::IllConditioned);
        let result = NrResult {
            iterations: 9,
            ..result
        };
        assert_eq!(StartClass::of(&result, &cfg), StartClass::Fast);
    }

    #[test]
    fn config_validation() {
        assert!(NrConfig::default().validate().is_ok());
        let bad = NrConfig {
            tolerance: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = NrConfig {
            ill_conditioned_threshold: 60,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn map_has_fast_connected_region_and_is_deterministic() {
        let case = fixtures::two_bus();
        let cfg = NrConfig::default();
        let range = (-90f64.to_radians(), 90f64.to_radians());
        let map = convergence_map(&case, (0.5, 2.0), range, (30, 30), &cfg, None).unwrap();
        assert_eq!(map.cells.len(), 900);
        let start = map.reference_cell().unwrap();
        let total = map.cells.iter().filter(|c| c.iterations <= 3).count();
        assert!(total > 0);
        assert_eq!(fast_component_size(&map, start, 3), total);
        let again = convergence_map(&case, (0.5, 2.0), range, (30, 30), &cfg, None).unwrap();
        assert_eq!(map.to_csv(), again.to_csv());
    }

    #[test]
    fn map_cell_on_reference_is_zero() {
        let case = fixtures::two_bus();
        let cfg = NrConfig::default();
        let sol = nr_solve(&case, &StateVector::flat(1), &cfg).solution;
        let map = convergence_map(
            &case,
            (sol.v[0], sol.v[0] + 0.5),
            (sol.theta[0], sol.theta[0] + 0.5),
            (3, 3),
            &cfg,
            None,
        )
        .unwrap();
        assert_eq!(map.cell(0, 0).iterations, 0);
        assert!(map.cell(0, 0).matches_reference);
        assert!(convergence_map(&case, (0.5, 1.0), (0.0, 1.0), (1, 5), &cfg, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn loosening_tolerance_never_adds_iterations(v in 0.6f64..1.6, t in -1.2f64..1.2, tight in 1e-12f64..1e-6, factor in 1.0f64..1e4) {
            let case = fixtures::two_bus();
            let x0 = StateVector::uniform(1, v, t);
            let strict = nr_solve(&case, &x0, &NrConfig { tolerance: tight, ..Default::default() });
            let loose = nr_solve(&case, &x0, &NrConfig { tolerance: tight * factor, ..Default::default() });
            if strict.converged {
                prop_assert!(loose.converged);
                prop_assert!(loose.iterations <= strict.iterations);
            }
        }

        #[test]
        fn converged_solution_reconverges_immediately(v in 0.7f64..1.4, t in -0.6f64..0.6) {
            let case = fixtures::three_bus();
            let cfg = NrConfig::default();
            let r = nr_solve(&case, &StateVector::uniform(2, v, t), &cfg);
            if r.converged {
                prop_assert_eq!(nr_solve(&case, &r.solution, &cfg).iterations, 0);
                prop_assert!(*r.residual_norms.last().unwrap() <= cfg.tolerance);
            }
            prop_assert_eq!(r.residual_norms.len(), r.iterations + 1);
        }
    }
}

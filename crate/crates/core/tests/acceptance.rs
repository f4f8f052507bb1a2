//! Acceptance suite. Each test prints one `PASS`/`FAIL` line, written
//! straight to stdout so it shows up without `--nocapture`.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::Matrix3;
use pflab::basin::{basin_cubic_roots, estimate_basin, verify_contraction, CenterChoice};
use pflab::network::{fixtures, power_residual, GridCase, StateVector};
use pflab::neural::{
    evaluate, evaluate_zero, generate_dataset, train, Dataset, DatasetConfig, ParamRanges, Scheme,
    Split, TrainConfig,
};
use pflab::nr::{convergence_map, fast_component_size, jacobian, nr_solve, NrConfig};
use pflab::rl::eval::default_axes;
use pflab::rl::{eval_policy, train_ppo, EnvConfig, PpoConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn verdict(n: usize, name: &str, ok: bool, detail: &str) {
    let line = format!(
        "criterion {n} [{name}]: {} ({detail})\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stdout().write_all(line.as_bytes());
    assert!(ok, "criterion {n} failed: {detail}");
}

fn within(elapsed: Duration, secs: u64) -> bool {
    elapsed < Duration::from_secs(secs)
}

fn dataset() -> &'static Dataset {
    static DATA: OnceLock<Dataset> = OnceLock::new();
    DATA.get_or_init(|| {
        generate_dataset(
            &DatasetConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
            &NrConfig::default(),
        )
        .expect("dataset generation")
    })
}

#[test]
fn c1_jacobian_matches_central_differences() {
    let start = Instant::now();
    let cases = [
        fixtures::two_bus(),
        fixtures::three_bus(),
        fixtures::seven_bus(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let case = &cases[i % cases.len()];
        let m = case.n_pq();
        let x = StateVector::new(
            (0..m).map(|_| rng.random_range(0.7..1.3)).collect(),
            (0..m).map(|_| rng.random_range(-0.6..0.6)).collect(),
        );
        let j = jacobian(case, &x);
        let flat: Vec<f64> = x.theta.iter().chain(&x.v).copied().collect();
        let unflat = |z: &[f64]| StateVector::new(z[m..].to_vec(), z[..m].to_vec());
        let mut err: f64 = 0.0;
        for col in 0..2 * m {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[col] += h;
            minus[col] -= h;
            let fp = power_residual(case, &unflat(&plus));
            let fm = power_residual(case, &unflat(&minus));
            for row in 0..2 * m {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                err = err.max((j[(row, col)] - fd).abs());
            }
        }
        worst = worst.max(err / j.amax().max(1.0));
    }
    let t = start.elapsed();
    verdict(
        1,
        "jacobian",
        worst <= 1e-5 && within(t, 10),
        &format!("worst relative error {worst:.2e}, {t:.2?}"),
    );
}

/// Least-squares slope of `log r[k+1]` against `log r[k]`.
fn loglog_slope(pairs: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = pairs.iter().map(|&(a, b)| (a.ln(), b.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

#[test]
fn c2_newton_tail_is_quadratic() {
    let start = Instant::now();
    let cfg = NrConfig::default();
    let ranges = ParamRanges::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
    let mut runs = 0;
    let mut last_ratio_ok = true;
    let mut pairs = Vec::new();
    let mut attempts = 0;
    while runs < 20 && attempts < 10_000 {
        attempts += 1;
        let case = GridCase::build_two_bus(
            draw(&mut rng, ranges.r),
            draw(&mut rng, ranges.x),
            draw(&mut rng, ranges.p_load),
            draw(&mut rng, ranges.q_load),
        )
        .expect("valid two-bus case");
        let x0 = StateVector::new(
            vec![rng.random_range(0.8..1.2)],
            vec![rng.random_range(-0.3..0.3)],
        );
        let res = nr_solve(&case, &x0, &cfg);
        if !res.converged || res.iterations < 3 {
            continue;
        }
        runs += 1;
        let r = &res.residual_norms;
        let n = r.len();
        last_ratio_ok &= r[n - 1] / r[n - 2] < 0.5;
        // tail pairs above the rounding floor
        for k in n.saturating_sub(3)..n - 1 {
            if r[k + 1] > 1e-13 && r[k] < 1.0 {
                pairs.push((r[k], r[k + 1]));
            }
        }
    }
    let slope = loglog_slope(&pairs);
    let t = start.elapsed();
    verdict(
        2,
        "quadratic tail",
        runs == 20 && last_ratio_ok && (1.5..=2.5).contains(&slope) && within(t, 5),
        &format!("{runs} runs, last-step ratio < 0.5: {last_ratio_ok}, slope {slope:.3} over {} pairs, {t:.2?}", pairs.len()),
    );
}

#[test]
fn c3_convergence_map_has_connected_fast_region() {
    let start = Instant::now();
    let case = fixtures::two_bus();
    let map = convergence_map(
        &case,
        (0.5, 2.0),
        ((-90f64).to_radians(), 90f64.to_radians()),
        (100, 100),
        &NrConfig::default(),
        None,
    )
    .expect("map");
    let fast = map.cells.iter().filter(|c| c.iterations <= 3).count();
    let (ok, detail) = match map.reference_cell() {
        Some(rc) => {
            let comp = fast_component_size(&map, rc, 3);
            (
                fast > 0 && comp == fast,
                format!("{fast} fast cells, component through reference cell {rc:?} has {comp}"),
            )
        }
        None => (false, "no reference solution".to_string()),
    };
    let t = start.elapsed();
    verdict(
        3,
        "convergence map",
        ok && within(t, 60),
        &format!("{detail}, {t:.2?}"),
    );
}

#[test]
fn c4_zero_start_never_converges() {
    let test = dataset().split(Split::Test);
    let m = evaluate_zero(&test, &NrConfig::default()).expect("evaluate");
    verdict(
        4,
        "zero initialization",
        m.n_samples == 100 && m.n_converged == 0,
        &format!("{}/{} converged", m.n_converged, m.n_samples),
    );
}

/// Real eigenvalues of the companion matrix of `r^3 + a r^2 + b r + c`.
fn companion_real_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let m = Matrix3::new(0.0, 0.0, -c, 1.0, 0.0, -b, 0.0, 1.0, -a);
    let mut roots: Vec<f64> = m
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-9 * (1.0 + z.re.abs()))
        .map(|z| z.re)
        .collect();
    roots.sort_by(f64::total_cmp);
    roots
}

#[test]
fn c5_cardano_matches_companion_matrix() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    let mut count_mismatch = 0;
    for _ in 0..1000 {
        let nu = rng.random_range(0.3..2.0);
        let a1 = rng.random_range(0.0..1.5);
        let a2 = rng.random_range(0.0..1.0);
        let est = basin_cubic_roots(nu, a1, a2);
        let oracle = companion_real_roots(
            -(2.0 * nu + a2),
            nu * nu + 2.0 * a2 * nu - a1,
            -a2 * nu * nu,
        );
        if oracle.len() != est.roots.len() {
            count_mismatch += 1;
            continue;
        }
        for (x, y) in est.roots.iter().zip(&oracle) {
            worst = worst.max((x - y).abs());
        }
    }
    let trivial = basin_cubic_roots(1.3, 0.0, 0.0).roots;
    let expected = [0.0, 1.3, 1.3];
    let trivial_ok = trivial.len() == 3
        && trivial
            .iter()
            .zip(expected)
            .all(|(r, e)| (r - e).abs() <= 1e-12);
    let t = start.elapsed();
    verdict(
        5,
        "cubic roots",
        count_mismatch == 0 && worst <= 1e-8 && trivial_ok && within(t, 5),
        &format!("max deviation {worst:.2e}, root-count mismatches {count_mismatch}, trivial roots {trivial:?}, {t:.2?}"),
    );
}

#[test]
fn c6_warm_starts_inside_min_radius_converge() {
    let cfg = NrConfig::default();
    let mut details = Vec::new();
    let mut ok = true;
    for (name, case) in [
        ("2-bus", fixtures::two_bus()),
        ("7-bus", fixtures::seven_bus()),
    ] {
        let sol = nr_solve(&case, &StateVector::flat(case.n_pq()), &cfg);
        assert!(sol.converged, "{name} flat start");
        let est =
            estimate_basin(&case, &CenterChoice::PreviousSolution(sol.solution)).expect("estimate");
        if !est.valid {
            ok = false;
            details.push(format!("{name}: invalid estimate"));
            continue;
        }
        let rep = verify_contraction(&case, &est, 500, &cfg, &mut ChaCha8Rng::seed_from_u64(6))
            .expect("verify");
        let frac = rep.converged_fraction.unwrap_or(0.0);
        ok &= frac == 1.0 && rep.max_pairwise_distance <= 1e-6;
        details.push(format!(
            "{name}: r_min {:.4}, converged {frac}, max distance {:.1e}",
            est.r_min, rep.max_pairwise_distance
        ));
    }
    verdict(6, "basin warm starts", ok, &details.join("; "));
}

#[test]
fn c7_learned_initializers_meet_bands() {
    let start = Instant::now();
    let data = dataset();
    let nr = NrConfig::default();
    let test = data.split(Split::Test);
    let run = |scheme| {
        let (model, _) = train(
            data,
            &TrainConfig {
                scheme,
                ..TrainConfig::default()
            },
        )
        .expect("train");
        evaluate(&model, &test, &nr).expect("evaluate")
    };
    let sup = run(Scheme::Supervised);
    let uns = run(Scheme::Unsupervised);
    let sup_ok = sup.mean_iterations <= 4.0 && sup.mae_v <= 0.15;
    let uns_ok =
        uns.n_samples == 100 && uns.converged_within(20) == 100 && uns.mean_iterations <= 10.0;
    let t = start.elapsed();
    verdict(
        7,
        "learned initialization",
        sup_ok && uns_ok && within(t, 15 * 60),
        &format!(
            "supervised: mean iterations {:.2}, MAE_V {:.4}; unsupervised: {}/{} within 20, mean iterations {:.2}; {t:.2?}",
            sup.mean_iterations,
            sup.mae_v,
            uns.converged_within(20),
            uns.n_samples,
            uns.mean_iterations
        ),
    );
}

#[test]
fn c8_agent_reaches_fast_region() {
    let start = Instant::now();
    let env = EnvConfig::default();
    let (policy, _) = train_ppo(&env, &PpoConfig::default()).expect("train");
    let (va, ta) = default_axes(20);
    let res = eval_policy(&policy, &env, &va, &ta, &[]);
    let map = &res.map;
    let hard: Vec<usize> = (0..map.steps.len())
        .filter(|&i| map.start_k[i] >= 10)
        .collect();
    let hard_reached = hard
        .iter()
        .filter(|&&i| map.steps[i] <= env.horizon)
        .count();
    let frac = map.reached_fraction();
    let t = start.elapsed();
    verdict(
        8,
        "reinforcement learning",
        frac >= 0.7 && hard_reached >= 1 && within(t, 30 * 60),
        &format!(
            "reached {:.1}% of starts, {hard_reached}/{} starts with k0 >= 10 reached, {t:.2?}",
            100.0 * frac,
            hard.len()
        ),
    );
}

fn pflab(dir: &Path, args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_pflab"))
        .current_dir(dir)
        .args(["--seed", "11", "--out-dir", "out"])
        .args(args)
        .output()
        .expect("spawn pflab");
    out.status.code().unwrap_or(-1)
}

fn hash_outputs(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir.join("out")).expect("out dir") {
        let p = entry.expect("entry").path();
        let digest = Sha256::digest(std::fs::read(&p).expect("read output"));
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        out.insert(p.file_name().unwrap().to_string_lossy().into_owned(), hex);
    }
    out
}

fn run_pipeline(dir: &Path) -> Vec<(String, i32)> {
    let fx = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures");
    let three = format!("{fx}/three_bus.case");
    let two = format!("{fx}/two_bus.case");
    let steps: Vec<Vec<&str>> = vec![
        vec![
            "solve", "--case", &three, "--init", "basin", "--radius", "max",
        ],
        vec!["map", "--case", &two, "--resolution", "30"],
        vec!["basin", "--case", &three, "--samples", "100"],
        vec![
            "gen-data",
            "--systems",
            "12",
            "--states",
            "4",
            "--test-systems",
            "3",
        ],
        vec![
            "train",
            "--data",
            "out/dataset.csv",
            "--scheme",
            "semisupervised",
            "--epochs",
            "15",
            "--hidden",
            "16,16",
        ],
        vec![
            "eval",
            "--data",
            "out/dataset.csv",
            "--models",
            "out/model_semisupervised.txt",
        ],
        vec![
            "rl-train",
            "--timesteps",
            "1024",
            "--rollout-steps",
            "256",
            "--hidden",
            "16,16",
        ],
        vec!["rl-eval", "--policy", "out/policy.txt", "--grid", "6"],
    ];
    steps
        .iter()
        .map(|args| (args[0].to_string(), pflab(dir, args)))
        .collect()
}

#[test]
fn c9_cli_reruns_are_bit_identical() {
    let a = tempfile::tempdir().expect("tempdir");
    let b = tempfile::tempdir().expect("tempdir");
    let codes_a = run_pipeline(a.path());
    let codes_b = run_pipeline(b.path());
    let ha = hash_outputs(a.path());
    let hb = hash_outputs(b.path());
    let all_zero = codes_a.iter().chain(&codes_b).all(|(_, c)| *c == 0);
    let differing: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
    let manifests = ha.keys().filter(|k| k.starts_with("manifest_")).count();
    verdict(
        9,
        "determinism",
        all_zero && ha.len() == hb.len() && differing.is_empty() && manifests == 8,
        &format!(
            "exit codes {codes_a:?}, {} files hashed, {manifests} manifests, differing {differing:?}",
            ha.len()
        ),
    );
}

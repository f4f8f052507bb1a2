//! Feature layout shared by the dataset, the model and the losses.
//!
//! For an `n`-bus case with the slack at bus 1 (index 0) and PQ buses
//! `2..=n`, the feature vector is
//!
//! ```text
//! [P_2..P_n, Q_2..Q_n, G_11, G_12, .., G_1n, G_22, .., G_nn, B_11, .., B_nn]
//! ```
//!
//! with each matrix flattened as its upper triangle, row by row. For two
//! buses this is `[P2, Q2, G11, G12, G22, B11, B12, B22]`. The slack voltage
//! is fixed at 1.0∠0 and is not part of the features.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::network::{GridCase, Phasor};

pub fn n_features(n_buses: usize) -> usize {
    2 * (n_buses - 1) + n_buses * (n_buses + 1)
}

pub fn n_outputs(n_buses: usize) -> usize {
    2 * (n_buses - 1)
}

/// Column names in feature order, with 1-based bus numbers.
pub fn feature_names(n_buses: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(n_features(n_buses));
    names.extend((2..=n_buses).map(|i| format!("p_{i}")));
    names.extend((2..=n_buses).map(|i| format!("q_{i}")));
    for m in ["g", "b"] {
        for i in 1..=n_buses {
            for j in i..=n_buses {
                names.push(format!("{m}_{i}_{j}"));
            }
        }
    }
    names
}

/// Flatten a case. Requires the slack at index 0 held at 1.0∠0 and a
/// symmetric admittance matrix, since the layout cannot represent others.
pub fn case_features(case: &GridCase) -> Result<Vec<f64>> {
    let n = case.n_buses();
    let slack = case.slack_voltage();
    if case.slack_index() != 0 || slack.magnitude != 1.0 || slack.angle != 0.0 {
        return Err(Error::InvalidCase(
            "feature layout needs the slack at bus 1 held at 1.0∠0".into(),
        ));
    }
    if !case.is_symmetric(1e-12) {
        return Err(Error::InvalidCase(
            "feature layout needs a symmetric admittance matrix".into(),
        ));
    }
    let mut f = Vec::with_capacity(n_features(n));
    f.extend(case.p_injection().iter().skip(1));
    f.extend(case.q_injection().iter().skip(1));
    for m in [case.conductance(), case.susceptance()] {
        for i in 0..n {
            for j in i..n {
                f.push(m[(i, j)]);
            }
        }
    }
    Ok(f)
}

pub fn case_from_features(features: &[f64], n_buses: usize) -> Result<GridCase> {
    if n_buses < 2 || features.len() != n_features(n_buses) {
        return Err(Error::Dimension(format!(
            "{} features do not describe a {n_buses}-bus case",
            features.len()
        )));
    }
    let m = n_buses - 1;
    let mut p = vec![0.0; n_buses];
    let mut q = vec![0.0; n_buses];
    p[1..].copy_from_slice(&features[..m]);
    q[1..].copy_from_slice(&features[m..2 * m]);
    let mut mats = [
        DMatrix::zeros(n_buses, n_buses),
        DMatrix::zeros(n_buses, n_buses),
    ];
    let mut k = 2 * m;
    for mat in &mut mats {
        for i in 0..n_buses {
            for j in i..n_buses {
                mat[(i, j)] = features[k];
                mat[(j, i)] = features[k];
                k += 1;
            }
        }
    }
    let [g, b] = mats;
    GridCase::build_direct(
        g,
        b,
        DVector::from_vec(p),
        DVector::from_vec(q),
        0,
        Phasor::new(1.0, 0.0),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fixtures;

    #[test]
    fn two_bus_layout() {
        let case = GridCase::two_bus_from_admittance(4.0, -8.0, 0.5, 0.2).unwrap();
        assert_eq!(
            case_features(&case).unwrap(),
            vec![-0.5, -0.2, 4.0, -4.0, 4.0, -8.0, 8.0, -8.0]
        );
        assert_eq!(
            feature_names(2),
            ["p_2", "q_2", "g_1_1", "g_1_2", "g_2_2", "b_1_1", "b_1_2", "b_2_2"]
        );
    }

    #[test]
    fn round_trip_on_fixtures() {
        for case in [
            fixtures::two_bus(),
            fixtures::three_bus(),
            fixtures::seven_bus(),
        ] {
            let f = case_features(&case).unwrap();
            assert_eq!(f.len(), n_features(case.n_buses()));
            assert_eq!(feature_names(case.n_buses()).len(), f.len());
            assert_eq!(case_from_features(&f, case.n_buses()).unwrap(), case);
        }
    }

    #[test]
    fn non_reference_slack_is_rejected() {
        let case = GridCase::rl_benchmark();
        let moved = GridCase::build_direct(
            case.conductance().clone(),
            case.susceptance().clone(),
            case.p_injection().clone(),
            case.q_injection().clone(),
            1,
            Phasor::new(1.0, 0.0),
        )
        .unwrap();
        assert!(case_features(&moved).is_err());
        assert!(case_from_features(&[0.0; 7], 2).is_err());
    }
}

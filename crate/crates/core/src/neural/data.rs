//! Two-bus training records labeled by Newton-Raphson.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;

use super::features::{case_features, case_from_features, feature_names, n_features};
use crate::basin::{estimate_basin, sample_in_basin, CenterChoice, RadiusChoice};
use crate::error::{Error, Result};
use crate::network::{GridCase, StateVector};
use crate::nr::{nr_solve, NrConfig};

/// Warm starts tried per radius when the flat start fails to converge.
pub const LABEL_RETRIES: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamRanges {
    pub r: (f64, f64),
    pub x: (f64, f64),
    pub p_load: (f64, f64),
    pub q_load: (f64, f64),
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            r: (0.01, 0.1),
            x: (0.05, 0.2),
            p_load: (0.1, 0.6),
            q_load: (0.0, 0.3),
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("r", self.r),
            ("x", self.x),
            ("p_load", self.p_load),
            ("q_load", self.q_load),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!(
                    "range {name} = [{lo}, {hi}] is empty or not finite"
                )));
            }
        }
        if self.r.0 < 0.0 || self.x.0 < 0.0 || self.r.0 + self.x.0 <= 0.0 {
            return Err(Error::InvalidArgument(
                "line impedance ranges must be nonnegative and exclude r = x = 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub system: usize,
    pub split: Split,
    pub features: Vec<f64>,
    /// Newton-Raphson solution, absent when labeling failed.
    pub labels: Option<StateVector>,
    /// Set when every labeling attempt failed.
    pub flagged: bool,
    pub case: GridCase,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_buses: usize,
    pub records: Vec<Record>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetConfig {
    pub n_systems: usize,
    pub n_states: usize,
    /// The last `test_systems` systems form the test split.
    pub test_systems: usize,
    pub ranges: ParamRanges,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_systems: 100,
            n_states: 10,
            test_systems: 10,
            ranges: ParamRanges::default(),
        }
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Solve a case from the flat start, falling back to warm starts drawn from
/// the nominal-center basin estimate.
pub fn label_case<R: Rng + ?Sized>(
    case: &GridCase,
    rng: &mut R,
    config: &NrConfig,
) -> Option<StateVector> {
    let flat = nr_solve(case, &StateVector::flat(case.n_pq()), config);
    if flat.converged {
        return Some(flat.solution);
    }
    let estimate = estimate_basin(case, &CenterChoice::Nominal).ok()?;
    for radius in [RadiusChoice::Min, RadiusChoice::Max] {
        for _ in 0..LABEL_RETRIES {
            let start = sample_in_basin(&estimate, case, rng, radius).ok()?;
            let run = nr_solve(case, &start, config);
            if run.converged {
                return Some(run.solution);
            }
        }
    }
    None
}

pub fn generate_dataset<R: Rng + ?Sized>(
    config: &DatasetConfig,
    rng: &mut R,
    nr: &NrConfig,
) -> Result<Dataset> {
    config.ranges.validate()?;
    nr.validate()?;
    if config.n_systems == 0 || config.n_states == 0 {
        return Err(Error::InvalidArgument(
            "dataset needs at least one system and one state".into(),
        ));
    }
    if config.test_systems > config.n_systems {
        return Err(Error::InvalidArgument(format!(
            "test_systems ({}) exceeds n_systems ({})",
            config.test_systems, config.n_systems
        )));
    }
    let ranges = &config.ranges;
    let first_test = config.n_systems - config.test_systems;
    let mut records = Vec::with_capacity(config.n_systems * config.n_states);
    for system in 0..config.n_systems {
        let r = draw(rng, ranges.r);
        let x = draw(rng, ranges.x);
        let split = if system >= first_test {
            Split::Test
        } else {
            Split::Train
        };
        for _ in 0..config.n_states {
            let p = draw(rng, ranges.p_load);
            let q = draw(rng, ranges.q_load);
            let case = GridCase::build_two_bus(r, x, p, q)?;
            let labels = label_case(&case, rng, nr);
            records.push(Record {
                system,
                split,
                features: case_features(&case)?,
                flagged: labels.is_none(),
                labels,
                case,
            });
        }
    }
    Ok(Dataset {
        n_buses: 2,
        records,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn n_flagged(&self) -> usize {
        self.records.iter().filter(|r| r.flagged).count()
    }

    /// Per-feature mean and population standard deviation.
    pub fn feature_stats(records: &[&Record]) -> (Vec<f64>, Vec<f64>) {
        let nf = records.first().map_or(0, |r| r.features.len());
        let n = records.len().max(1) as f64;
        let mut mean = vec![0.0; nf];
        for r in records {
            for (m, x) in mean.iter_mut().zip(&r.features) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; nf];
        for r in records {
            for ((v, x), m) in var.iter_mut().zip(&r.features).zip(&mean) {
                *v += (x - m) * (x - m) / n;
            }
        }
        (mean, var.into_iter().map(f64::sqrt).collect())
    }

    pub fn header(n_buses: usize) -> String {
        let mut cols = vec!["system".to_string(), "split".into(), "flagged".into()];
        cols.extend(feature_names(n_buses));
        cols.extend((2..=n_buses).map(|i| format!("v_{i}")));
        cols.extend((2..=n_buses).map(|i| format!("theta_{i}_deg")));
        cols.join(",")
    }

    /// CSV with angles in degrees; label columns are empty for unlabeled rows.
    pub fn to_csv(&self) -> String {
        let m = self.n_buses - 1;
        let mut s = Self::header(self.n_buses);
        s.push('\n');
        for r in &self.records {
            let _ = write!(
                s,
                "{},{},{}",
                r.system,
                r.split.as_str(),
                u8::from(r.flagged)
            );
            for f in &r.features {
                let _ = write!(s, ",{f}");
            }
            match &r.labels {
                Some(x) => {
                    for v in &x.v {
                        let _ = write!(s, ",{v}");
                    }
                    for t in &x.theta {
                        let _ = write!(s, ",{}", t.to_degrees());
                    }
                }
                None => s.push_str(&",".repeat(2 * m)),
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let err = |line: usize, field: &str, message: String| Error::Parse {
            path: source.to_string(),
            line,
            field: field.to_string(),
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let (_, header) = lines
            .next()
            .ok_or_else(|| err(1, "header", "empty file".into()))?;
        let n_p = header.split(',').filter(|c| c.starts_with("p_")).count();
        let n_buses = n_p + 1;
        if n_p == 0 || header != Self::header(n_buses) {
            return Err(err(1, "header", format!("unrecognized header '{header}'")));
        }
        let names = Self::header(n_buses);
        let names: Vec<&str> = names.split(',').collect();
        let nf = n_features(n_buses);
        let m = n_buses - 1;
        let mut records = Vec::new();
        for (n, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != names.len() {
                return Err(err(
                    n,
                    "row",
                    format!("{} cells, expected {}", cells.len(), names.len()),
                ));
            }
            let num = |k: usize| -> Result<f64> {
                cells[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| err(n, names[k], format!("'{}': {e}", cells[k])))
            };
            let system = cells[0]
                .trim()
                .parse::<usize>()
                .map_err(|e| err(n, "system", format!("'{}': {e}", cells[0])))?;
            let split = match cells[1].trim() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => {
                    return Err(err(
                        n,
                        "split",
                        format!("expected train or test, got '{other}'"),
                    ))
                }
            };
            let flagged = match cells[2].trim() {
                "0" => false,
                "1" => true,
                other => return Err(err(n, "flagged", format!("expected 0 or 1, got '{other}'"))),
            };
            let features = (3..3 + nf).map(num).collect::<Result<Vec<_>>>()?;
            let label_cells = &cells[3 + nf..];
            let labels = if label_cells.iter().all(|c| c.trim().is_empty()) {
                None
            } else {
                let vals = (3 + nf..3 + nf + 2 * m)
                    .map(num)
                    .collect::<Result<Vec<_>>>()?;
                Some(StateVector::new(
                    vals[..m].to_vec(),
                    vals[m..].iter().map(|d| d.to_radians()).collect(),
                ))
            };
            let case = case_from_features(&features, n_buses)
                .map_err(|e| err(n, "features", e.to_string()))?;
            records.push(Record {
                system,
                split,
                features,
                labels,
                flagged,
                case,
            });
        }
        Ok(Self { n_buses, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_text(path)?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{norm_inf, power_residual};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> Dataset {
        let cfg = DatasetConfig {
            n_systems: 6,
            n_states: 5,
            test_systems: 2,
            ranges: ParamRanges::default(),
        };
        generate_dataset(
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(seed),
            &NrConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn counts_and_splits() {
        let d = small(1);
        assert_eq!(d.records.len(), 30);
        assert_eq!(d.split(Split::Test).len(), 10);
        assert!(d.split(Split::Test).iter().all(|r| r.system >= 4));
    }

    #[test]
    fn labels_satisfy_power_flow() {
        let nr = NrConfig::default();
        let d = small(2);
        for r in &d.records {
            let x = r.labels.as_ref().expect("default ranges are solvable");
            assert!(norm_inf(&power_residual(&r.case, x)) <= nr.tolerance);
        }
    }

    #[test]
    fn zero_width_ranges_repeat_one_record() {
        let cfg = DatasetConfig {
            n_systems: 3,
            n_states: 4,
            test_systems: 0,
            ranges: ParamRanges {
                r: (0.05, 0.05),
                x: (0.1, 0.1),
                p_load: (0.3, 0.3),
                q_load: (0.1, 0.1),
            },
        };
        let d = generate_dataset(
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            &NrConfig::default(),
        )
        .unwrap();
        let first = &d.records[0];
        assert!(d
            .records
            .iter()
            .all(|r| r.features == first.features && r.labels == first.labels));
    }

    #[test]
    fn unsolvable_load_is_kept_and_flagged() {
        let cfg = DatasetConfig {
            n_systems: 1,
            n_states: 2,
            test_systems: 0,
            ranges: ParamRanges {
                r: (0.1, 0.1),
                x: (0.3, 0.3),
                p_load: (5.0, 5.0),
                q_load: (2.0, 2.0),
            },
        };
        let d = generate_dataset(
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            &NrConfig::default(),
        )
        .unwrap();
        assert_eq!(d.records.len(), 2);
        assert_eq!(d.n_flagged(), 2);
        assert!(d.records.iter().all(|r| r.labels.is_none()));
    }

    #[test]
    fn csv_round_trip() {
        let mut d = small(3);
        d.records[1].labels = None;
        d.records[1].flagged = true;
        let back = Dataset::from_csv(&d.to_csv(), "mem").unwrap();
        assert_eq!(back.records.len(), d.records.len());
        for (a, b) in back.records.iter().zip(&d.records) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.case, b.case);
            assert_eq!(
                (a.system, a.split, a.flagged),
                (b.system, b.split, b.flagged)
            );
            match (&a.labels, &b.labels) {
                (Some(x), Some(y)) => assert!(x.distance(y) < 1e-14),
                (None, None) => {}
                _ => panic!("label presence changed"),
            }
        }
    }

    #[test]
    fn csv_errors_name_the_column() {
        let d = small(4);
        let text = d.to_csv().replacen("train", "valid", 1);
        let e = Dataset::from_csv(&text, "d.csv").unwrap_err().to_string();
        assert!(e.starts_with("d.csv:2: split:"), "{e}");
    }

    #[test]
    fn bad_ranges_are_rejected() {
        let cfg = DatasetConfig {
            ranges: ParamRanges {
                p_load: (1.0, 0.5),
                ..ParamRanges::default()
            },
            ..DatasetConfig::default()
        };
        assert!(generate_dataset(
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
            &NrConfig::default()
        )
        .is_err());
    }
}

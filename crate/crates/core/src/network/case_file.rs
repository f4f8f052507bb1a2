//! Text case files.
//!
//! ```text
//! # comment
//! [buses]
//! count = 2
//!
//! [slack]
//! bus = 1
//! magnitude = 1.0
//! angle_deg = 0.0
//!
//! [lines]
//! # from to r x shunt
//! 1 2 0.1 0.1 0.0
//!
//! [injections]
//! # bus p q   (net injection, loads negative)
//! 2 -0.9 -0.6
//! ```
//!
//! Instead of `[lines]` a `[matrix]` section may give the admittance matrix
//! directly, one `G[i] = ...` and one `B[i] = ...` row per bus. Bus numbers
//! are 1-based; angles are in degrees. Buses missing from `[injections]` have
//! zero injection.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{GridCase, Line, Phasor};
use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(PartialEq, Clone, Copy)]
enum Section {
    None,
    Buses,
    Slack,
    Lines,
    Matrix,
    Injections,
}

struct Parser<'a> {
    source: &'a str,
    line: usize,
}

impl Parser<'_> {
    fn err(&self, field: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            line: self.line,
            field: field.to_string(),
            message: message.into(),
        }
    }

    fn float(&self, field: &str, token: &str) -> Result<f64> {
        let v: f64 = token
            .parse()
            .map_err(|_| self.err(field, format!("expected a number, got '{token}'")))?;
        if !v.is_finite() {
            return Err(self.err(field, "value must be finite"));
        }
        Ok(v)
    }

    fn bus(&self, field: &str, token: &str, n: Option<usize>) -> Result<usize> {
        let b: usize = token
            .parse()
            .map_err(|_| self.err(field, format!("expected a bus number, got '{token}'")))?;
        let n = n.ok_or_else(|| self.err(field, "[buses] count must come first"))?;
        if b == 0 || b > n {
            return Err(self.err(field, format!("bus {b} outside 1..={n}")));
        }
        Ok(b - 1)
    }
}

/// Parse case text. `source` only labels diagnostics.
pub fn parse_case(text: &str, source: &str) -> Result<GridCase> {
    let mut p = Parser { source, line: 0 };
    let mut section = Section::None;
    let mut n: Option<usize> = None;
    let mut slack_bus: Option<usize> = None;
    let mut slack_mag: Option<f64> = None;
    let mut slack_ang = 0.0;
    let mut lines: Vec<Line> = Vec::new();
    let mut has_lines = false;
    let mut g_rows: Vec<Option<Vec<f64>>> = Vec::new();
    let mut b_rows: Vec<Option<Vec<f64>>> = Vec::new();
    let mut has_matrix = false;
    let mut injections: Vec<(usize, f64, f64)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        p.line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') && content.ends_with(']') {
            section = match &content[1..content.len() - 1] {
                "buses" => Section::Buses,
                "slack" => Section::Slack,
                "lines" => {
                    has_lines = true;
                    Section::Lines
                }
                "matrix" => {
                    has_matrix = true;
                    Section::Matrix
                }
                "injections" => Section::Injections,
                other => return Err(p.err("section", format!("unknown section [{other}]"))),
            };
            continue;
        }

        match section {
            Section::None => return Err(p.err("section", "data before any section header")),
            Section::Buses | Section::Slack | Section::Matrix => {
                let (key, value) = content
                    .split_once('=')
                    .ok_or_else(|| p.err("entry", "expected 'key = value'"))?;
                let (key, value) = (key.trim(), value.trim());
                match (section, key) {
                    (Section::Buses, "count") => {
                        let count: usize = value.parse().map_err(|_| {
                            p.err("buses.count", format!("expected an integer, got '{value}'"))
                        })?;
                        if count < 2 {
                            return Err(p.err(
                                "buses.count",
                                format!("a network needs at least 2 buses, got {count}"),
                            ));
                        }
                        n = Some(count);
                        g_rows = vec![None; count];
                        b_rows = vec![None; count];
                    }
                    (Section::Slack, "bus") => slack_bus = Some(p.bus("slack.bus", value, n)?),
                    (Section::Slack, "magnitude") => {
                        slack_mag = Some(p.float("slack.magnitude", value)?)
                    }
                    (Section::Slack, "angle_deg") => {
                        slack_ang = p.float("slack.angle_deg", value)?.to_radians()
                    }
                    (Section::Matrix, _) => {
                        let (name, row) = parse_matrix_key(key)
                            .ok_or_else(|| p.err("matrix", format!("bad row key '{key}'")))?;
                        let field = format!("matrix.{name}[{row}]");
                        let r = p.bus(&field, &row.to_string(), n)?;
                        let values = value
                            .split_whitespace()
                            .map(|t| p.float(&field, t))
                            .collect::<Result<Vec<_>>>()?;
                        if values.len() != n.unwrap_or(0) {
                            return Err(p.err(
                                &field,
                                format!("expected {} values, got {}", n.unwrap_or(0), values.len()),
                            ));
                        }
                        let rows = if name == 'G' {
                            &mut g_rows
                        } else {
                            &mut b_rows
                        };
                        if rows[r].replace(values).is_some() {
                            return Err(p.err(&field, "row given twice"));
                        }
                    }
                    (Section::Buses, k) => return Err(p.err(&format!("buses.{k}"), "unknown key")),
                    (_, k) => return Err(p.err(&format!("slack.{k}"), "unknown key")),
                }
            }
            Section::Lines => {
                let tokens: Vec<&str> = content.split_whitespace().collect();
                if tokens.len() != 5 {
                    return Err(p.err(
                        "lines",
                        format!("expected 'from to r x shunt', got {} fields", tokens.len()),
                    ));
                }
                lines.push(Line::new(
                    p.bus("lines.from", tokens[0], n)?,
                    p.bus("lines.to", tokens[1], n)?,
                    p.float("lines.r", tokens[2])?,
                    p.float("lines.x", tokens[3])?,
                    p.float("lines.shunt", tokens[4])?,
                ));
            }
            Section::Injections => {
                let tokens: Vec<&str> = content.split_whitespace().collect();
                if tokens.len() != 3 {
                    return Err(p.err(
                        "injections",
                        format!("expected 'bus p q', got {} fields", tokens.len()),
                    ));
                }
                injections.push((
                    p.bus("injections.bus", tokens[0], n)?,
                    p.float("injections.p", tokens[1])?,
                    p.float("injections.q", tokens[2])?,
                ));
            }
        }
    }

    p.line = 0;
    let n = n.ok_or_else(|| p.err("buses.count", "missing"))?;
    let slack_bus = slack_bus.ok_or_else(|| p.err("slack.bus", "missing"))?;
    let slack_mag = slack_mag.ok_or_else(|| p.err("slack.magnitude", "missing"))?;
    let mut pv = DVector::zeros(n);
    let mut qv = DVector::zeros(n);
    for (bus, pi, qi) in injections {
        pv[bus] += pi;
        qv[bus] += qi;
    }
    let slack = Phasor::new(slack_mag, slack_ang);

    match (has_lines, has_matrix) {
        (true, true) => Err(p.err("lines", "give either [lines] or [matrix], not both")),
        (false, false) => Err(p.err("lines", "missing [lines] or [matrix] section")),
        (true, false) => GridCase::from_lines(n, &lines, pv, qv, slack_bus, slack),
        (false, true) => {
            let mut g = DMatrix::zeros(n, n);
            let mut b = DMatrix::zeros(n, n);
            for (name, rows, m) in [('G', &g_rows, &mut g), ('B', &b_rows, &mut b)] {
                for (i, row) in rows.iter().enumerate() {
                    let row = row.as_ref().ok_or_else(|| {
                        p.err(&format!("matrix.{name}[{}]", i + 1), "missing row")
                    })?;
                    for (j, &v) in row.iter().enumerate() {
                        m[(i, j)] = v;
                    }
                }
            }
            GridCase::build_direct(g, b, pv, qv, slack_bus, slack)
        }
    }
}

fn parse_matrix_key(key: &str) -> Option<(char, usize)> {
    let name = key.chars().next()?;
    if name != 'G' && name != 'B' {
        return None;
    }
    let rest = key[1..].trim();
    let inner = rest.strip_prefix('[')?.strip_suffix(']')?;
    Some((name, inner.trim().parse().ok()?))
}

pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase> {
    let path = path.as_ref();
    let text = crate::io::read_text(path)?;
    parse_case(&text, &path.display().to_string())
}

/// Serialize in `[matrix]` form, which represents any case exactly.
pub fn write_case(case: &GridCase) -> String {
    let n = case.n_buses();
    let mut out = String::new();
    let _ = writeln!(out, "[buses]\ncount = {n}\n");
    let _ = writeln!(
        out,
        "[slack]\nbus = {}\nmagnitude = {}\nangle_deg = {}\n",
        case.slack_index() + 1,
        case.slack_voltage().magnitude,
        case.slack_voltage().angle.to_degrees()
    );
    let _ = writeln!(out, "[matrix]");
    for (name, m) in [('G', case.conductance()), ('B', case.susceptance())] {
        for i in 0..n {
            let row: Vec<String> = (0..n).map(|j| m[(i, j)].to_string()).collect();
            let _ = writeln!(out, "{name}[{}] = {}", i + 1, row.join(" "));
        }
    }
    let _ = writeln!(out, "\n[injections]");
    for i in 0..n {
        let _ = writeln!(
            out,
            "{} {} {}",
            i + 1,
            case.p_injection()[i],
            case.q_injection()[i]
        );
    }
    out
}

pub fn save_case(case: &GridCase, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), write_case(case).as_bytes())
}

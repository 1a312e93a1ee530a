//! Metric rows and their CSV form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::dataset::write_file;
use crate::error::{HarnessError, Result};

pub const HEADER: &str = "experiment,iteration_or_n,metric,value,seed";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    DistToRpca,
    DistToTrueCov,
    DistToSoftthresh,
    Loss,
    GenGap,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::DistToRpca,
        Metric::DistToTrueCov,
        Metric::DistToSoftthresh,
        Metric::Loss,
        Metric::GenGap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::DistToRpca => "dist_to_rpca",
            Metric::DistToTrueCov => "dist_to_true_cov",
            Metric::DistToSoftthresh => "dist_to_softthresh",
            Metric::Loss => "loss",
            Metric::GenGap => "gen_gap",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub experiment: String,
    pub iteration_or_n: u64,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
}

impl MetricRow {
    pub fn new(experiment: &str, iteration_or_n: usize, metric: Metric, value: f64, seed: u64) -> Self {
        MetricRow {
            experiment: experiment.to_string(),
            iteration_or_n: iteration_or_n as u64,
            metric,
            value,
            seed,
        }
    }
}

/// 17 significant digits: enough to round-trip any `f64`.
fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn to_csv(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.experiment,
            r.iteration_or_n,
            r.metric,
            format_value(r.value),
            r.seed
        ));
    }
    out
}

/// Writes rows after checking that every value is finite.
pub fn write_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    if let Some(r) = rows.iter().find(|r| !r.value.is_finite()) {
        return Err(HarnessError::Numerical(egan_core::Error::InvalidInput(format!(
            "non-finite {} at {} in {}",
            r.metric, r.iteration_or_n, r.experiment
        ))));
    }
    write_file(path, &to_csv(rows))
}

pub fn parse_csv(path: &Path, text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(HarnessError::malformed(path, "missing or wrong header"));
    }
    let mut rows = Vec::new();
    for (k, line) in lines.enumerate() {
        let bad = |why: &str| HarnessError::malformed(path, format!("line {}: {why}", k + 2));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        if fields[0].is_empty() {
            return Err(bad("empty experiment id"));
        }
        let row = MetricRow {
            experiment: fields[0].to_string(),
            iteration_or_n: fields[1].parse().map_err(|_| bad("bad iteration_or_n"))?,
            metric: fields[2].parse().map_err(|e: String| bad(&e))?,
            value: fields[3].parse().map_err(|_| bad("bad value"))?,
            seed: fields[4].parse().map_err(|_| bad("bad seed"))?,
        };
        if !row.value.is_finite() {
            return Err(bad("non-finite value"));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    parse_csv(path, &text)
}

//! Dataset and generator files.
//!
//! A dataset is a CSV with a `# d=<d> n=<n> seed=<seed>` header and one point
//! per row; its covariance sits next to it in `<stem>.cov.csv`. Floats are
//! written in shortest round-trip form, so reloading is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use egan_core::{random_psd, sample_gaussian, DiscreteMeasure, GaussianMeasure, LinearGenerator, SymMatrix};
use nalgebra::DMatrix;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub points: DMatrix<f64>,
    pub cov: SymMatrix,
}

impl Dataset {
    /// Draws `K = random_psd(d, seed)` and `n` points from `N(0, K)`.
    pub fn generate(d: usize, n: usize, seed: u64) -> Result<Self> {
        let cov = random_psd(d, seed)?;
        Self::sample(cov, n, seed)
    }

    pub fn sample(cov: SymMatrix, n: usize, seed: u64) -> Result<Self> {
        let measure = sample_gaussian(&GaussianMeasure::centered(cov.clone())?, n, seed)?;
        Ok(Dataset {
            seed,
            points: measure.points().clone(),
            cov,
        })
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn measure(&self) -> Result<DiscreteMeasure> {
        Ok(DiscreteMeasure::uniform(self.points.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = format!("# d={} n={} seed={}\n", self.dim(), self.len(), self.seed);
        write_rows(&mut text, &self.points);
        write_file(path, &text)?;
        let mut cov = String::new();
        write_rows(&mut cov, self.cov.as_matrix());
        write_file(&cov_path(path), &cov)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| HarnessError::malformed(path, "empty file"))?;
        let (d, n, seed) = parse_header(header).ok_or_else(|| HarnessError::malformed(path, "bad header"))?;
        let points = read_rows(path, lines, d)?;
        if points.nrows() != n {
            return Err(HarnessError::malformed(path, format!("header says n={n}, found {} rows", points.nrows())));
        }
        let cpath = cov_path(path);
        let ctext = fs::read_to_string(&cpath).map_err(|e| HarnessError::io(&cpath, e))?;
        let cov = read_rows(&cpath, ctext.lines(), d)?;
        if cov.nrows() != d {
            return Err(HarnessError::malformed(&cpath, format!("expected {d} rows, found {}", cov.nrows())));
        }
        if cov != cov.transpose() {
            return Err(HarnessError::malformed(&cpath, "covariance is not symmetric"));
        }
        let cov = SymMatrix::new(cov).map_err(|e| HarnessError::malformed(&cpath, e.to_string()))?;
        Ok(Dataset { seed, points, cov })
    }
}

/// `data.csv` becomes `data.cov.csv`.
pub fn cov_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.cov.csv"))
}

fn parse_header(line: &str) -> Option<(usize, usize, u64)> {
    let mut fields = line.strip_prefix('#')?.split_whitespace();
    let mut take = |key: &str| fields.next()?.strip_prefix(key)?.strip_prefix('=').map(str::to_owned);
    let d = take("d")?.parse().ok()?;
    let n = take("n")?.parse().ok()?;
    let seed = take("seed")?.parse().ok()?;
    Some((d, n, seed))
}

fn write_rows(out: &mut String, m: &DMatrix<f64>) {
    for row in m.row_iter() {
        for (k, v) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
}

fn read_rows<'a>(path: &Path, lines: impl Iterator<Item = &'a str>, width: usize) -> Result<DMatrix<f64>> {
    let mut values = Vec::new();
    let mut rows = 0;
    for (k, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| HarnessError::malformed(path, format!("line {}: bad number {field:?}", k + 2)))?;
            if !v.is_finite() {
                return Err(HarnessError::malformed(path, format!("line {}: non-finite value", k + 2)));
            }
            values.push(v);
        }
        if values.len() - before != width {
            return Err(HarnessError::malformed(
                path,
                format!("line {}: expected {width} columns, found {}", k + 2, values.len() - before),
            ));
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, width, &values))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Writes `G` as `d` rows of `r` comma-separated values.
pub fn save_generator(path: &Path, g: &LinearGenerator) -> Result<()> {
    let mut text = String::new();
    write_rows(&mut text, g.matrix());
    write_file(path, &text)
}

pub fn load_generator(path: &Path) -> Result<LinearGenerator> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let width = text
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(|l| l.split(',').count())
        .ok_or_else(|| HarnessError::malformed(path, "empty generator file"))?;
    let m = read_rows(path, text.lines(), width)?;
    LinearGenerator::new(m).map_err(|e| HarnessError::malformed(path, e.to_string()))
}

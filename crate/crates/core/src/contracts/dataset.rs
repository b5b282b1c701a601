//! Point datasets and the numeric step kernels.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::digest::{compute_digest, Digest};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DatasetError {
    #[error("line {line}: expected `<x> <y>`")]
    BadLine { line: usize },
    #[error("line {line}: value is not finite")]
    NonFinite { line: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("degenerate input: need at least two points with distinct x")]
pub struct DegenerateInput;

/// Render a real with 17 significant digits.
///
/// 17 digits round-trip every `f64` exactly, so rendered values parse back
/// to the same bits and digests over rendered text are stable.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// An ordered list of `(x, y)` points.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub points: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Dataset { points }
    }

    /// Canonical encoding: one `<x> <y>` line per point, newline terminated.
    pub fn encode(&self) -> String {
        let mut out = String::new();
        for (x, y) in &self.points {
            out.push_str(&format_real(*x));
            out.push(' ');
            out.push_str(&format_real(*y));
            out.push('\n');
        }
        out
    }

    pub fn digest(&self) -> Digest {
        compute_digest(self.encode().as_bytes())
    }

    /// Parse `<x> <y>` lines. Blank lines are skipped.
    pub fn parse(text: &str) -> Result<Dataset, DatasetError> {
        let mut points = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(x), Some(y), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(DatasetError::BadLine { line: i + 1 });
            };
            let x: f64 = x.parse().map_err(|_| DatasetError::BadLine { line: i + 1 })?;
            let y: f64 = y.parse().map_err(|_| DatasetError::BadLine { line: i + 1 })?;
            if !x.is_finite() || !y.is_finite() {
                return Err(DatasetError::NonFinite { line: i + 1 });
            }
            points.push((x, y));
        }
        Ok(Dataset { points })
    }
}

/// Named datasets available to a workflow execution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetStore {
    sets: BTreeMap<String, Dataset>,
}

impl DatasetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, data: Dataset) {
        self.sets.insert(name.into(), data);
    }

    pub fn get(&self, name: &str) -> Option<&Dataset> {
        self.sets.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.sets.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Dataset)> {
        self.sets.iter()
    }

    /// Load every regular file in `dir` as a dataset named after the file.
    pub fn load_dir(dir: &Path) -> io::Result<DatasetStore> {
        let mut store = DatasetStore::new();
        let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            if !entry.file_type()?.is_file() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            let text = fs::read_to_string(entry.path())?;
            let data = Dataset::parse(&text).map_err(|e| {
                io::Error::new(io::ErrorKind::InvalidData, format!("{name}: {e}"))
            })?;
            store.insert(name, data);
        }
        Ok(store)
    }

    pub fn save_dir(&self, dir: &Path) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, data) in &self.sets {
            fs::write(dir.join(name), data.encode())?;
        }
        Ok(())
    }
}

/// Ordinary least-squares fit of `y = slope * x + intercept`.
///
/// Uses centred sums, which keeps the fit accurate when the x values sit far
/// from the origin.
pub fn step_linreg(points: &[(f64, f64)]) -> Result<(f64, f64), DegenerateInput> {
    if points.len() < 2 {
        return Err(DegenerateInput);
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(x, y) in points {
        let dx = x - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    if sxx == 0.0 {
        return Err(DegenerateInput);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    Ok((slope, intercept))
}

pub fn step_scale(data: &Dataset, factor: f64) -> Dataset {
    Dataset {
        points: data.points.iter().map(|&(x, y)| (x, y * factor)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_points_define_the_line() {
        assert_eq!(step_linreg(&[(0.0, 0.0), (1.0, 1.0)]).unwrap(), (1.0, 0.0));
    }

    #[test]
    fn constant_y_gives_zero_slope() {
        assert_eq!(
            step_linreg(&[(0.0, 5.0), (1.0, 5.0), (2.0, 5.0)]).unwrap(),
            (0.0, 5.0)
        );
    }

    #[test]
    fn exact_lines_are_recovered() {
        assert_eq!(
            step_linreg(&[(0.0, 0.0), (1.0, 1.0), (2.0, 2.0)]).unwrap(),
            (1.0, 0.0)
        );
        assert_eq!(
            step_linreg(&[(0.0, 1.0), (1.0, 3.0), (2.0, 5.0)]).unwrap(),
            (2.0, 1.0)
        );
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert_eq!(step_linreg(&[]), Err(DegenerateInput));
        assert_eq!(step_linreg(&[(1.0, 2.0)]), Err(DegenerateInput));
        assert_eq!(step_linreg(&[(1.0, 2.0), (1.0, 3.0), (1.0, 4.0)]), Err(DegenerateInput));
    }

    #[test]
    fn reals_render_with_17_significant_digits() {
        assert_eq!(format_real(1.0), "1.0000000000000000e0");
        assert_eq!(format_real(0.1), "1.0000000000000001e-1");
        assert_eq!(format_real(-2.5), "-2.5000000000000000e0");
        // Ties round to even.
        assert_eq!(format!("{:.1e}", 0.125), "1.2e-1");
        assert_eq!(format!("{:.1e}", 0.375), "3.8e-1");
    }

    #[test]
    fn parse_rejects_bad_lines() {
        assert_eq!(Dataset::parse("1 2\n3\n"), Err(DatasetError::BadLine { line: 2 }));
        assert_eq!(Dataset::parse("1 2 3"), Err(DatasetError::BadLine { line: 1 }));
        assert_eq!(Dataset::parse("1 inf"), Err(DatasetError::NonFinite { line: 1 }));
        assert_eq!(Dataset::parse("\n0 1\n\n").unwrap().points, vec![(0.0, 1.0)]);
    }

    proptest! {
        #[test]
        fn encoding_round_trips_exactly(points in prop::collection::vec((-1e300f64..1e300, -1e-300f64..1e-300), 0..20)) {
            let d = Dataset::new(points);
            let parsed = Dataset::parse(&d.encode()).unwrap();
            prop_assert_eq!(&parsed, &d);
            prop_assert_eq!(parsed.digest(), d.digest());
        }

        #[test]
        fn residuals_are_orthogonal(
            slope in -10.0f64..10.0,
            intercept in -10.0f64..10.0,
            xs in prop::collection::vec(-10.0f64..10.0, 3..200),
            noise in prop::collection::vec(-1.0f64..1.0, 200),
        ) {
            let points: Vec<_> = xs.iter().zip(&noise).map(|(&x, &e)| (x, slope * x + intercept + e)).collect();
            prop_assume!(step_linreg(&points).is_ok());
            let (m, b) = step_linreg(&points).unwrap();
            let r: Vec<f64> = points.iter().map(|&(x, y)| y - (m * x + b)).collect();
            let sum_r: f64 = r.iter().sum();
            let sum_rx: f64 = r.iter().zip(&points).map(|(r, p)| r * p.0).sum();
            prop_assert!(sum_r.abs() < 1e-9, "sum of residuals {}", sum_r);
            prop_assert!(sum_rx.abs() < 1e-9, "sum of residual*x {}", sum_rx);
        }
    }
}

//! Reading run artifacts back: seed-median comparisons, metrics validation
//! and heatmap aggregation.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use ligs_core::metrics::{read_metrics, MetricsRow};

use crate::error::HarnessError;

pub const METRICS: &[&str] = &["ret_ext", "ret_int", "switches", "success"];

/// Mean of `metric` over the last 10% of episodes (at least one).
pub fn final_window(rows: &[MetricsRow], metric: &str) -> Option<f64> {
    if rows.is_empty() {
        return None;
    }
    let w = rows.len().div_ceil(10);
    let tail = &rows[rows.len() - w..];
    let sum: f64 = tail.iter().map(|r| r.metric(metric)).sum::<Option<f64>>()?;
    Some(sum / w as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmWindow {
    pub algorithm: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<f64>,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub metric: String,
    pub a: AlgorithmWindow,
    pub b: AlgorithmWindow,
    /// `median(a) − median(b)`.
    pub difference: f64,
}

impl CompareReport {
    pub fn sign(&self) -> std::cmp::Ordering {
        self.difference.total_cmp(&0.0)
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for w in [&self.a, &self.b] {
            let per: Vec<String> = w
                .seeds
                .iter()
                .zip(&w.per_seed)
                .map(|(s, v)| format!("seed {s}: {v:.4}"))
                .collect();
            writeln!(f, "{:<20} median {:>10.4}  ({})", w.algorithm, w.median, per.join(", "))?;
        }
        let rel = match self.sign() {
            std::cmp::Ordering::Greater => ">",
            std::cmp::Ordering::Less => "<",
            std::cmp::Ordering::Equal => "=",
        };
        writeln!(
            f,
            "{} {rel} {} on final-window {} (difference {:+.4})",
            self.a.algorithm, self.b.algorithm, self.metric, self.difference
        )
    }
}

fn seeds_in(dir: &Path) -> BTreeSet<u64> {
    let Ok(entries) = fs::read_dir(dir) else {
        return BTreeSet::new();
    };
    entries
        .filter_map(Result::ok)
        .filter_map(|e| {
            let path = e.path();
            (path.extension()? == "csv").then_some(())?;
            path.file_stem()?.to_str()?.parse::<u64>().ok()
        })
        .collect()
}

/// Compares two algorithms under `dir/<algorithm>/<seed>.csv` by the median
/// over seeds of the final-window metric. Both algorithms must cover the same
/// seeds, at least three of them.
pub fn compare_runs(dir: &Path, a: &str, b: &str, metric: &str) -> Result<CompareReport, HarnessError> {
    if !METRICS.contains(&metric) {
        return Err(HarnessError::Invalid(format!(
            "unknown metric `{metric}` (expected one of {})",
            METRICS.join(", ")
        )));
    }
    let seeds: BTreeSet<u64> = seeds_in(&dir.join(a)).union(&seeds_in(&dir.join(b))).copied().collect();
    let mut missing = Vec::new();
    for alg in [a, b] {
        for s in &seeds {
            let path = dir.join(alg).join(format!("{s}.csv"));
            if !path.exists() {
                missing.push(path.display().to_string());
            }
        }
    }
    if !missing.is_empty() {
        return Err(HarnessError::MissingRuns(missing));
    }
    if seeds.len() < 3 {
        return Err(HarnessError::MissingRuns(vec![format!(
            "{}: found {} seed(s) per algorithm, need at least 3",
            dir.display(),
            seeds.len()
        )]));
    }
    let window = |alg: &str| -> Result<AlgorithmWindow, HarnessError> {
        let mut per_seed = Vec::new();
        for s in &seeds {
            let path = dir.join(alg).join(format!("{s}.csv"));
            let rows = read_metrics(&path)?;
            let v = final_window(&rows, metric)
                .ok_or_else(|| HarnessError::Invalid(format!("{}: no episodes recorded", path.display())))?;
            per_seed.push(v);
        }
        Ok(AlgorithmWindow {
            algorithm: alg.to_string(),
            seeds: seeds.iter().copied().collect(),
            median: median(&per_seed),
            per_seed,
        })
    };
    let wa = window(a)?;
    let wb = window(b)?;
    Ok(CompareReport {
        metric: metric.to_string(),
        difference: wa.median - wb.median,
        a: wa,
        b: wb,
    })
}

/// Parses every file, checking header, fields and step order. Returns the
/// row count per file.
pub fn validate_metrics(paths: &[PathBuf]) -> Result<Vec<(PathBuf, usize)>, HarnessError> {
    paths
        .iter()
        .map(|p| Ok((p.clone(), read_metrics(p)?.len())))
        .collect()
}

fn read_grid(path: &Path) -> Result<Vec<Vec<u64>>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|c| {
                    c.trim().parse::<u64>().map_err(|e| {
                        HarnessError::Invalid(format!("{}:{}: `{c}`: {e}", path.display(), i + 1))
                    })
                })
                .collect()
        })
        .collect()
}

/// Sums every `*_heatmap.csv` grid in a run directory.
pub fn aggregate_heatmaps(run_dir: &Path) -> Result<(Vec<Vec<u64>>, usize), HarnessError> {
    let entries = fs::read_dir(run_dir).map_err(|e| HarnessError::io(run_dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("_heatmap.csv")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::MissingRuns(vec![format!(
            "{}: no *_heatmap.csv files",
            run_dir.display()
        )]));
    }
    let mut total: Option<Vec<Vec<u64>>> = None;
    for f in &files {
        let grid = read_grid(f)?;
        match total.as_mut() {
            None => total = Some(grid),
            Some(t) => {
                let same = t.len() == grid.len() && t.iter().zip(&grid).all(|(a, b)| a.len() == b.len());
                if !same {
                    return Err(HarnessError::Invalid(format!("{}: grid shape differs", f.display())));
                }
                for (row, add) in t.iter_mut().zip(&grid) {
                    for (c, v) in row.iter_mut().zip(add) {
                        *c += v;
                    }
                }
            }
        }
    }
    Ok((total.unwrap_or_default(), files.len()))
}

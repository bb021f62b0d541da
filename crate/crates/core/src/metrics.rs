//! Per-episode metrics as CSV.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const HEADER: &str = "step,ret_ext,ret_int,switches,success,seed";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub episode_return_extrinsic: f64,
    pub episode_return_intrinsic: f64,
    pub switch_activations: u64,
    pub win_or_success: bool,
    pub wall_seed: u64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:?},{:?},{},{},{}",
            self.step,
            self.episode_return_extrinsic,
            self.episode_return_intrinsic,
            self.switch_activations,
            u8::from(self.win_or_success),
            self.wall_seed
        )
    }

    /// Looks up a column by its header name.
    pub fn metric(&self, name: &str) -> Option<f64> {
        match name {
            "step" => Some(self.step as f64),
            "ret_ext" => Some(self.episode_return_extrinsic),
            "ret_int" => Some(self.episode_return_intrinsic),
            "switches" => Some(self.switch_activations as f64),
            "success" => Some(f64::from(u8::from(self.win_or_success))),
            "seed" => Some(self.wall_seed as f64),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad header `{found}` (expected `{HEADER}`)")]
    Header { path: String, found: String },
    #[error("{path}:{line}: {reason}")]
    Row {
        path: String,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: step {step} follows step {previous}")]
    Ordering {
        path: String,
        line: usize,
        previous: u64,
        step: u64,
    },
}

/// Single-writer CSV sink. The header is written on construction.
pub struct MetricsWriter<W: Write> {
    sink: W,
    label: String,
    rows: u64,
}

impl MetricsWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        let path = path.as_ref();
        let io_err = |source| MetricsError::Io {
            path: path.display().to_string(),
            source,
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(io_err)?;
        }
        let file = File::create(path).map_err(io_err)?;
        Self::new(BufWriter::new(file), path.display().to_string())
    }
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut sink: W, label: impl Into<String>) -> Result<Self, MetricsError> {
        let label = label.into();
        writeln!(sink, "{HEADER}").map_err(|source| MetricsError::Io {
            path: label.clone(),
            source,
        })?;
        Ok(Self {
            sink,
            label,
            rows: 0,
        })
    }

    /// Appends one row and flushes (rows are written at episode boundaries).
    pub fn emit(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        let label = &self.label;
        writeln!(self.sink, "{}", row.to_csv())
            .and_then(|_| self.sink.flush())
            .map_err(|source| MetricsError::Io {
                path: label.clone(),
                source,
            })?;
        self.rows += 1;
        Ok(())
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }

    pub fn into_inner(self) -> W {
        self.sink
    }
}

fn parse_row(path: &str, line_no: usize, line: &str) -> Result<MetricsRow, MetricsError> {
    let bad = |reason: String| MetricsError::Row {
        path: path.to_string(),
        line: line_no,
        reason,
    };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 6 {
        return Err(bad(format!("expected 6 fields, found {}", fields.len())));
    }
    let int = |i: usize| {
        fields[i]
            .parse::<u64>()
            .map_err(|e| bad(format!("field {i} `{}`: {e}", fields[i])))
    };
    let real = |i: usize| {
        fields[i]
            .parse::<f64>()
            .map_err(|e| bad(format!("field {i} `{}`: {e}", fields[i])))
    };
    let success = match fields[4] {
        "0" => false,
        "1" => true,
        other => return Err(bad(format!("success must be 0/1, found `{other}`"))),
    };
    Ok(MetricsRow {
        step: int(0)?,
        episode_return_extrinsic: real(1)?,
        episode_return_intrinsic: real(2)?,
        switch_activations: int(3)?,
        win_or_success: success,
        wall_seed: int(5)?,
    })
}

/// Parses a metrics file, checking the header, every row and step monotonicity.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>, MetricsError> {
    let path = path.as_ref();
    let label = path.display().to_string();
    let file = File::open(path).map_err(|source| MetricsError::Io {
        path: label.clone(),
        source,
    })?;
    read_metrics_from(BufReader::new(file), &label)
}

pub fn read_metrics_from<R: BufRead>(reader: R, label: &str) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(h) => h.map_err(|source| MetricsError::Io {
            path: label.to_string(),
            source,
        })?,
        None => String::new(),
    };
    if header.trim_end() != HEADER {
        return Err(MetricsError::Header {
            path: label.to_string(),
            found: header,
        });
    }
    let mut rows: Vec<MetricsRow> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|source| MetricsError::Io {
            path: label.to_string(),
            source,
        })?;
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let row = parse_row(label, line_no, line.trim_end())?;
        if let Some(prev) = rows.last() {
            if row.step < prev.step {
                return Err(MetricsError::Ordering {
                    path: label.to_string(),
                    line: line_no,
                    previous: prev.step,
                    step: row.step,
                });
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Canonical location of a run's metrics file.
pub fn metrics_path(out_dir: &Path, experiment: &str, algorithm: &str, seed: u64) -> PathBuf {
    out_dir
        .join(experiment)
        .join(algorithm)
        .join(format!("{seed}.csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            episode_return_extrinsic: 0.0,
            episode_return_intrinsic: 0.0,
            switch_activations: 0,
            win_or_success: false,
            wall_seed: 42,
        }
    }

    #[test]
    fn zero_row_formatting() {
        assert_eq!(row(0).to_csv(), "0,0.0,0.0,0,0,42");
    }

    #[test]
    fn nonzero_row_formatting() {
        let r = MetricsRow {
            step: 17,
            episode_return_extrinsic: 1.5,
            episode_return_intrinsic: -0.25,
            switch_activations: 3,
            win_or_success: true,
            wall_seed: 2,
        };
        assert_eq!(r.to_csv(), "17,1.5,-0.25,3,1,2");
        let parsed = parse_row("x", 2, &r.to_csv()).unwrap();
        assert_eq!(parsed, r);
    }

    #[test]
    fn ten_thousand_rows_plus_header() {
        let mut w = MetricsWriter::new(Vec::new(), "mem").unwrap();
        for s in 0..10_000 {
            w.emit(&row(s)).unwrap();
        }
        let bytes = w.into_inner();
        let text = String::from_utf8(bytes).unwrap();
        assert_eq!(text.lines().count(), 10_001);
        let rows = read_metrics_from(text.as_bytes(), "mem").unwrap();
        assert_eq!(rows.len(), 10_000);
    }

    #[test]
    fn ordering_violation_flagged() {
        let mut w = MetricsWriter::new(Vec::new(), "mem").unwrap();
        w.emit(&row(5)).unwrap();
        w.emit(&row(3)).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let err = read_metrics_from(text.as_bytes(), "mem").unwrap_err();
        assert!(matches!(
            err,
            MetricsError::Ordering {
                line: 3,
                previous: 5,
                step: 3,
                ..
            }
        ));
    }

    #[test]
    fn bad_header_rejected() {
        let err = read_metrics_from("a,b\n".as_bytes(), "mem").unwrap_err();
        assert!(matches!(err, MetricsError::Header { .. }));
    }

    #[test]
    fn create_reports_path_on_failure() {
        let err = MetricsWriter::create("/proc/no/such/dir/x.csv").err().unwrap();
        assert!(err.to_string().contains("/proc/no/such/dir"));
    }
}

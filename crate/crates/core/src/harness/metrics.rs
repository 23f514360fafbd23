use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::diffusion::LossParts;
use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "iter,loss_simple,loss_vlb,loss,teacher_fwd,wall_ms,metric_name,metric_value";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iteration: u64,
    pub parts: LossParts,
    pub teacher_fwd: u64,
    /// `None` writes an empty field.
    pub wall_ms: Option<u128>,
    /// Joined with `;` when more than one is present.
    pub metrics: Vec<(String, f64)>,
}

impl MetricsRecord {
    fn to_row(&self) -> String {
        let vlb = self.parts.vlb.map(|v| v.to_string()).unwrap_or_default();
        let wall = self.wall_ms.map(|v| v.to_string()).unwrap_or_default();
        let names: Vec<&str> = self.metrics.iter().map(|(n, _)| n.as_str()).collect();
        let values: Vec<String> = self.metrics.iter().map(|(_, v)| v.to_string()).collect();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.parts.simple,
            vlb,
            self.parts.total,
            self.teacher_fwd,
            wall,
            names.join(";"),
            values.join(";")
        )
    }
}

/// Appends rows to a metrics CSV, enforcing increasing iterations.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    last: Option<u64>,
}

impl MetricsWriter {
    /// Starts a new file; the header is written on the first append.
    pub fn create(path: &Path) -> Result<Self> {
        if path.exists() {
            std::fs::remove_file(path)?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            last: None,
        })
    }

    /// Reopens an existing file for a resumed run, dropping rows past
    /// `upto`.
    pub fn resume(path: &Path, upto: u64) -> Result<Self> {
        if !path.exists() {
            return Ok(Self {
                path: path.to_path_buf(),
                last: None,
            });
        }
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            return Err(Error::format(path, "unexpected metrics header"));
        }
        let mut kept = vec![METRICS_HEADER.to_string()];
        let mut last = None;
        for line in lines {
            let iter: u64 = line
                .split(',')
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad row `{line}`")))?;
            if iter <= upto {
                kept.push(line.to_string());
                last = Some(iter);
            }
        }
        std::fs::write(path, kept.join("\n") + "\n")?;
        Ok(Self {
            path: path.to_path_buf(),
            last,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        if let Some(last) = self.last {
            if record.iteration <= last {
                return Err(Error::state(format!(
                    "iteration {} does not follow {last}",
                    record.iteration
                )));
            }
        }
        let fresh = !self.path.exists();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)?;
        if fresh {
            writeln!(f, "{METRICS_HEADER}")?;
        }
        writeln!(f, "{}", record.to_row())?;
        self.last = Some(record.iteration);
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

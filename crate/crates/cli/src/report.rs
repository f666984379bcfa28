//! Report rows and CSV emission with a fixed column order.
//!
//! All numeric fields are finite and formatted through `Display`, which is
//! deterministic; `wall_seconds` is the single timing column and is the only
//! one allowed to differ between identical runs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("non-finite value in report field {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const REPORT_COLUMNS: &str =
    "experiment,head_id,family,config,sparsity,recall,frob_err,flops_ratio,loss,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub experiment: String,
    pub head_id: String,
    pub family: String,
    pub config: String,
    pub sparsity: f64,
    pub recall: f64,
    pub frob_err: f64,
    pub flops_ratio: f64,
    /// Training loss where applicable, empty column otherwise.
    pub loss: Option<f64>,
    pub wall_seconds: f64,
}

impl ReportRow {
    fn validate(&self) -> Result<(), ReportError> {
        for (name, value) in [
            ("sparsity", self.sparsity),
            ("recall", self.recall),
            ("frob_err", self.frob_err),
            ("flops_ratio", self.flops_ratio),
            ("wall_seconds", self.wall_seconds),
        ] {
            if !value.is_finite() {
                return Err(ReportError::NonFinite(name));
            }
        }
        if let Some(loss) = self.loss {
            if !loss.is_finite() {
                return Err(ReportError::NonFinite("loss"));
            }
        }
        Ok(())
    }

    fn write_csv(&self, w: &mut impl Write) -> Result<(), ReportError> {
        let loss = self.loss.map(|l| l.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            self.experiment,
            self.head_id,
            self.family,
            self.config,
            self.sparsity,
            self.recall,
            self.frob_err,
            self.flops_ratio,
            loss,
            self.wall_seconds
        )?;
        Ok(())
    }
}

/// Atomic CSV write with the fixed header.
pub fn write_report_csv(path: impl AsRef<Path>, rows: &[ReportRow]) -> Result<(), ReportError> {
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        writeln!(w, "{REPORT_COLUMNS}")?;
        for row in rows {
            row.validate()?;
            row.write_csv(&mut w)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Report text with the trailing wall-seconds column removed from each line;
/// two runs of the same experiment must agree on this view byte for byte.
pub fn strip_wall_column(csv_text: &str) -> String {
    csv_text
        .lines()
        .map(|line| match line.rfind(',') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

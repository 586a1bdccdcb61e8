//! Per-iteration run records with optional streaming CSV output.

use std::collections::BTreeMap;
use std::io::Write;

use crate::diagnostics::GradNorms;
use crate::error::Result;

/// Column layouts per solver family.
pub const GDA_COLUMNS: &[&str] = &[
    "k",
    "gn_theta",
    "gn_T",
    "objective",
    "matching_loss",
    "nge_cumulative",
];

pub const ELIM_COLUMNS: &[&str] = &[
    "k",
    "gn_theta",
    "gn_T",
    "objective",
    "matching_loss",
    "nge_cumulative",
    "nge_batch_max",
    "nge_batch_min",
    "nge_batch_mean",
];

pub const PPM_COLUMNS: &[&str] = &[
    "k",
    "gn_theta_Hs",
    "gn_T_Hs",
    "objective",
    "prox_inner_iters_mean",
];

/// Record of one run: every logged iteration plus the outcome summary.
/// When constructed with a writer, each row is flushed as CSV immediately, so
/// interrupted runs remain analyzable.
pub struct RunLog {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Option<f64>>>,
    pub converged: bool,
    /// Number of update steps applied before the stopping check succeeded.
    pub iterations: usize,
    /// Gradient norms on the final batch.
    pub final_batch_norms: Option<GradNorms>,
    /// Gradient norms on the full dataset at the final iterate.
    pub final_full_norms: Option<GradNorms>,
    /// Cumulative gradient evaluations, in units of one full pass over a
    /// batch of the configured size.
    pub nge_total: f64,
    pub warnings: Vec<String>,
    /// Solver-specific per-iteration side channels (not part of the CSV),
    /// e.g. re-evaluated inner-solve residuals.
    pub side: BTreeMap<&'static str, Vec<f64>>,
    writer: Option<Box<dyn Write + Send>>,
}

impl std::fmt::Debug for RunLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunLog")
            .field("rows", &self.rows.len())
            .field("converged", &self.converged)
            .field("iterations", &self.iterations)
            .field("nge_total", &self.nge_total)
            .finish()
    }
}

impl RunLog {
    pub fn new(columns: &[&'static str]) -> Self {
        RunLog {
            columns: columns.to_vec(),
            rows: Vec::new(),
            converged: false,
            iterations: 0,
            final_batch_norms: None,
            final_full_norms: None,
            nge_total: 0.0,
            warnings: Vec::new(),
            side: BTreeMap::new(),
            writer: None,
        }
    }

    /// Streams rows to `writer` as they are pushed; the header goes out
    /// immediately.
    pub fn with_writer(columns: &[&'static str], mut writer: Box<dyn Write + Send>) -> Result<Self> {
        writeln!(writer, "{}", columns.join(","))?;
        writer.flush()?;
        let mut log = RunLog::new(columns);
        log.writer = Some(writer);
        Ok(log)
    }

    pub fn push_row(&mut self, row: Vec<Option<f64>>) -> Result<()> {
        debug_assert_eq!(row.len(), self.columns.len());
        if let Some(w) = self.writer.as_mut() {
            writeln!(w, "{}", format_row(&row))?;
            w.flush()?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn push_side(&mut self, key: &'static str, value: f64) {
        self.side.entry(key).or_default().push(value);
    }

    /// The whole log as CSV text (header plus rows).
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format_row(row));
            out.push('\n');
        }
        out
    }

    /// Column values by name; missing cells are skipped.
    pub fn column(&self, name: &str) -> Vec<f64> {
        let Some(idx) = self.columns.iter().position(|c| *c == name) else {
            return Vec::new();
        };
        self.rows.iter().filter_map(|r| r[idx]).collect()
    }
}

fn format_row(row: &[Option<f64>]) -> String {
    row.iter()
        .map(|cell| match cell {
            Some(x) => format!("{x}"),
            None => String::new(),
        })
        .collect::<Vec<_>>()
        .join(",")
}

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::mtnn::HeadMetrics;

pub const COVERAGE_HEADER: &str = "round,execs,edges,call_traces,bugs,wall_ms";

/// Per-round record. Cumulative fields never decrease.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: usize,
    pub execs: u64,
    pub edges: usize,
    pub call_traces: usize,
    pub bugs: usize,
    pub corpus: usize,
    pub selected: usize,
    pub variants: usize,
    pub retained: usize,
    pub trained: bool,
    pub train_loss: Option<f64>,
    pub edge: Option<HeadMetrics>,
    pub ctx: Option<HeadMetrics>,
    pub approach_mse: Option<f64>,
    pub wall_ms: u64,
}

impl RoundStats {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.round, self.execs, self.edges, self.call_traces, self.bugs, self.wall_ms
        )
    }
}

/// Appends a stats row, writing the header first for a new file.
pub fn append_csv(path: &Path, stats: &RoundStats) -> std::io::Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{COVERAGE_HEADER}")?;
    }
    writeln!(f, "{}", stats.csv_row())
}

pub fn write_csv(path: &Path, rows: &[RoundStats]) -> std::io::Result<()> {
    let mut f = File::create(path)?;
    writeln!(f, "{COVERAGE_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

pub fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(value).map_err(std::io::Error::other)?;
    writeln!(f, "{line}")
}

/// Reads `rounds.jsonl`, stopping quietly at a torn last line.
pub fn read_rounds(path: &Path) -> std::io::Result<Vec<RoundStats>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        match serde_json::from_str(&line) {
            Ok(r) => out.push(r),
            Err(_) => break,
        }
    }
    Ok(out)
}

/// Creates `dir` if needed.
pub fn ensure_dir(dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)
}

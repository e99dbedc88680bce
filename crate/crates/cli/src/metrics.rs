//! Append-only JSONL loss log, one record per (candidate, step, split).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use lagrow::data::Split;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricRecord {
    pub run_id: String,
    pub candidate_id: String,
    pub step: u64,
    pub split: Split,
    pub loss: f64,
    pub wall_ms: Option<f64>,
}

/// Tracks the last step of every (run, candidate, split) stream. A record
/// must be strictly later than the previous one in its stream.
#[derive(Default)]
struct Order {
    last: HashMap<(String, String, Split), u64>,
}

impl Order {
    fn admit(&mut self, r: &MetricRecord) -> std::result::Result<(), String> {
        let key = (r.run_id.clone(), r.candidate_id.clone(), r.split);
        if let Some(&prev) = self.last.get(&key) {
            if r.step <= prev {
                return Err(format!(
                    "record for {}/{}/{:?} at step {} does not follow step {prev}",
                    r.run_id, r.candidate_id, r.split, r.step
                ));
            }
        }
        self.last.insert(key, r.step);
        Ok(())
    }
}

pub struct MetricsLog {
    path: PathBuf,
    out: BufWriter<File>,
    run_id: String,
    clock: Option<Instant>,
    order: Order,
}

impl MetricsLog {
    /// Start a fresh log at `path`, replacing any previous file. The run
    /// directory has a single writer, so each command owns its log.
    pub fn create(path: &Path, run_id: &str, wall_clock: bool) -> Result<Self> {
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).at(path)?;
        Ok(MetricsLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            run_id: run_id.to_string(),
            clock: wall_clock.then(Instant::now),
            order: Order::default(),
        })
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn record(&mut self, candidate: &str, split: Split, step: u64, loss: f64) -> Result<()> {
        let rec = MetricRecord {
            run_id: self.run_id.clone(),
            candidate_id: candidate.to_string(),
            step,
            split,
            loss,
            wall_ms: self.clock.map(|c| c.elapsed().as_secs_f64() * 1000.0),
        };
        self.order.admit(&rec).map_err(CliError::data)?;
        serde_json::to_writer(&mut self.out, &rec).expect("record serializes");
        self.out.write_all(b"\n").at(&self.path)
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().at(&self.path)
    }
}

impl Drop for MetricsLog {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

/// Read a log and check its ordering invariants.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).at(path)?;
    let mut order = Order::default();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.at(path)?;
        if line.is_empty() {
            continue;
        }
        let rec: MetricRecord = serde_json::from_str(&line)
            .map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        order.admit(&rec).map_err(|e| CliError::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

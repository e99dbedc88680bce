//! Long-format loss traces: one `candidate,step,loss` row per measurement.

use std::path::Path;

use lagrow::analysis::LossTrace;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, IoContext, Result};

#[derive(Serialize, Deserialize)]
struct Row {
    candidate: String,
    step: u64,
    loss: f64,
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => CliError::Io { path: path.to_path_buf(), source },
        other => CliError::data(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_traces(path: &Path, traces: &[LossTrace]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for t in traces {
        for &(step, loss) in &t.points {
            w.serialize(Row { candidate: t.operator.clone(), step, loss }).map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().at(path)
}

/// Group rows by candidate in order of first appearance.
pub fn read_traces(path: &Path) -> Result<Vec<LossTrace>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut traces: Vec<LossTrace> = Vec::new();
    for row in r.deserialize() {
        let row: Row = row.map_err(|e| csv_err(path, e))?;
        match traces.iter_mut().find(|t| t.operator == row.candidate) {
            Some(t) => t.points.push((row.step, row.loss)),
            None => traces.push(LossTrace { operator: row.candidate, points: vec![(row.step, row.loss)] }),
        }
    }
    for t in &traces {
        t.validate()?;
    }
    if traces.is_empty() {
        return Err(CliError::data(format!("{} holds no trace rows", path.display())));
    }
    Ok(traces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_order_and_bits() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let traces = vec![
            LossTrace::new("i1-b1-dup-k2", vec![(0, 0.1 + 0.2), (5, 1.0 / 3.0)]).unwrap(),
            LossTrace::new("i0-b2-rand-k2", vec![(0, 2.0), (5, 1e-300)]).unwrap(),
        ];
        write_traces(&p, &traces).unwrap();
        assert_eq!(read_traces(&p).unwrap(), traces);
    }

    #[test]
    fn out_of_order_rows_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "candidate,step,loss\na,5,1.0\na,3,1.0\n").unwrap();
        let err = read_traces(&p).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("trace a"), "{err}");
    }
}

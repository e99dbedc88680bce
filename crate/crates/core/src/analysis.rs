//! Correlation, smoothing, recall@k, regret and phase-transition analysis
//! over per-operator loss traces.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered `(global step, validation loss)` measurements for one candidate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub operator: String,
    pub points: Vec<(u64, f64)>,
}

impl LossTrace {
    pub fn new(operator: impl Into<String>, points: Vec<(u64, f64)>) -> Result<Self> {
        let t = LossTrace { operator: operator.into(), points };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::data(format!("trace {}: steps must be strictly increasing", self.operator)));
        }
        if let Some((s, l)) = self.points.iter().find(|(_, l)| !l.is_finite()) {
            return Err(Error::data(format!("trace {}: non-finite loss {l} at step {s}", self.operator)));
        }
        Ok(())
    }

    pub fn steps(&self) -> Vec<u64> {
        self.points.iter().map(|p| p.0).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.1).collect()
    }

    pub fn loss_at(&self, step: u64) -> Option<f64> {
        self.points.iter().find(|p| p.0 == step).map(|p| p.1)
    }

    pub fn last(&self) -> Option<(u64, f64)> {
        self.points.last().copied()
    }
}

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::precondition(format!("correlation needs equal lengths, got {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::precondition(format!("correlation needs at least 2 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::precondition("correlation inputs must be finite"));
    }
    Ok(())
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Centered moving average; the window truncates at the ends.
pub fn smooth_values(values: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::precondition(format!("smoothing window must be odd and >= 1, got {window}")));
    }
    if values.is_empty() {
        return Err(Error::data("cannot smooth an empty trace"));
    }
    let half = window / 2;
    Ok((0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(values.len() - 1);
            values[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect())
}

pub fn smooth(trace: &LossTrace, window: usize) -> Result<LossTrace> {
    let losses = smooth_values(&trace.losses(), window)?;
    Ok(LossTrace { operator: trace.operator.clone(), points: trace.steps().into_iter().zip(losses).collect() })
}

/// Operators × measurement steps, plus the final loss of each operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceMatrix {
    pub operators: Vec<String>,
    pub steps: Vec<u64>,
    /// `losses[op][col]`.
    pub losses: Vec<Vec<f64>>,
    pub final_losses: Vec<f64>,
}

impl TraceMatrix {
    pub fn new(operators: Vec<String>, steps: Vec<u64>, losses: Vec<Vec<f64>>, final_losses: Vec<f64>) -> Result<Self> {
        if operators.is_empty() || steps.is_empty() {
            return Err(Error::data("trace matrix needs at least one operator and one step"));
        }
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::data("trace matrix steps must be strictly increasing"));
        }
        if losses.len() != operators.len() || final_losses.len() != operators.len() {
            return Err(Error::data(format!(
                "trace matrix has {} operators but {} loss rows and {} final losses",
                operators.len(),
                losses.len(),
                final_losses.len()
            )));
        }
        for (op, row) in operators.iter().zip(&losses) {
            if row.len() != steps.len() {
                return Err(Error::data(format!(
                    "candidate {op} has {} measurements, expected {} (ragged traces)",
                    row.len(),
                    steps.len()
                )));
            }
        }
        if losses.iter().flatten().chain(&final_losses).any(|v| !v.is_finite()) {
            return Err(Error::data("trace matrix contains non-finite losses"));
        }
        Ok(TraceMatrix { operators, steps, losses, final_losses })
    }

    /// Columns at every step of the first trace; final losses are the losses
    /// at `horizon`, which must be one of the measured steps.
    pub fn from_traces(traces: &[LossTrace], horizon: u64) -> Result<Self> {
        let first = traces.first().ok_or_else(|| Error::data("no traces"))?;
        let steps: Vec<u64> = first.steps().into_iter().filter(|&s| s <= horizon).collect();
        let mut losses = Vec::with_capacity(traces.len());
        let mut finals = Vec::with_capacity(traces.len());
        for t in traces {
            t.validate()?;
            let row: Vec<f64> = t.points.iter().filter(|p| p.0 <= horizon).map(|p| p.1).collect();
            let row_steps: Vec<u64> = t.points.iter().filter(|p| p.0 <= horizon).map(|p| p.0).collect();
            if row_steps != steps {
                return Err(Error::data(format!(
                    "candidate {} is measured at different steps than candidate {} (ragged traces)",
                    t.operator, first.operator
                )));
            }
            finals.push(t.loss_at(horizon).ok_or_else(|| {
                Error::data(format!("candidate {} has no measurement at horizon step {horizon}", t.operator))
            })?);
            losses.push(row);
        }
        TraceMatrix::new(traces.iter().map(|t| t.operator.clone()).collect(), steps, losses, finals)
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.losses.iter().map(|r| r[col]).collect()
    }

    /// Smooth every row along the step axis.
    pub fn smoothed(&self, window: usize) -> Result<Self> {
        let losses = self.losses.iter().map(|r| smooth_values(r, window)).collect::<Result<Vec<_>>>()?;
        Ok(TraceMatrix { losses, ..self.clone() })
    }

    /// Row index of the operator with the lowest final loss (first on ties).
    pub fn oracle(&self) -> usize {
        argmin(&self.final_losses)
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// `None` marks an undefined (zero-variance) correlation.
pub type Cell = Option<f64>;

fn spearman_cell(x: &[f64], y: &[f64]) -> Result<Cell> {
    match spearman(x, y) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Spearman correlation between every pair of measurement steps.
pub fn self_correlation(tm: &TraceMatrix) -> Result<Vec<Vec<Cell>>> {
    if tm.operators.len() < 3 {
        return Err(Error::precondition(format!("self-correlation needs >= 3 operators, got {}", tm.operators.len())));
    }
    let n = tm.steps.len();
    let cols: Vec<Vec<f64>> = (0..n).map(|c| tm.column(c)).collect();
    let mut m = vec![vec![None; n]; n];
    for i in 0..n {
        m[i][i] = spearman_cell(&cols[i], &cols[i])?.map(|_| 1.0);
        for j in i + 1..n {
            let v = spearman_cell(&cols[i], &cols[j])?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

/// Spearman correlation of each step's losses with the final losses.
pub fn correlation_with_final(tm: &TraceMatrix) -> Result<Vec<Cell>> {
    (0..tm.steps.len()).map(|c| spearman_cell(&tm.column(c), &tm.final_losses)).collect()
}

/// 1 at a step iff the final-best operator is among the `k` lowest there.
/// Ties at a step are broken by row order.
pub fn recall_at_k(tm: &TraceMatrix, k: usize) -> Result<Vec<u8>> {
    let n = tm.operators.len();
    if k < 1 || k > n {
        return Err(Error::precondition(format!("recall@k needs 1 <= k <= {n}, got {k}")));
    }
    let star = tm.oracle();
    Ok((0..tm.steps.len())
        .map(|c| {
            let col = tm.column(c);
            let ahead = (0..n).filter(|&o| col[o] < col[star] || (col[o] == col[star] && o < star)).count();
            u8::from(ahead < k)
        })
        .collect())
}

/// Final losses, their range, and the operator a step-i selection picks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretInputs {
    pub final_losses: Vec<f64>,
    pub l_min: f64,
    pub l_max: f64,
    /// Row index of the lowest-loss operator at each measured step.
    pub step_argmin: Vec<usize>,
}

impl RegretInputs {
    pub fn new(final_losses: Vec<f64>, step_argmin: Vec<usize>) -> Result<Self> {
        if final_losses.is_empty() {
            return Err(Error::precondition("regret needs at least one final loss"));
        }
        if final_losses.iter().any(|v| !v.is_finite()) {
            return Err(Error::precondition("final losses must be finite"));
        }
        if let Some(bad) = step_argmin.iter().find(|&&g| g >= final_losses.len()) {
            return Err(Error::precondition(format!(
                "selected operator {bad} out of range 0..{}",
                final_losses.len()
            )));
        }
        let l_min = final_losses.iter().cloned().fold(f64::INFINITY, f64::min);
        let l_max = final_losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(RegretInputs { final_losses, l_min, l_max, step_argmin })
    }

    pub fn from_matrix(tm: &TraceMatrix) -> Result<Self> {
        let argmins = (0..tm.steps.len()).map(|c| argmin(&tm.column(c))).collect();
        RegretInputs::new(tm.final_losses.clone(), argmins)
    }

    fn chosen(&self, step: usize) -> Result<f64> {
        let g = self.step_argmin.get(step).ok_or_else(|| {
            Error::precondition(format!("no selection at step index {step} (have {})", self.step_argmin.len()))
        })?;
        Ok(self.final_losses[*g])
    }
}

/// `l(G^i) - l_min`, in nats.
pub fn regret(inputs: &RegretInputs, step: usize) -> Result<f64> {
    Ok(inputs.chosen(step)? - inputs.l_min)
}

/// Regret divided by the final-loss range.
pub fn relative_regret(inputs: &RegretInputs, step: usize) -> Result<f64> {
    let range = inputs.l_max - inputs.l_min;
    if !(range > 0.0) {
        return Err(Error::DegenerateRange(range));
    }
    Ok(regret(inputs, step)? / range)
}

pub const PHASE_THRESHOLD: f64 = 0.8;

/// Earliest measured step from which correlation with the final losses stays
/// at or above `tau` for every later measured step. Undefined correlations
/// count as below `tau`.
pub fn detect_phase_transition(tm: &TraceMatrix, tau: f64) -> Result<Option<u64>> {
    if tm.steps.len() < 3 {
        return Err(Error::precondition(format!("phase transition needs >= 3 measured steps, got {}", tm.steps.len())));
    }
    let curve = correlation_with_final(tm)?;
    let mut found = None;
    for (c, v) in curve.iter().enumerate().rev() {
        match v {
            Some(r) if *r >= tau => found = Some(tm.steps[c]),
            _ => break,
        }
    }
    Ok(found)
}

/// Race length recommended for a transition at `t_star`, counted from the
/// first measured step.
pub fn recommended_race_length(first_step: u64, t_star: u64) -> u64 {
    4 * t_star.saturating_sub(first_step)
}

/// RGB for a correlation in [-1, 1]: -1 blue (0,0,255), 0 white, +1 red
/// (255,0,0), linear in between. Undefined cells are gray (128,128,128).
pub fn heat_color(v: Cell) -> [u8; 3] {
    match v {
        None => [128, 128, 128],
        Some(v) => {
            let v = v.clamp(-1.0, 1.0);
            let fade = ((1.0 - v.abs()) * 255.0).round() as u8;
            if v >= 0.0 {
                [255, fade, fade]
            } else {
                [fade, fade, 255]
            }
        }
    }
}

/// Marker written for undefined cells.
pub const UNDEFINED: &str = "undefined";

/// Write `<stem>.csv` (shortest round-trip decimal, `undefined` for missing
/// cells) and `<stem>.ppm` (binary P6, one pixel per cell, row 0 at top).
pub fn emit_heatmap(matrix: &[Vec<Cell>], stem: &Path) -> Result<(PathBuf, PathBuf)> {
    let n = matrix.len();
    if matrix.iter().any(|r| r.len() != n) {
        return Err(Error::precondition("heatmap matrix must be square"));
    }
    let csv_path = stem.with_extension("csv");
    let ppm_path = stem.with_extension("ppm");
    let mut csv = String::new();
    for row in matrix {
        let cells: Vec<String> = row.iter().map(|c| c.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:?}"))).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    fs::write(&csv_path, csv)?;
    let mut ppm = fs::File::create(&ppm_path)?;
    write!(ppm, "P6\n{n} {n}\n255\n")?;
    let body: Vec<u8> = matrix.iter().flatten().flat_map(|&c| heat_color(c)).collect();
    ppm.write_all(&body)?;
    Ok((csv_path, ppm_path))
}

/// Parse a matrix written by [`emit_heatmap`].
pub fn read_matrix_csv(path: &Path) -> Result<Vec<Vec<Cell>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split(',')
                .map(|c| match c.trim() {
                    UNDEFINED => Ok(None),
                    s => s.parse::<f64>().map(Some).map_err(|e| Error::data(format!("bad matrix cell {s:?}: {e}"))),
                })
                .collect()
        })
        .collect()
}

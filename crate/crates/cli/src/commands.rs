//! The six subcommands. Each takes a validated [`RunConfig`] (or explicit
//! paths), writes its artifacts under the output directory and returns a
//! small summary that `main` prints as JSON.

use std::fs;
use std::path::{Path, PathBuf};

use lagrow::analysis::{
    correlation_with_final, detect_phase_transition, emit_heatmap, recall_at_k, recommended_race_length, regret,
    relative_regret, self_correlation, Cell, RegretInputs, TraceMatrix, UNDEFINED,
};
use lagrow::data::Split;
use lagrow::growth::{apply_growth, GrowthOperator};
use lagrow::race::{
    adaptive_stack_observed, continue_winner_observed, fixed_stack_observed, measurement_offsets, race_observed,
    Observation, SelectionReport, StackOutcome, StageSummary,
};
use lagrow::train::Trainer;
use lagrow::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, StackMode};
use crate::error::{CliError, IoContext, Result};
use crate::metrics::{MetricsLog, METRICS_FILE};
use crate::store::{load_checkpoint, save_checkpoint};
use crate::traces::{read_traces, write_traces};

pub const CONFIG_FILE: &str = "config.toml";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    fs::write(path, text).at(path)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read(path).at(path)?;
    serde_json::from_slice(&text).map_err(|e| CliError::data(format!("{}: {e}", path.display())))
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.out_dir.clone();
    fs::create_dir_all(&out).at(&out)?;
    let cfg_path = out.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()?).at(&cfg_path)?;
    Ok(out)
}

/// Observer that forwards every loss to the metrics log. The first logging
/// failure is kept and reported after the run.
fn logging<'a>(
    log: &'a mut MetricsLog,
    failed: &'a mut Option<CliError>,
    prefix: &'a str,
) -> impl FnMut(Observation<'_>) + 'a {
    move |o| {
        if failed.is_some() {
            return;
        }
        let id = if prefix.is_empty() { o.candidate.to_string() } else { format!("{prefix}/{}", o.candidate) };
        if let Err(e) = log.record(&id, o.split, o.step, o.loss) {
            *failed = Some(e);
        }
    }
}

fn settle(failed: Option<CliError>, log: &mut MetricsLog) -> Result<()> {
    match failed {
        Some(e) => Err(e),
        None => log.flush(),
    }
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: u64,
    pub initial_val_loss: f64,
    pub final_val_loss: f64,
    pub checkpoint: PathBuf,
}

/// Pretrain from random init for `train.steps` steps. Validation loss is
/// logged at step 0, every `train.eval_every` steps and at the end.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let out = prepare_out(cfg)?;
    let corpus = cfg.corpus()?;
    let trainer = Trainer::new(&corpus, &cfg.data.geometry(), cfg.data.seed)?;
    let mut ckpt = Checkpoint::init(&cfg.model, cfg.seed, cfg.optim.clone(), cfg.data.seed)?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE), &cfg.run_id("train")?, cfg.metrics.wall_clock)?;
    let initial = trainer.evaluate(&ckpt)?;
    log.record("base", Split::Validation, 0, initial)?;
    let mut last = initial;
    let total = cfg.train.steps;
    while ckpt.step < total {
        let step = ckpt.step;
        let o = trainer.step(&mut ckpt)?;
        if !o.applied {
            return Err(CliError::data(format!("training diverged at step {step} (loss {})", o.loss)));
        }
        log.record("base", Split::Train, step, o.loss)?;
        if ckpt.step % cfg.train.eval_every == 0 || ckpt.step == total {
            last = trainer.evaluate(&ckpt)?;
            log.record("base", Split::Validation, ckpt.step, last)?;
        }
        let every = cfg.train.checkpoint_every;
        if every > 0 && ckpt.step % every == 0 && ckpt.step < total {
            save_checkpoint(&ckpt, &out.join(format!("ckpt-{:08}", ckpt.step)))?;
        }
    }
    log.flush()?;
    let dir = out.join("final");
    save_checkpoint(&ckpt, &dir)?;
    Ok(TrainSummary { steps: total, initial_val_loss: initial, final_val_loss: last, checkpoint: dir })
}

// ---------------------------------------------------------------------------
// grow

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowSummary {
    pub operator: String,
    pub layers_before: usize,
    pub layers_after: usize,
    pub checkpoint: PathBuf,
}

pub fn cmd_grow(ckpt_dir: &Path, operator: &str, seed: u64, out: &Path) -> Result<GrowSummary> {
    let op: GrowthOperator = operator.parse()?;
    let base = load_checkpoint(ckpt_dir)?;
    let grown = apply_growth(&base, &op, seed)?;
    save_checkpoint(&grown, out)?;
    Ok(GrowSummary {
        operator: op.to_string(),
        layers_before: base.num_layers(),
        layers_after: grown.num_layers(),
        checkpoint: out.to_path_buf(),
    })
}

// ---------------------------------------------------------------------------
// eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub step: u64,
    pub layers: usize,
    pub val_loss: f64,
}

pub fn cmd_eval(cfg: &RunConfig, ckpt_dir: &Path) -> Result<EvalSummary> {
    let ckpt = load_checkpoint(ckpt_dir)?;
    let corpus = cfg.corpus()?;
    let trainer = Trainer::new(&corpus, &cfg.data.geometry(), cfg.data.seed)?;
    Ok(EvalSummary { step: ckpt.step, layers: ckpt.num_layers(), val_loss: trainer.evaluate(&ckpt)? })
}

// ---------------------------------------------------------------------------
// race

pub const REPORT_FILE: &str = "report.json";
pub const TRACES_FILE: &str = "traces.csv";
pub const WINNER_DIR: &str = "winner";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RaceSummary {
    pub winner: String,
    pub candidates: usize,
    pub failed: usize,
    pub base_step: u64,
    pub selection_step: u64,
    pub horizon_step: u64,
    pub oracle: String,
    pub regret: f64,
    pub relative_regret: Option<f64>,
    pub winner_step: u64,
    pub winner_checkpoint: PathBuf,
}

/// Race every operator of the configured space from `ckpt_dir`, continue
/// the winner for `race.continue_budget` steps and write `report.json`,
/// `traces.csv` (live candidates), `metrics.jsonl` and `winner/`.
pub fn cmd_race(cfg: &RunConfig, ckpt_dir: &Path) -> Result<RaceSummary> {
    let base = load_checkpoint(ckpt_dir)?;
    let rc = cfg.race_config(base.num_layers());
    let horizon_offset = cfg.race.horizon.unwrap_or(rc.k_race);
    let offsets = measurement_offsets(rc.k_race, rc.cadence);
    if !offsets.contains(&horizon_offset) {
        return Err(CliError::config(format!(
            "race.horizon {horizon_offset} is not a measured offset; measurements are every race.cadence = {} steps up to {}",
            rc.cadence, rc.k_race
        )));
    }
    let out = prepare_out(cfg)?;
    let corpus = cfg.corpus()?;
    let trainer = Trainer::new(&corpus, &cfg.data.geometry(), cfg.data.seed)?;
    let mut log = MetricsLog::create(&out.join(METRICS_FILE), &cfg.run_id("race")?, cfg.metrics.wall_clock)?;
    let mut failed = None;
    let outcome = race_observed(&base, &rc, &trainer, &mut logging(&mut log, &mut failed, ""))?;
    let report = outcome.report.with_oracle(base.step + horizon_offset)?;
    let mut winner = outcome.winner;
    if rc.continue_budget > 0 {
        let (ckpt, trace) =
            continue_winner_observed(&report, winner, &trainer, rc.continue_budget, &mut logging(&mut log, &mut failed, ""))?;
        winner = ckpt;
        write_traces(&out.join("winner_trace.csv"), &[trace])?;
    }
    settle(failed, &mut log)?;

    write_json(&out.join(REPORT_FILE), &report)?;
    let live: Vec<_> = report.live().map(|c| c.trace.clone()).collect();
    write_traces(&out.join(TRACES_FILE), &live)?;
    let winner_dir = out.join(WINNER_DIR);
    save_checkpoint(&winner, &winner_dir)?;
    let oracle = report.oracle.as_ref().expect("attached above");
    Ok(RaceSummary {
        winner: report.winner.to_string(),
        candidates: report.candidates.len(),
        failed: report.candidates.len() - live.len(),
        base_step: report.base_step,
        selection_step: report.selection_step,
        horizon_step: oracle.horizon_step,
        oracle: oracle.oracle.to_string(),
        regret: oracle.regret,
        relative_regret: oracle.relative_regret,
        winner_step: winner.step,
        winner_checkpoint: winner_dir,
    })
}

// ---------------------------------------------------------------------------
// stack

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub final_depth: usize,
    pub final_val_loss: f64,
    /// Candidate-steps spent in races: candidates times race length, summed
    /// over stages.
    pub overhead_steps: u64,
    pub stages: Vec<StageSummary>,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackSummary {
    pub expected_depths: Vec<usize>,
    pub adaptive: Option<ModeSummary>,
    pub fixed: Option<ModeSummary>,
}

fn finish_mode(out: &Path, outcome: StackOutcome) -> Result<ModeSummary> {
    fs::create_dir_all(out).at(out)?;
    // One report per racing stage; stage 1 is the bootstrap.
    for (i, r) in outcome.reports.iter().enumerate() {
        write_json(&out.join(format!("stage{}_report.json", i + 2)), r)?;
    }
    let dir = out.join("final");
    save_checkpoint(&outcome.checkpoint, &dir)?;
    Ok(ModeSummary {
        final_depth: outcome.checkpoint.num_layers(),
        final_val_loss: outcome.final_val_loss,
        overhead_steps: outcome.overhead_steps,
        stages: outcome.stages,
        checkpoint: dir,
    })
}

/// Run the stacking schedule adaptively (a race per stage), with the fixed
/// post-stacking baseline, or both, and write `summary.json`.
pub fn cmd_stack(cfg: &RunConfig) -> Result<StackSummary> {
    let out = prepare_out(cfg)?;
    let corpus = cfg.corpus()?;
    let trainer = Trainer::new(&corpus, &cfg.data.geometry(), cfg.data.seed)?;
    let schedule = cfg.schedule();
    let mut log = MetricsLog::create(&out.join(METRICS_FILE), &cfg.run_id("stack")?, cfg.metrics.wall_clock)?;
    let mut failed = None;
    let mode = cfg.stack.mode;
    let mut summary = StackSummary { expected_depths: schedule.depths(), adaptive: None, fixed: None };
    if matches!(mode, StackMode::Adaptive | StackMode::Both) {
        let o = adaptive_stack_observed(
            &schedule,
            &trainer,
            &cfg.optim,
            cfg.seed,
            &mut logging(&mut log, &mut failed, "adaptive"),
        )?;
        summary.adaptive = Some(finish_mode(&out.join("adaptive"), o)?);
    }
    if matches!(mode, StackMode::Fixed | StackMode::Both) {
        let o = fixed_stack_observed(
            &schedule,
            &trainer,
            &cfg.optim,
            cfg.seed,
            cfg.stack.block,
            &mut logging(&mut log, &mut failed, "fixed"),
        )?;
        summary.fixed = Some(finish_mode(&out.join("fixed"), o)?);
    }
    settle(failed, &mut log)?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// analyze

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOptions {
    /// Absolute step whose losses count as final; the last step of the first
    /// trace when absent.
    pub horizon: Option<u64>,
    pub smooth: Option<usize>,
    pub tau: f64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { horizon: None, smooth: None, tau: lagrow::analysis::PHASE_THRESHOLD }
    }
}

/// What selecting by the losses of one step would have produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSelection {
    pub step: u64,
    pub spearman_with_final: Option<f64>,
    pub selected: String,
    pub regret: f64,
    pub relative_regret: Option<f64>,
    /// Recall of the oracle among the 1, 2 and 3 lowest losses.
    pub recall: [u8; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub operators: Vec<String>,
    pub steps: Vec<u64>,
    pub horizon_step: u64,
    pub smoothing_window: Option<usize>,
    pub tau: f64,
    pub final_losses: Vec<f64>,
    pub oracle: String,
    /// Detected phase transition; absent when ordering never stabilises or
    /// fewer than three steps were measured.
    pub t_star: Option<u64>,
    pub recommended_race_length: Option<u64>,
    /// Selection right after growing.
    pub at_first: StepSelection,
    /// Selection at the first measured step at or beyond the recommended race
    /// length (the horizon when it is shorter).
    pub at_recommended: Option<StepSelection>,
}

fn cell(c: Cell) -> String {
    c.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:?}"))
}

fn opt_cell(v: Option<f64>) -> String {
    cell(v)
}

fn write_rows(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
    let io = |e: csv::Error| CliError::data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().at(path)
}

fn relative(inputs: &RegretInputs, col: usize) -> Result<Option<f64>> {
    match relative_regret(inputs, col) {
        Ok(v) => Ok(Some(v)),
        Err(lagrow::Error::DegenerateRange(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Load a long-format traces CSV and emit every analysis: self-correlation
/// heatmap (`heatmap.csv`, `heatmap.ppm`), `correlation_with_final.csv`,
/// `recall_at_k.csv`, `regret.csv` and `summary.json`.
pub fn cmd_analyze(traces_path: &Path, opts: &AnalyzeOptions, out: &Path) -> Result<AnalysisSummary> {
    let traces = read_traces(traces_path)?;
    let horizon = match opts.horizon {
        Some(h) => h,
        None => traces[0].last().map(|p| p.0).expect("validated non-empty"),
    };
    let mut tm = TraceMatrix::from_traces(&traces, horizon)?;
    if let Some(w) = opts.smooth {
        tm = tm.smoothed(w)?;
    }
    fs::create_dir_all(out).at(out)?;
    let n = tm.steps.len();

    let heat = self_correlation(&tm)?;
    emit_heatmap(&heat, &out.join("heatmap"))?;

    let cwf = correlation_with_final(&tm)?;
    let rows = tm.steps.iter().zip(&cwf).map(|(s, c)| vec![s.to_string(), cell(*c)]).collect();
    write_rows(&out.join("correlation_with_final.csv"), &["step", "spearman"], rows)?;

    let recall: Vec<Vec<u8>> = (1..=3).map(|k| recall_at_k(&tm, k)).collect::<lagrow::Result<_>>()?;
    let rows = (0..n)
        .map(|c| {
            let mut r = vec![tm.steps[c].to_string()];
            r.extend(recall.iter().map(|v| v[c].to_string()));
            r
        })
        .collect();
    write_rows(&out.join("recall_at_k.csv"), &["step", "recall_at_1", "recall_at_2", "recall_at_3"], rows)?;

    let inputs = RegretInputs::from_matrix(&tm)?;
    let pick = |c: usize| -> Result<StepSelection> {
        Ok(StepSelection {
            step: tm.steps[c],
            spearman_with_final: cwf[c],
            selected: tm.operators[inputs.step_argmin[c]].clone(),
            regret: regret(&inputs, c)?,
            relative_regret: relative(&inputs, c)?,
            recall: [recall[0][c], recall[1][c], recall[2][c]],
        })
    };
    let selections: Vec<StepSelection> = (0..n).map(pick).collect::<Result<_>>()?;
    let rows = selections
        .iter()
        .map(|s| vec![s.step.to_string(), s.selected.clone(), format!("{:?}", s.regret), opt_cell(s.relative_regret)])
        .collect();
    write_rows(&out.join("regret.csv"), &["step", "selected", "regret", "relative_regret"], rows)?;

    let first = tm.steps[0];
    let t_star = if n >= 3 { detect_phase_transition(&tm, opts.tau)? } else { None };
    let recommended = t_star.map(|t| recommended_race_length(first, t));
    let at_recommended = recommended.map(|len| {
        let col = tm.steps.iter().position(|&s| s >= first + len).unwrap_or(n - 1);
        selections[col].clone()
    });
    let summary = AnalysisSummary {
        operators: tm.operators.clone(),
        steps: tm.steps.clone(),
        horizon_step: horizon,
        smoothing_window: opts.smooth,
        tau: opts.tau,
        final_losses: tm.final_losses.clone(),
        oracle: tm.operators[tm.oracle()].clone(),
        t_star,
        recommended_race_length: recommended,
        at_first: selections[0].clone(),
        at_recommended,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Reload a report and re-run selection on its stored traces.
pub fn reselect_report(path: &Path) -> Result<GrowthOperator> {
    let report: SelectionReport = read_json(path)?;
    Ok(lagrow::race::reselect(&report)?)
}

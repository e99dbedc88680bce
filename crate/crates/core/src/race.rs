//! Candidate racing (LAG@k) and stagewise stacking built on it.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::analysis::{relative_regret, regret, smooth, LossTrace, RegretInputs, TraceMatrix};
use crate::checkpoint::Checkpoint;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::growth::{apply_growth, divisors, enumerate, post_stack_operator, DesignSpace, GrowthOperator, InitScheme};
use crate::nn::ModelConfig;
use crate::optim::AdamWConfig;
use crate::rng::{mix_key, str_key};
use crate::train::Trainer;

/// Smoothing window used for selection when losses are measured every step.
pub const SMOOTH_WINDOW: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaceConfig {
    pub space: DesignSpace,
    pub k_race: u64,
    pub cadence: u64,
    pub growth_seed: u64,
    #[serde(default)]
    pub continue_budget: u64,
}

impl RaceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cadence < 1 {
            return Err(Error::config(format!("race cadence must be >= 1, got {}", self.cadence)));
        }
        Ok(())
    }
}

/// Offsets from the race start at which validation loss is measured: every
/// `cadence` steps, plus the last step.
pub fn measurement_offsets(k_race: u64, cadence: u64) -> Vec<u64> {
    let mut v: Vec<u64> = (0..=k_race).step_by(cadence.max(1) as usize).collect();
    if v.last() != Some(&k_race) {
        v.push(k_race);
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub operator: GrowthOperator,
    pub trace: LossTrace,
    /// Training batch digest of every race step, in order.
    pub digests: Vec<u64>,
    pub selection_loss: Option<f64>,
    pub failure: Option<String>,
}

impl CandidateResult {
    pub fn is_live(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleBlock {
    pub horizon_step: u64,
    /// Final loss per candidate, in candidate order.
    pub final_losses: Vec<f64>,
    pub l_min: f64,
    pub l_max: f64,
    pub oracle: GrowthOperator,
    pub regret: f64,
    pub relative_regret: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub base_step: u64,
    pub base_layers: usize,
    pub k_race: u64,
    pub cadence: u64,
    pub growth_seed: u64,
    pub smoothed: bool,
    pub selection_step: u64,
    pub candidates: Vec<CandidateResult>,
    pub winner: GrowthOperator,
    pub oracle: Option<OracleBlock>,
}

impl SelectionReport {
    pub fn traces(&self) -> Vec<LossTrace> {
        self.candidates.iter().map(|c| c.trace.clone()).collect()
    }

    pub fn live(&self) -> impl Iterator<Item = &CandidateResult> {
        self.candidates.iter().filter(|c| c.is_live())
    }

    pub fn winner_result(&self) -> Option<&CandidateResult> {
        self.candidates.iter().find(|c| c.operator == self.winner)
    }

    /// Trace matrix over live candidates, with final losses at `horizon`.
    pub fn trace_matrix(&self, horizon: u64) -> Result<TraceMatrix> {
        let traces: Vec<LossTrace> = self.live().map(|c| c.trace.clone()).collect();
        TraceMatrix::from_traces(&traces, horizon)
    }

    /// Attach final losses at `horizon` (a measured step of every live trace)
    /// and the regret of the chosen operator.
    pub fn with_oracle(mut self, horizon: u64) -> Result<Self> {
        let tm = self.trace_matrix(horizon)?;
        let live: Vec<&CandidateResult> = self.live().collect();
        let chosen = live.iter().position(|c| c.operator == self.winner).expect("winner is live");
        let star = tm.oracle();
        let inputs = RegretInputs::new(tm.final_losses.clone(), vec![chosen])?;
        let rel = match relative_regret(&inputs, 0) {
            Ok(v) => Some(v),
            Err(Error::DegenerateRange(_)) => None,
            Err(e) => return Err(e),
        };
        self.oracle = Some(OracleBlock {
            horizon_step: horizon,
            final_losses: tm.final_losses.clone(),
            l_min: inputs.l_min,
            l_max: inputs.l_max,
            oracle: live[star].operator,
            regret: regret(&inputs, 0)?,
            relative_regret: rel,
        });
        Ok(self)
    }
}

fn selection_loss(trace: &LossTrace, smoothed: bool) -> Result<f64> {
    let t = if smoothed { smooth(trace, SMOOTH_WINDOW)? } else { trace.clone() };
    t.last().map(|p| p.1).ok_or_else(|| Error::data(format!("candidate {} has an empty trace", trace.operator)))
}

/// Lower loss, then lower index, smaller block, Duplicate first.
fn rank(a: (f64, &GrowthOperator), b: (f64, &GrowthOperator)) -> Ordering {
    a.0.total_cmp(&b.0).then_with(|| a.1.order_key().cmp(&b.1.order_key()))
}

/// Index of the winning candidate among the live ones.
pub fn select(candidates: &[CandidateResult], smoothed: bool) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate().filter(|(_, c)| c.is_live()) {
        let loss = selection_loss(&c.trace, smoothed)?;
        best = match best {
            Some((j, l)) if rank((l, &candidates[j].operator), (loss, &c.operator)) != Ordering::Greater => Some((j, l)),
            _ => Some((i, loss)),
        };
    }
    best.map(|b| b.0).ok_or_else(|| Error::Race("every candidate diverged; nothing to select".into()))
}

/// Re-run selection from a report's stored traces.
pub fn reselect(report: &SelectionReport) -> Result<GrowthOperator> {
    Ok(report.candidates[select(&report.candidates, report.smoothed)?].operator)
}

/// Operator that a selection at measured step `step` would pick.
pub fn select_at(report: &SelectionReport, step: u64) -> Result<GrowthOperator> {
    let mut best: Option<(f64, GrowthOperator)> = None;
    for c in report.live() {
        let loss = c
            .trace
            .loss_at(step)
            .ok_or_else(|| Error::data(format!("candidate {} has no measurement at step {step}", c.operator)))?;
        if best.as_ref().is_none_or(|(l, op)| rank((loss, &c.operator), (*l, op)) == Ordering::Less) {
            best = Some((loss, c.operator));
        }
    }
    best.map(|b| b.1).ok_or_else(|| Error::Race("no live candidates".into()))
}

/// Hard check that every candidate saw the same batches.
pub fn audit_data_identity(candidates: &[CandidateResult]) -> Result<()> {
    let Some(longest) = candidates.iter().max_by_key(|c| c.digests.len()) else {
        return Ok(());
    };
    for c in candidates {
        if let Some(step) = c.digests.iter().zip(&longest.digests).position(|(a, b)| a != b) {
            return Err(Error::Race(format!(
                "data identity violated: candidates {} and {} saw different batches at race step {step}",
                c.operator, longest.operator
            )));
        }
    }
    Ok(())
}

/// A loss as it is measured. Training losses are reported at the step of
/// the batch; validation losses at the step of the measured state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation<'a> {
    pub candidate: &'a str,
    pub split: Split,
    pub step: u64,
    pub loss: f64,
}

pub type Observer<'o> = dyn FnMut(Observation<'_>) + 'o;

struct Run {
    trace: Vec<(u64, f64)>,
    digests: Vec<u64>,
    failure: Option<String>,
}

/// Train `steps` steps from `ckpt`, measuring validation loss at the start,
/// every `cadence` steps counted from `origin`, and at the end. Divergence
/// ends the run.
#[allow(clippy::too_many_arguments)]
fn run_measured(
    trainer: &Trainer,
    ckpt: &mut Checkpoint,
    origin: u64,
    steps: u64,
    cadence: u64,
    mut trace: Vec<(u64, f64)>,
    candidate: &str,
    obs: &mut Observer,
) -> Result<Run> {
    let end = ckpt.step + steps;
    let mut digests = Vec::with_capacity(steps as usize);
    let measure = |ckpt: &Checkpoint, trace: &mut Vec<(u64, f64)>, obs: &mut Observer| -> Result<Option<String>> {
        let loss = trainer.evaluate(ckpt)?;
        if !loss.is_finite() {
            return Ok(Some(format!("validation loss {loss} at step {}", ckpt.step)));
        }
        obs(Observation { candidate, split: Split::Validation, step: ckpt.step, loss });
        trace.push((ckpt.step, loss));
        Ok(None)
    };
    if trace.last().is_none_or(|p| p.0 < ckpt.step) {
        if let Some(f) = measure(ckpt, &mut trace, obs)? {
            return Ok(Run { trace, digests, failure: Some(f) });
        }
    }
    while ckpt.step < end {
        let step = ckpt.step;
        let out = trainer.step(ckpt)?;
        digests.push(out.batch_digest);
        if !out.applied {
            return Ok(Run { trace, digests, failure: Some(format!("training loss {} at step {step}", out.loss)) });
        }
        obs(Observation { candidate, split: Split::Train, step, loss: out.loss });
        if (ckpt.step - origin) % cadence == 0 || ckpt.step == end {
            if let Some(f) = measure(ckpt, &mut trace, obs)? {
                return Ok(Run { trace, digests, failure: Some(f) });
            }
        }
    }
    Ok(Run { trace, digests, failure: None })
}

/// Result of a race: the report and the winner's post-race state.
#[derive(Clone, Debug)]
pub struct RaceOutcome {
    pub report: SelectionReport,
    pub winner: Checkpoint,
}

/// Grow every operator of the space from `base`, train each `k_race` steps
/// on the shared batch schedule and select by validation loss.
pub fn race(base: &Checkpoint, cfg: &RaceConfig, trainer: &Trainer) -> Result<RaceOutcome> {
    race_observed(base, cfg, trainer, &mut |_| {})
}

/// [`race`], reporting every loss to `obs` with the operator as candidate id.
pub fn race_observed(base: &Checkpoint, cfg: &RaceConfig, trainer: &Trainer, obs: &mut Observer) -> Result<RaceOutcome> {
    cfg.validate()?;
    base.validate()?;
    let ops = enumerate(&cfg.space, base.num_layers())?;
    let smoothed = cfg.cadence == 1;
    let mut candidates = Vec::with_capacity(ops.len());
    let mut states = Vec::with_capacity(ops.len());
    for op in ops {
        let id = op.to_string();
        let mut ckpt = apply_growth(base, &op, cfg.growth_seed)?;
        let run = run_measured(trainer, &mut ckpt, base.step, cfg.k_race, cfg.cadence, Vec::new(), &id, obs)?;
        let trace = LossTrace::new(id, run.trace)?;
        let selection_loss = match run.failure {
            None => Some(selection_loss(&trace, smoothed)?),
            Some(_) => None,
        };
        candidates.push(CandidateResult { operator: op, trace, digests: run.digests, selection_loss, failure: run.failure });
        states.push(ckpt);
    }
    audit_data_identity(&candidates)?;
    let w = select(&candidates, smoothed)?;
    let report = SelectionReport {
        base_step: base.step,
        base_layers: base.num_layers(),
        k_race: cfg.k_race,
        cadence: cfg.cadence,
        growth_seed: cfg.growth_seed,
        smoothed,
        selection_step: base.step + cfg.k_race,
        winner: candidates[w].operator,
        candidates,
        oracle: None,
    };
    Ok(RaceOutcome { report, winner: states.swap_remove(w) })
}

/// Resume the winner's post-race state for `budget` more steps, extending
/// its race trace on the same measurement grid.
pub fn continue_winner(
    report: &SelectionReport,
    winner: Checkpoint,
    trainer: &Trainer,
    budget: u64,
) -> Result<(Checkpoint, LossTrace)> {
    continue_winner_observed(report, winner, trainer, budget, &mut |_| {})
}

pub fn continue_winner_observed(
    report: &SelectionReport,
    winner: Checkpoint,
    trainer: &Trainer,
    budget: u64,
    obs: &mut Observer,
) -> Result<(Checkpoint, LossTrace)> {
    let expected = report.base_step + report.k_race;
    let last_op = winner.provenance.last().map(|p| p.operator.as_str());
    if winner.step != expected || last_op != Some(report.winner.to_string().as_str()) {
        return Err(Error::Checkpoint(format!(
            "checkpoint (step {}, last operator {:?}) is not the post-race state of winner {} (step {expected})",
            winner.step, last_op, report.winner
        )));
    }
    let id = report.winner.to_string();
    let prior = report.winner_result().map(|c| c.trace.points.clone()).unwrap_or_default();
    let mut ckpt = winner;
    let run = run_measured(trainer, &mut ckpt, report.base_step, budget, report.cadence, prior, &id, obs)?;
    if let Some(f) = run.failure {
        return Err(Error::Race(format!("winner {} diverged while continuing: {f}", report.winner)));
    }
    Ok((ckpt, LossTrace::new(id, run.trace)?))
}

/// One stage of a stacking schedule. The first stage is the random-init
/// bootstrap and must have `grow = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub budget: u64,
    #[serde(default)]
    pub grow: usize,
    /// Start indices to race; all feasible ones when absent.
    #[serde(default)]
    pub indices: Option<Vec<usize>>,
    /// Block sizes to race; all divisors of `grow` when absent.
    #[serde(default)]
    pub block_sizes: Option<Vec<usize>>,
    #[serde(default = "duplicate_only")]
    pub schemes: Vec<InitScheme>,
}

fn duplicate_only() -> Vec<InitScheme> {
    vec![InitScheme::Duplicate]
}

impl StageSpec {
    pub fn space(&self, layers: usize) -> DesignSpace {
        DesignSpace {
            indices: self.indices.clone().unwrap_or_else(|| (0..=layers.saturating_sub(self.grow)).collect()),
            block_sizes: self.block_sizes.clone().unwrap_or_else(|| divisors(self.grow)),
            schemes: self.schemes.clone(),
            grow: self.grow,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackingSchedule {
    /// Model at the bootstrap stage; `num_layers` is the initial depth.
    pub model: ModelConfig,
    pub stages: Vec<StageSpec>,
    pub k_race: u64,
    pub cadence: u64,
}

impl StackingSchedule {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let first = self.stages.first().ok_or_else(|| Error::config("stacking schedule needs at least one stage"))?;
        if first.grow != 0 {
            return Err(Error::config(format!(
                "stage 1 is the random-init bootstrap and must have grow = 0, got {}",
                first.grow
            )));
        }
        if self.cadence < 1 {
            return Err(Error::config("stacking cadence must be >= 1"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.budget < 1 {
                return Err(Error::config(format!("stage {} budget must be >= 1", i + 1)));
            }
            if i > 0 && s.grow < 1 {
                return Err(Error::config(format!("stage {} grow amount must be >= 1", i + 1)));
            }
        }
        Ok(())
    }

    /// Depth after each stage.
    pub fn depths(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(self.model.num_layers, |d, s| {
                *d += s.grow;
                Some(*d)
            })
            .collect()
    }

    pub fn final_depth(&self) -> usize {
        self.model.num_layers + self.stages.iter().map(|s| s.grow).sum::<usize>()
    }

    fn stage_seed(seed: u64, stage: usize) -> u64 {
        mix_key(&[seed, str_key("stage"), stage as u64])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    /// 1-based stage number.
    pub stage: usize,
    pub layers: usize,
    pub operator: Option<GrowthOperator>,
    pub candidates: usize,
    pub end_step: u64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct StackOutcome {
    pub checkpoint: Checkpoint,
    pub reports: Vec<SelectionReport>,
    pub stages: Vec<StageSummary>,
    /// Extra candidate-steps spent racing: sum over racing stages of
    /// candidates times `k_race`.
    pub overhead_steps: u64,
    pub final_val_loss: f64,
}

/// Prefix candidate ids with the stage number.
fn staged<'a>(stage: usize, obs: &'a mut Observer) -> Box<Observer<'a>> {
    Box::new(move |o: Observation<'_>| {
        let id = if o.candidate.is_empty() { format!("stage{stage}") } else { format!("stage{stage}/{}", o.candidate) };
        obs(Observation { candidate: &id, ..o })
    })
}

/// Train a single model for a whole stage on the measurement grid.
fn train_stage(
    trainer: &Trainer,
    ckpt: &mut Checkpoint,
    steps: u64,
    cadence: u64,
    candidate: &str,
    obs: &mut Observer,
) -> Result<f64> {
    let origin = ckpt.step;
    let run = run_measured(trainer, ckpt, origin, steps, cadence, Vec::new(), candidate, obs)?;
    if let Some(f) = run.failure {
        return Err(Error::Race(format!("stage training diverged: {f}")));
    }
    Ok(run.trace.last().expect("end of stage is measured").1)
}

fn bootstrap(
    schedule: &StackingSchedule,
    trainer: &Trainer,
    hparams: &AdamWConfig,
    seed: u64,
    obs: &mut Observer,
) -> Result<(Checkpoint, StageSummary)> {
    schedule.validate()?;
    let mut ckpt = Checkpoint::init(&schedule.model, seed, hparams.clone(), trainer.data_seed())?;
    let val_loss = train_stage(trainer, &mut ckpt, schedule.stages[0].budget, schedule.cadence, "", &mut staged(1, obs))?;
    let summary =
        StageSummary { stage: 1, layers: ckpt.num_layers(), operator: None, candidates: 0, end_step: ckpt.step, val_loss };
    Ok((ckpt, summary))
}

/// Each later stage races its design space for `k_race` steps, then the
/// winner trains the rest of the stage budget.
pub fn adaptive_stack(schedule: &StackingSchedule, trainer: &Trainer, hparams: &AdamWConfig, seed: u64) -> Result<StackOutcome> {
    adaptive_stack_observed(schedule, trainer, hparams, seed, &mut |_| {})
}

/// [`adaptive_stack`], reporting losses with candidate ids `stage{n}` and
/// `stage{n}/{operator}`.
pub fn adaptive_stack_observed(
    schedule: &StackingSchedule,
    trainer: &Trainer,
    hparams: &AdamWConfig,
    seed: u64,
    obs: &mut Observer,
) -> Result<StackOutcome> {
    for (i, s) in schedule.stages.iter().enumerate().skip(1) {
        if s.budget < schedule.k_race {
            return Err(Error::config(format!(
                "stage {} budget {} is shorter than the race length {}",
                i + 1,
                s.budget,
                schedule.k_race
            )));
        }
    }
    let (mut ckpt, first) = bootstrap(schedule, trainer, hparams, seed, obs)?;
    let mut stages = vec![first];
    let mut reports = Vec::new();
    let mut overhead = 0;
    for (i, s) in schedule.stages.iter().enumerate().skip(1) {
        let cfg = RaceConfig {
            space: s.space(ckpt.num_layers()),
            k_race: schedule.k_race,
            cadence: schedule.cadence,
            growth_seed: StackingSchedule::stage_seed(seed, i + 1),
            continue_budget: s.budget - schedule.k_race,
        };
        let mut stage_obs = staged(i + 1, obs);
        let out = race_observed(&ckpt, &cfg, trainer, &mut stage_obs)?;
        overhead += out.report.candidates.len() as u64 * schedule.k_race;
        let (next, trace) = continue_winner_observed(&out.report, out.winner, trainer, cfg.continue_budget, &mut stage_obs)?;
        ckpt = next;
        stages.push(StageSummary {
            stage: i + 1,
            layers: ckpt.num_layers(),
            operator: Some(out.report.winner),
            candidates: out.report.candidates.len(),
            end_step: ckpt.step,
            val_loss: trace.last().expect("measured").1,
        });
        reports.push(out.report);
    }
    let final_val_loss = stages.last().expect("bootstrap stage").val_loss;
    Ok(StackOutcome { checkpoint: ckpt, reports, stages, overhead_steps: overhead, final_val_loss })
}

/// Baseline: every later stage duplicates the final `block` layers on top.
pub fn fixed_stack(
    schedule: &StackingSchedule,
    trainer: &Trainer,
    hparams: &AdamWConfig,
    seed: u64,
    block: usize,
) -> Result<StackOutcome> {
    fixed_stack_observed(schedule, trainer, hparams, seed, block, &mut |_| {})
}

pub fn fixed_stack_observed(
    schedule: &StackingSchedule,
    trainer: &Trainer,
    hparams: &AdamWConfig,
    seed: u64,
    block: usize,
    obs: &mut Observer,
) -> Result<StackOutcome> {
    if let Some((i, s)) = schedule.stages.iter().enumerate().skip(1).find(|(_, s)| s.grow != block) {
        return Err(Error::config(format!(
            "fixed stacking with b={block} needs every stage to grow by {block}, stage {} grows by {}",
            i + 1,
            s.grow
        )));
    }
    let (mut ckpt, first) = bootstrap(schedule, trainer, hparams, seed, obs)?;
    let mut stages = vec![first];
    for (i, s) in schedule.stages.iter().enumerate().skip(1) {
        let op = post_stack_operator(block, ckpt.num_layers())?;
        ckpt = apply_growth(&ckpt, &op, StackingSchedule::stage_seed(seed, i + 1))?;
        let val_loss = train_stage(trainer, &mut ckpt, s.budget, schedule.cadence, &op.to_string(), &mut staged(i + 1, obs))?;
        stages.push(StageSummary {
            stage: i + 1,
            layers: ckpt.num_layers(),
            operator: Some(op),
            candidates: 1,
            end_step: ckpt.step,
            val_loss,
        });
    }
    let final_val_loss = stages.last().expect("bootstrap stage").val_loss;
    Ok(StackOutcome { checkpoint: ckpt, reports: Vec::new(), stages, overhead_steps: 0, final_val_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn op(s: &str) -> GrowthOperator {
        s.parse().unwrap()
    }

    fn cand(o: &str, losses: &[f64]) -> CandidateResult {
        let points = losses.iter().enumerate().map(|(i, l)| (i as u64 * 10, *l)).collect();
        CandidateResult {
            operator: op(o),
            trace: LossTrace::new(o, points).unwrap(),
            digests: vec![1, 2, 3],
            selection_loss: losses.last().copied(),
            failure: None,
        }
    }

    #[test]
    fn offsets_include_ends() {
        assert_eq!(measurement_offsets(0, 5), vec![0]);
        assert_eq!(measurement_offsets(10, 5), vec![0, 5, 10]);
        assert_eq!(measurement_offsets(12, 5), vec![0, 5, 10, 12]);
        assert_eq!(measurement_offsets(3, 10), vec![0, 3]);
    }

    #[test]
    fn planted_ties_follow_order_key() {
        // Equal final losses: the lower index wins, then the smaller block,
        // then Duplicate.
        let c = vec![
            cand("i2-b1-dup-k2", &[3.0, 1.0]),
            cand("i0-b2-rand-k2", &[2.0, 1.0]),
            cand("i0-b2-dup-k2", &[1.5, 1.0]),
            cand("i0-b1-rand-k2", &[4.0, 1.5]),
        ];
        assert_eq!(c[select(&c, false).unwrap()].operator, op("i0-b2-dup-k2"));
        let c2 = vec![cand("i0-b2-rand-k2", &[2.0, 1.0]), cand("i0-b1-rand-k2", &[4.0, 1.0])];
        assert_eq!(c2[select(&c2, false).unwrap()].operator, op("i0-b1-rand-k2"));
        let c3 = vec![cand("i1-b1-dup-k2", &[2.0, 0.9]), cand("i0-b1-dup-k2", &[1.0, 1.0])];
        assert_eq!(c3[select(&c3, false).unwrap()].operator, op("i1-b1-dup-k2"));
    }

    #[test]
    fn failed_candidates_are_excluded() {
        let mut c = vec![cand("i0-b1-dup-k1", &[1.0, 0.5]), cand("i1-b1-dup-k1", &[1.0, 0.7])];
        c[0].failure = Some("diverged".into());
        assert_eq!(select(&c, false).unwrap(), 1);
        c[1].failure = Some("diverged".into());
        assert!(matches!(select(&c, false), Err(Error::Race(_))));
    }

    #[test]
    fn smoothing_changes_selection_only_when_enabled() {
        // Candidate a ends on a lucky dip; b is lower on average.
        let a: Vec<f64> = (0..20).map(|i| if i == 19 { 0.5 } else { 2.0 }).collect();
        let b = vec![1.0; 20];
        let c = vec![cand("i0-b1-dup-k1", &a), cand("i1-b1-dup-k1", &b)];
        assert_eq!(select(&c, false).unwrap(), 0);
        assert_eq!(select(&c, true).unwrap(), 1);
    }

    #[test]
    fn audit_catches_mismatch() {
        let mut c = vec![cand("i0-b1-dup-k1", &[1.0]), cand("i1-b1-dup-k1", &[1.0])];
        audit_data_identity(&c).unwrap();
        c[1].digests[2] = 9;
        assert!(matches!(audit_data_identity(&c), Err(Error::Race(_))));
        // A prefix (diverged candidate) is consistent.
        c[1].digests.truncate(2);
        audit_data_identity(&c).unwrap();
    }

    #[test]
    fn schedule_depths_and_validation() {
        let model = ModelConfig { num_layers: 4, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 11, max_seq_len: 8 };
        let stage = |grow| StageSpec { budget: 10, grow, indices: None, block_sizes: None, schemes: duplicate_only() };
        let mut s = StackingSchedule { model, stages: vec![stage(0)], k_race: 2, cadence: 1 };
        s.stages.extend((0..5).map(|_| stage(4)));
        s.validate().unwrap();
        assert_eq!(s.final_depth(), 24);
        assert_eq!(s.depths(), vec![4, 8, 12, 16, 20, 24]);
        let mut bad = s.clone();
        bad.stages[0].grow = 4;
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let mut bad = s.clone();
        bad.stages[2].budget = 0;
        assert!(bad.validate().is_err());
        let sp = s.stages[1].space(8);
        assert_eq!(sp.indices, vec![0, 1, 2, 3, 4]);
        assert_eq!(sp.block_sizes, vec![1, 2, 4]);
    }
}

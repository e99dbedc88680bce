use lagrow::analysis::TraceMatrix;
use lagrow::data::{make_synthetic_corpus, Corpus, SyntheticKind, SYNTHETIC_VOCAB};
use lagrow::growth::{apply_growth, DesignSpace, GrowthOperator, InitScheme};
use lagrow::nn::ModelConfig;
use lagrow::optim::AdamWConfig;
use lagrow::race::{
    adaptive_stack, continue_winner, fixed_stack, race, reselect, select_at, RaceConfig, StackingSchedule, StageSpec,
};
use lagrow::train::{DataConfig, Trainer};
use lagrow::{Checkpoint, Error};

fn corpus() -> Corpus {
    make_synthetic_corpus(SyntheticKind::MarkovBigram, 20_000, 2).unwrap()
}

fn data() -> DataConfig {
    DataConfig { batch_size: 4, seq_len: 12, val_batches: 2, val_batch_size: 4 }
}

fn model(layers: usize) -> ModelConfig {
    ModelConfig { num_layers: layers, d_model: 16, n_heads: 2, d_ff: 32, vocab_size: SYNTHETIC_VOCAB, max_seq_len: 12 }
}

fn base(trainer: &Trainer, layers: usize, steps: u64) -> Checkpoint {
    let mut ck = Checkpoint::init(&model(layers), 3, AdamWConfig { warmup_steps: 10, ..Default::default() }, trainer.data_seed()).unwrap();
    trainer.train(&mut ck, steps).unwrap();
    ck
}

fn race_cfg(layers: usize, grow: usize, k_race: u64, cadence: u64) -> RaceConfig {
    RaceConfig {
        space: DesignSpace::full(layers, grow, &[InitScheme::Duplicate, InitScheme::Random]),
        k_race,
        cadence,
        growth_seed: 17,
        continue_budget: 0,
    }
}

#[test]
fn race_records_traces_and_audits_data() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 20);
    let out = race(&b, &race_cfg(2, 2, 6, 2), &tr).unwrap();
    let r = &out.report;
    // L=2, k=2: index 0 only, blocks {1,2}, both schemes.
    assert_eq!(r.candidates.len(), 2 * 2);
    for cand in &r.candidates {
        assert_eq!(cand.trace.steps(), vec![20, 22, 24, 26]);
        assert_eq!(cand.digests, r.candidates[0].digests);
        assert_eq!(cand.digests.len(), 6);
    }
    assert_eq!(out.winner.step, 26);
    assert_eq!(out.winner.num_layers(), 4);
    assert_eq!(reselect(r).unwrap(), r.winner);
    assert_eq!(select_at(r, 26).unwrap(), r.winner);
    let json = serde_json_roundtrip(r);
    assert_eq!(reselect(&json).unwrap(), r.winner);
}

fn serde_json_roundtrip<T: serde::Serialize + serde::de::DeserializeOwned>(x: &T) -> T {
    serde_json::from_str(&serde_json::to_string(x).unwrap()).unwrap()
}

#[test]
fn lag_at_zero_picks_best_initial_loss() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 20);
    let cfg = race_cfg(2, 2, 0, 1);
    let out = race(&b, &cfg, &tr).unwrap();
    let mut best: Option<(f64, GrowthOperator)> = None;
    for cand in &out.report.candidates {
        let grown = apply_growth(&b, &cand.operator, cfg.growth_seed).unwrap();
        let l = tr.evaluate(&grown).unwrap();
        assert_eq!(cand.trace.points, vec![(20, l)]);
        if best.is_none_or(|(bl, _)| l < bl) {
            best = Some((l, cand.operator));
        }
    }
    assert_eq!(out.report.winner, best.unwrap().1);
    assert_eq!(out.winner.step, 20);
}

#[test]
fn singleton_space_wins_by_default() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 5);
    let mut cfg = race_cfg(2, 1, 3, 1);
    cfg.space = DesignSpace { indices: vec![1], block_sizes: vec![1], schemes: vec![InitScheme::Random], grow: 1 };
    let out = race(&b, &cfg, &tr).unwrap();
    assert_eq!(out.report.candidates.len(), 1);
    assert_eq!(out.report.winner.to_string(), "i1-b1-rand-k1");
    assert!(out.report.smoothed);
}

#[test]
fn empty_space_is_config_error() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 0);
    let mut cfg = race_cfg(2, 2, 1, 1);
    cfg.space.indices = vec![5];
    assert!(matches!(race(&b, &cfg, &tr), Err(Error::Config(_))));
}

#[test]
fn continue_is_identity_at_zero_and_counts_steps() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 10);
    let out = race(&b, &race_cfg(2, 1, 4, 2), &tr).unwrap();
    let (same, trace0) = continue_winner(&out.report, out.winner.clone(), &tr, 0).unwrap();
    assert_eq!(same.digest(), out.winner.digest());
    assert_eq!(trace0, out.report.winner_result().unwrap().trace);
    let (ck, trace) = continue_winner(&out.report, out.winner.clone(), &tr, 7).unwrap();
    assert_eq!(ck.step, 10 + 4 + 7);
    assert_eq!(trace.steps(), vec![10, 12, 14, 16, 18, 20, 21]);
    // Some other candidate's state is refused.
    let stranger = apply_growth(&b, &"i0-b1-rand-k1".parse().unwrap(), 1).unwrap();
    if out.report.winner.to_string() != "i0-b1-rand-k1" {
        assert!(matches!(continue_winner(&out.report, stranger, &tr, 1), Err(Error::Checkpoint(_))));
    }
}

#[test]
fn race_then_continue_equals_uninterrupted() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 15);
    let cfg = race_cfg(2, 2, 5, 5);
    let out = race(&b, &cfg, &tr).unwrap();
    let (resumed, _) = continue_winner(&out.report, out.winner, &tr, 8).unwrap();
    let mut straight = apply_growth(&b, &out.report.winner, cfg.growth_seed).unwrap();
    tr.train(&mut straight, 13).unwrap();
    assert_eq!(resumed.digest(), straight.digest());
    assert_eq!(resumed, straight);
}

#[test]
fn races_are_deterministic() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 5);
    let a = race(&b, &race_cfg(2, 1, 3, 1), &tr).unwrap();
    let z = race(&b, &race_cfg(2, 1, 3, 1), &tr).unwrap();
    assert_eq!(a.report, z.report);
    assert_eq!(a.winner.digest(), z.winner.digest());
}

#[test]
fn oracle_block_reports_regret() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let b = base(&tr, 2, 10);
    let out = race(&b, &race_cfg(2, 2, 4, 2), &tr).unwrap();
    let horizon = out.report.selection_step;
    let rep = out.report.clone().with_oracle(horizon).unwrap();
    let o = rep.oracle.as_ref().unwrap();
    // Selection at the horizon is the oracle itself.
    assert_eq!(o.regret, 0.0);
    assert_eq!(o.oracle, rep.winner);
    let tm: TraceMatrix = rep.trace_matrix(horizon).unwrap();
    assert_eq!(tm.operators.len(), 4);
}

fn schedule(stages: usize, grow: usize, budget: u64, k_race: u64, space: Option<(Vec<usize>, Vec<usize>)>) -> StackingSchedule {
    let mut st = vec![StageSpec { budget, grow: 0, indices: None, block_sizes: None, schemes: vec![InitScheme::Duplicate] }];
    for _ in 1..stages {
        st.push(StageSpec {
            budget,
            grow,
            indices: space.as_ref().map(|s| s.0.clone()),
            block_sizes: space.as_ref().map(|s| s.1.clone()),
            schemes: vec![InitScheme::Duplicate],
        });
    }
    StackingSchedule { model: model(2), stages: st, k_race, cadence: 2 }
}

#[test]
fn adaptive_and_fixed_stacking_bookkeeping() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let hp = AdamWConfig { warmup_steps: 5, ..Default::default() };
    let s = schedule(3, 2, 12, 4, Some((vec![0], vec![1, 2])));
    let ad = adaptive_stack(&s, &tr, &hp, 1).unwrap();
    assert_eq!(ad.checkpoint.num_layers(), 6);
    assert_eq!(ad.reports.len(), 2);
    assert_eq!(ad.overhead_steps, 2 * 2 * 4);
    assert_eq!(ad.checkpoint.step, 36);
    assert_eq!(ad.stages.iter().map(|x| x.layers).collect::<Vec<_>>(), s.depths());
    let fx = fixed_stack(&s, &tr, &hp, 1, 2).unwrap();
    assert_eq!(fx.checkpoint.num_layers(), 6);
    assert_eq!(fx.checkpoint.step, 36);
    for st in &fx.stages[1..] {
        let op = st.operator.unwrap();
        assert_eq!((op.start + op.block, op.scheme), (st.layers - 2, InitScheme::Duplicate));
    }
    assert!(ad.final_val_loss.is_finite() && fx.final_val_loss.is_finite());
    assert!(matches!(fixed_stack(&s, &tr, &hp, 1, 1), Err(Error::Config(_))));
}

#[test]
fn singleton_adaptive_reduces_to_fixed() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let hp = AdamWConfig { warmup_steps: 5, ..Default::default() };
    // The only operator in each stage is "duplicate the last 2 on top".
    let mut s = schedule(3, 2, 8, 3, None);
    s.stages[1].indices = Some(vec![0]);
    s.stages[1].block_sizes = Some(vec![2]);
    s.stages[2].indices = Some(vec![2]);
    s.stages[2].block_sizes = Some(vec![2]);
    let ad = adaptive_stack(&s, &tr, &hp, 4).unwrap();
    let fx = fixed_stack(&s, &tr, &hp, 4, 2).unwrap();
    assert!(ad.reports.iter().all(|r| r.candidates.len() == 1));
    assert_eq!(ad.checkpoint.digest(), fx.checkpoint.digest());
    assert_eq!(ad.overhead_steps, 2 * 3);
}

#[test]
fn overhead_counts_every_candidate_step() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let hp = AdamWConfig { warmup_steps: 5, ..Default::default() };
    // Index 1 is infeasible at 2 layers, so the stages race 2, 4, 4 candidates.
    let s = schedule(4, 2, 4, 3, Some((vec![0, 1], vec![1, 2])));
    let ad = adaptive_stack(&s, &tr, &hp, 2).unwrap();
    assert_eq!(ad.reports.iter().map(|r| r.candidates.len()).collect::<Vec<_>>(), vec![2, 4, 4]);
    assert_eq!(ad.overhead_steps, (2 + 4 + 4) * 3);
    assert_eq!(ad.checkpoint.num_layers(), 8);
}

#[test]
fn six_stages_of_four_from_four_layers() {
    let mut s = schedule(6, 4, 10, 1, None);
    s.model.num_layers = 4;
    s.validate().unwrap();
    assert_eq!(s.final_depth(), 24);
}

#[test]
fn stage_budget_shorter_than_race_rejected() {
    let c = corpus();
    let tr = Trainer::new(&c, &data(), 9).unwrap();
    let s = schedule(2, 2, 3, 5, None);
    assert!(matches!(adaptive_stack(&s, &tr, &AdamWConfig::default(), 0), Err(Error::Config(_))));
}

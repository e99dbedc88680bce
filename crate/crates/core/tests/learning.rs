use lagrow::data::{make_synthetic_corpus, BigramChain, SyntheticKind, BIGRAM_FANOUT, SYNTHETIC_VOCAB};
use lagrow::nn::ModelConfig;
use lagrow::optim::AdamWConfig;
use lagrow::train::{DataConfig, Trainer};
use lagrow::Checkpoint;

#[test]
fn bigram_model_approaches_chain_entropy() {
    let seed = 4;
    let corpus = make_synthetic_corpus(SyntheticKind::MarkovBigram, 100_000, seed).unwrap();
    let h = BigramChain::generate(SYNTHETIC_VOCAB, BIGRAM_FANOUT, seed).entropy_rate();
    let cfg = ModelConfig { num_layers: 1, d_model: 32, n_heads: 2, d_ff: 64, vocab_size: SYNTHETIC_VOCAB, max_seq_len: 16 };
    let data = DataConfig { batch_size: 16, seq_len: 16, val_batches: 16, val_batch_size: 8 };
    let tr = Trainer::new(&corpus, &data, 1).unwrap();
    let hp = AdamWConfig { peak_lr: 3e-3, warmup_steps: 50, ..Default::default() };
    let mut ck = Checkpoint::init(&cfg, 2, hp, 1).unwrap();
    let start = tr.evaluate(&ck).unwrap();
    tr.train(&mut ck, 1500).unwrap();
    let end = tr.evaluate(&ck).unwrap();
    println!("entropy rate {h:.4}, validation loss {start:.4} -> {end:.4}");
    assert!(end < start);
    assert!((end - h).abs() < 0.3, "validation loss {end} vs entropy rate {h}");
}

use lagrow::nn::{init_model, ModelConfig, ParamBlocks};
use lagrow::optim::{adamw_step, AdamWConfig, OptState};
use lagrow::rng::keyed_rng;
use proptest::prelude::*;
use rand::Rng;

fn blocks() -> ParamBlocks<f64> {
    let cfg = ModelConfig { num_layers: 1, d_model: 4, n_heads: 1, d_ff: 4, vocab_size: 3, max_seq_len: 2 };
    init_model(&cfg, 0).unwrap().cast()
}

/// Least squares on the first `DIM` flat coordinates of a parameter set.
const DIM: usize = 6;

struct Regression {
    xs: Vec<[f64; DIM]>,
    ys: Vec<f64>,
}

impl Regression {
    fn new(seed: u64) -> Self {
        let mut rng = keyed_rng(&[seed, 77]);
        let w: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xs: Vec<[f64; DIM]> = (0..64).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let ys = xs.iter().map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.5).collect();
        Regression { xs, ys }
    }

    fn loss_grad(&self, flat: &[f64]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; flat.len()];
        let mut loss = 0.0;
        let n = self.xs.len() as f64;
        for (x, y) in self.xs.iter().zip(&self.ys) {
            let r = x.iter().zip(flat).map(|(a, b)| a * b).sum::<f64>() + flat[DIM] - y;
            loss += r * r / n;
            for j in 0..DIM {
                grad[j] += 2.0 * r * x[j] / n;
            }
            grad[DIM] += 2.0 * r / n;
        }
        (loss, grad)
    }
}

fn regression_run(seed: u64, steps: usize) -> (f64, f64) {
    let mut p = blocks();
    let mut state = OptState::new(&p, AdamWConfig { peak_lr: 0.02, warmup_steps: 10, ..Default::default() });
    let task = Regression::new(seed);
    let first = task.loss_grad(&p.flatten()).0;
    for _ in 0..steps {
        let (_, g) = task.loss_grad(&p.flatten());
        let mut grads = p.zeros_like();
        grads.assign_flat(&g).unwrap();
        adamw_step(&mut p, &grads, &mut state).unwrap();
    }
    (first, task.loss_grad(&p.flatten()).0)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn linear_regression_loss_decreases() {
    let runs: Vec<(f64, f64)> = (0..5).map(|s| regression_run(s, 200)).collect();
    let start = median(runs.iter().map(|r| r.0).collect());
    let end = median(runs.iter().map(|r| r.1).collect());
    assert!(end < 0.1 * start, "median loss {start} -> {end}");
}

#[test]
fn steps_are_bit_deterministic() {
    let p0 = blocks();
    let mut g = p0.zeros_like();
    let flat: Vec<f64> = (0..p0.num_params()).map(|i| ((i * 37) % 11) as f64 / 7.0 - 0.6).collect();
    g.assign_flat(&flat).unwrap();
    let run = || {
        let mut p = p0.clone();
        let mut s = OptState::new(&p, AdamWConfig::default());
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut s).unwrap();
        }
        (p, s)
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn schedule_is_monotone_and_flat_after_warmup(peak in 1e-6f64..1.0, warmup in 0u64..500, t in 0u64..2000) {
        let s = AdamWConfig { peak_lr: peak, warmup_steps: warmup, ..Default::default() }.schedule();
        prop_assert!(s.lr(t) <= s.lr(t + 1));
        if t >= warmup {
            prop_assert_eq!(s.lr(t), peak);
        }
    }
}

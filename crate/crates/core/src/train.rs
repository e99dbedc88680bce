//! Training loop pieces shared by pretraining, races and stacking.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{batch_at, validation_set, Corpus, Split, TokenBatch};
use crate::error::{Error, Result};
use crate::nn::{loss_and_grads, mean_loss};
use crate::optim::adamw_step;

/// Batch geometry and the size of the fixed validation set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub batch_size: usize,
    pub seq_len: usize,
    pub val_batches: usize,
    pub val_batch_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { batch_size: 8, seq_len: 32, val_batches: 16, val_batch_size: 8 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 || self.seq_len < 1 || self.val_batches < 1 || self.val_batch_size < 1 {
            return Err(Error::config(format!("data batch_size, seq_len, val_batches, val_batch_size must all be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Training loss of the batch, before the update.
    pub loss: f64,
    pub batch_digest: u64,
    /// False when the loss was non-finite; no update is applied then.
    pub applied: bool,
}

/// A corpus plus a batch schedule. The schedule is a pure function of
/// `(data_seed, step)`, so any number of checkpoints can share a trainer.
pub struct Trainer<'c> {
    corpus: &'c Corpus,
    data: DataConfig,
    data_seed: u64,
    validation: Vec<TokenBatch>,
}

impl<'c> Trainer<'c> {
    pub fn new(corpus: &'c Corpus, data: &DataConfig, data_seed: u64) -> Result<Self> {
        data.validate()?;
        let validation = validation_set(corpus, data_seed, data.val_batches, data.val_batch_size, data.seq_len)?;
        // Fail early rather than on the first step.
        batch_at(corpus, Split::Train, 0, data_seed, data.batch_size, data.seq_len)?;
        Ok(Trainer { corpus, data: data.clone(), data_seed, validation })
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed
    }

    pub fn data_config(&self) -> &DataConfig {
        &self.data
    }

    pub fn validation(&self) -> &[TokenBatch] {
        &self.validation
    }

    pub fn batch(&self, step: u64) -> Result<TokenBatch> {
        batch_at(self.corpus, Split::Train, step, self.data_seed, self.data.batch_size, self.data.seq_len)
    }

    fn check(&self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.data_seed != self.data_seed {
            return Err(Error::config(format!(
                "checkpoint data seed {} differs from trainer data seed {}",
                ckpt.data_seed, self.data_seed
            )));
        }
        if ckpt.config().vocab_size < self.corpus.vocab_size() {
            return Err(Error::config(format!(
                "model vocab_size {} is smaller than corpus vocab {}",
                ckpt.config().vocab_size,
                self.corpus.vocab_size()
            )));
        }
        Ok(())
    }

    /// One optimizer step on the batch for `ckpt.step`.
    pub fn step(&self, ckpt: &mut Checkpoint) -> Result<StepOutcome> {
        self.check(ckpt)?;
        let batch = self.batch(ckpt.step)?;
        let (loss, grads) = loss_and_grads(&ckpt.params, &batch)?;
        let loss = loss as f64;
        let finite = loss.is_finite() && grads.tensors().all(|t| t.all_finite());
        if finite {
            adamw_step(&mut ckpt.params, &grads, &mut ckpt.opt)?;
            ckpt.step += 1;
        }
        Ok(StepOutcome { loss, batch_digest: batch.digest(), applied: finite })
    }

    /// Mean validation loss in nats (f64 accumulation, fixed order).
    pub fn evaluate(&self, ckpt: &Checkpoint) -> Result<f64> {
        self.check(ckpt)?;
        mean_loss(&ckpt.params, &self.validation)
    }

    /// Train `steps` steps. Stops with an error on divergence.
    pub fn train(&self, ckpt: &mut Checkpoint, steps: u64) -> Result<Vec<StepOutcome>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let o = self.step(ckpt)?;
            if !o.applied {
                return Err(Error::Data(format!("training diverged at step {} (loss {})", ckpt.step, o.loss)));
            }
            out.push(o);
        }
        Ok(out)
    }
}

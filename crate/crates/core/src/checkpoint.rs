use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{init_model, ModelConfig, ParamBlocks};
use crate::optim::{AdamWConfig, OptState};

/// One applied growth operator, in application order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub step: u64,
    pub operator: String,
    pub seed: u64,
    pub layers_before: usize,
    pub layers_after: usize,
}

/// Everything needed to resume training bit-exactly: parameters, AdamW
/// moments and counter, the global step and the data-schedule seed.
///
/// The data schedule is counter-based, so `(data_seed, step)` is the whole
/// RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: ParamBlocks<f32>,
    pub opt: OptState<f32>,
    pub step: u64,
    pub data_seed: u64,
    pub provenance: Vec<ProvenanceEntry>,
}

impl Checkpoint {
    pub fn init(config: &ModelConfig, init_seed: u64, hparams: AdamWConfig, data_seed: u64) -> Result<Self> {
        hparams.validate()?;
        let params = init_model(config, init_seed)?;
        let opt = OptState::new(&params, hparams);
        Ok(Checkpoint { params, opt, step: 0, data_seed, provenance: Vec::new() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    pub fn num_layers(&self) -> usize {
        self.params.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if !self.params.same_structure(&self.opt.m) || !self.params.same_structure(&self.opt.v) {
            return Err(Error::Checkpoint("optimizer moments do not mirror the parameter layout".into()));
        }
        Ok(())
    }

    /// SHA-256 over config, counters and every tensor value (little-endian),
    /// hex encoded. Equal digests mean bit-identical training state.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("{:?}", self.params.config).as_bytes());
        h.update(self.step.to_le_bytes());
        h.update(self.opt.t.to_le_bytes());
        h.update(self.data_seed.to_le_bytes());
        for blocks in [&self.params, &self.opt.m, &self.opt.v] {
            for t in blocks.tensors() {
                for x in t.data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

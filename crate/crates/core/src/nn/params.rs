//! Layer-addressable parameter storage.
//!
//! A model is four kinds of block: the embedding block, one block per
//! transformer layer, the final norm and the output head. Layer blocks all
//! carry the same named tensors in the same order, which is what lets growth
//! surgery copy, insert and renumber them freely.

use std::collections::HashSet;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ModelConfig, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{keyed_rng, str_key, truncated_normal};

pub const INIT_STD: f64 = 0.02;

/// Tensor names inside a layer block, in storage order.
pub const LAYER_TENSORS: [&str; 12] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.w_qkv",
    "attn.b_qkv",
    "attn.w_out",
    "attn.b_out",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w_in",
    "mlp.b_in",
    "mlp.w_out",
    "mlp.b_out",
];

pub(crate) mod idx {
    pub const LN1_G: usize = 0;
    pub const LN1_B: usize = 1;
    pub const W_QKV: usize = 2;
    pub const B_QKV: usize = 3;
    pub const W_ATTN_OUT: usize = 4;
    pub const B_ATTN_OUT: usize = 5;
    pub const LN2_G: usize = 6;
    pub const LN2_B: usize = 7;
    pub const W_IN: usize = 8;
    pub const B_IN: usize = 9;
    pub const W_MLP_OUT: usize = 10;
    pub const B_MLP_OUT: usize = 11;

    pub const TOK: usize = 0;
    pub const POS: usize = 1;

    pub const GAMMA: usize = 0;
    pub const BETA: usize = 1;

    pub const HEAD_W: usize = 0;
    pub const HEAD_B: usize = 1;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// An ordered group of named tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block<T> {
    pub tensors: Vec<NamedTensor<T>>,
}

impl<T: Scalar> Block<T> {
    fn from_parts(parts: Vec<(&str, Tensor<T>)>) -> Self {
        Block {
            tensors: parts
                .into_iter()
                .map(|(name, tensor)| NamedTensor { name: name.to_string(), tensor })
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn map<U: Scalar>(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<U>) -> Block<U> {
        Block {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor { name: t.name.clone(), tensor: f(&t.tensor) })
                .collect(),
        }
    }

    pub fn same_structure<U: Scalar>(&self, other: &Block<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.numel()).sum()
    }
}

/// Full parameter set of one model, or any per-parameter mirror of it
/// (gradients, optimizer moments).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlocks<T> {
    pub config: ModelConfig,
    pub embedding: Block<T>,
    pub layers: Vec<Block<T>>,
    pub final_norm: Block<T>,
    pub head: Block<T>,
}

/// Gradients share the parameter layout exactly.
pub type Gradients<T> = ParamBlocks<T>;

impl<T: Scalar> ParamBlocks<T> {
    /// Zero-filled blocks with the layout `config` implies.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let layer = layer_shapes(config)
            .into_iter()
            .map(|(name, shape)| (name, Tensor::zeros(&shape)))
            .collect();
        ParamBlocks {
            config: config.clone(),
            embedding: Block::from_parts(vec![
                ("tok", Tensor::zeros(&[config.vocab_size, d])),
                ("pos", Tensor::zeros(&[config.max_seq_len, d])),
            ]),
            layers: vec![Block::from_parts(layer); config.num_layers],
            final_norm: Block::from_parts(vec![("gamma", Tensor::zeros(&[d])), ("beta", Tensor::zeros(&[d]))]),
            head: Block::from_parts(vec![
                ("w", Tensor::zeros(&[d, config.vocab_size])),
                ("b", Tensor::zeros(&[config.vocab_size])),
            ]),
        }
    }

    pub fn map<U: Scalar>(&self, mut f: impl FnMut(&Tensor<T>) -> Tensor<U>) -> ParamBlocks<U> {
        ParamBlocks {
            config: self.config.clone(),
            embedding: self.embedding.map(&mut f),
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            final_norm: self.final_norm.map(&mut f),
            head: self.head.map(&mut f),
        }
    }

    pub fn zeros_like(&self) -> Self {
        self.map(|t| Tensor::zeros(t.shape()))
    }

    pub fn cast<U: Scalar>(&self) -> ParamBlocks<U> {
        self.map(|t| t.cast())
    }

    /// Blocks in canonical order: embedding, layers 0..L, final norm, head.
    pub fn blocks(&self) -> impl Iterator<Item = (String, &Block<T>)> {
        std::iter::once(("embedding".to_string(), &self.embedding))
            .chain(self.layers.iter().enumerate().map(|(i, b)| (format!("layers.{i}"), b)))
            .chain(std::iter::once(("final_norm".to_string(), &self.final_norm)))
            .chain(std::iter::once(("head".to_string(), &self.head)))
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<T>> {
        std::iter::once(&mut self.embedding)
            .chain(self.layers.iter_mut())
            .chain(std::iter::once(&mut self.final_norm))
            .chain(std::iter::once(&mut self.head))
    }

    /// Every tensor with its checkpoint-unique name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.blocks()
            .flat_map(|(prefix, block)| {
                block.tensors.iter().map(move |t| (format!("{prefix}.{}", t.name), &t.tensor))
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.blocks_mut().flat_map(|b| b.tensors.iter_mut().map(|t| &mut t.tensor))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        std::iter::once(&self.embedding)
            .chain(self.layers.iter())
            .chain(std::iter::once(&self.final_norm))
            .chain(std::iter::once(&self.head))
            .flat_map(|b| b.tensors.iter().map(|t| &t.tensor))
    }

    pub fn num_params(&self) -> usize {
        self.tensors().map(|t| t.numel()).sum()
    }

    /// Flatten every value in canonical order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for t in self.tensors() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrite every value from a flat buffer in canonical order.
    pub fn assign_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::precondition(format!(
                "flat buffer has {} values, model has {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn same_structure<U: Scalar>(&self, other: &ParamBlocks<U>) -> bool {
        self.config == other.config
            && self.embedding.same_structure(&other.embedding)
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.same_structure(b))
            && self.final_norm.same_structure(&other.final_norm)
            && self.head.same_structure(&other.head)
    }

    /// Check the structural invariants against the carried config: layer
    /// count, identical layer layout, expected shapes, unique names.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = ParamBlocks::<T>::zeros(&self.config);
        if self.layers.len() != self.config.num_layers {
            return Err(Error::Checkpoint(format!(
                "config declares {} layers but {} layer blocks are present",
                self.config.num_layers,
                self.layers.len()
            )));
        }
        if !self.same_structure(&reference) {
            return Err(Error::Checkpoint("parameter blocks do not match the layout implied by the config".into()));
        }
        let mut seen = HashSet::new();
        for (name, _) in self.named_tensors() {
            if !seen.insert(name.clone()) {
                return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
            }
        }
        Ok(())
    }
}

fn layer_shapes(config: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let d = config.d_model;
    let f = config.d_ff;
    let shapes = [
        vec![d],
        vec![d],
        vec![d, 3 * d],
        vec![3 * d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, f],
        vec![f],
        vec![f, d],
        vec![d],
    ];
    LAYER_TENSORS.iter().copied().zip(shapes).collect()
}

/// Freshly initialized layer block: weights ~ truncated N(0, 0.02), biases and
/// norm shifts zero, norm scales one.
pub fn init_layer<T: Scalar>(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Block<T> {
    let parts = layer_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            let tensor = if name.ends_with("gamma") {
                Tensor::filled(&shape, T::ONE)
            } else if name.starts_with("attn.w") || name.starts_with("mlp.w") {
                let n = shape.iter().product();
                Tensor::new(shape, truncated_normal(rng, INIT_STD, n)).expect("shape matches")
            } else {
                Tensor::zeros(&shape)
            };
            (name, tensor)
        })
        .collect();
    Block::from_parts(parts)
}

/// RNG stream for a fresh layer; shared by model init and random growth.
pub(crate) fn layer_rng(seed: u64, domain: &str, ordinal: usize) -> ChaCha8Rng {
    keyed_rng(&[seed, str_key(domain), ordinal as u64])
}

/// Deterministic model initialization from `(config, seed)`.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ParamBlocks<f32>> {
    config.validate()?;
    let mut params = ParamBlocks::<f32>::zeros(config);
    let d = config.d_model;

    let mut rng = keyed_rng(&[seed, str_key("embedding")]);
    params.embedding = Block::from_parts(vec![
        (
            "tok",
            Tensor::new(vec![config.vocab_size, d], truncated_normal(&mut rng, INIT_STD, config.vocab_size * d))?,
        ),
        (
            "pos",
            Tensor::new(vec![config.max_seq_len, d], truncated_normal(&mut rng, INIT_STD, config.max_seq_len * d))?,
        ),
    ]);
    params.layers = (0..config.num_layers).map(|l| init_layer(config, &mut layer_rng(seed, "layer", l))).collect();
    params.final_norm =
        Block::from_parts(vec![("gamma", Tensor::filled(&[d], 1.0)), ("beta", Tensor::zeros(&[d]))]);
    let mut rng = keyed_rng(&[seed, str_key("head")]);
    params.head = Block::from_parts(vec![
        (
            "w",
            Tensor::new(vec![d, config.vocab_size], truncated_normal(&mut rng, INIT_STD, d * config.vocab_size))?,
        ),
        ("b", Tensor::zeros(&[config.vocab_size])),
    ]);
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig { num_layers: layers, d_model: 64, n_heads: 4, d_ff: 128, vocab_size: 32, max_seq_len: 16 }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&cfg(4), 7).unwrap();
        let b = init_model(&cfg(4), 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 4);
        let c = init_model(&cfg(4), 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn parameter_count_matches_hand_count() {
        let config = ModelConfig { num_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, vocab_size: 11, max_seq_len: 16 };
        let params = init_model(&config, 0).unwrap();
        // tok 11*8 + pos 16*8
        let embedding = 88 + 128;
        // ln1 8+8, qkv 8*24+24, attn out 8*8+8, ln2 8+8, mlp in 8*16+16, mlp out 16*8+8
        let layer = 16 + 216 + 72 + 16 + 144 + 136;
        let final_norm = 16;
        // head 8*11 + 11
        let head = 99;
        assert_eq!(params.num_params(), embedding + 2 * layer + final_norm + head);
        assert_eq!(params.num_params(), 1531);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg(2);
        c.n_heads = 3;
        assert!(matches!(init_model(&c, 0), Err(Error::Config(_))));
        let mut c = cfg(2);
        c.vocab_size = 1;
        assert!(init_model(&c, 0).is_err());
        assert!(init_model(&cfg(0), 0).is_err());
    }

    #[test]
    fn names_are_unique_and_layout_validates() {
        let p = init_model(&cfg(3), 1).unwrap();
        p.validate().unwrap();
        let names: Vec<_> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"layers.2.mlp.w_out".to_string()));
        let unique: HashSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn flatten_round_trips() {
        let p = init_model(&cfg(2), 1).unwrap();
        let mut q = p.zeros_like();
        q.assign_flat(&p.flatten()).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn init_value_conventions() {
        let p = init_model(&cfg(1), 3).unwrap();
        let l = &p.layers[0];
        assert!(l.get("ln1.gamma").unwrap().data().iter().all(|&x| x == 1.0));
        assert!(l.get("attn.b_qkv").unwrap().data().iter().all(|&x| x == 0.0));
        assert!(l.get("mlp.w_in").unwrap().data().iter().all(|&x| x.abs() <= 0.04));
    }
}

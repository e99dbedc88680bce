//! Pre-norm decoder-only transformer on top of the tape.

use super::params::idx;
use super::tape::{NodeId, Tape};
use super::{Gradients, ParamBlocks, Scalar};
use crate::data::TokenBatch;
use crate::error::{Error, Result};

fn check_batch<T: Scalar>(params: &ParamBlocks<T>, batch: &TokenBatch) -> Result<()> {
    let cfg = &params.config;
    if batch.seq_len() > cfg.max_seq_len {
        return Err(Error::data(format!(
            "sequence length {} exceeds model.max_seq_len {}",
            batch.seq_len(),
            cfg.max_seq_len
        )));
    }
    if let Some(bad) = batch.windows().flatten().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::data(format!("token id {bad} out of range for vocab_size {}", cfg.vocab_size)));
    }
    Ok(())
}

/// Records the full forward pass. Returns the tape, the loss node and the
/// leaf node of every parameter tensor in canonical order.
fn build<'p, T: Scalar>(params: &'p ParamBlocks<T>, batch: &TokenBatch) -> Result<(Tape<'p, T>, NodeId, Vec<NodeId>)> {
    check_batch(params, batch)?;
    let cfg = &params.config;
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = params.tensors().map(|t| tape.leaf(t)).collect();

    let mut cursor = 0;
    let mut next_block = |n: usize| {
        let ids = leaves[cursor..cursor + n].to_vec();
        cursor += n;
        ids
    };
    let emb = next_block(params.embedding.tensors.len());
    let layers: Vec<Vec<NodeId>> = params.layers.iter().map(|l| next_block(l.tensors.len())).collect();
    let fin = next_block(params.final_norm.tensors.len());
    let head = next_block(params.head.tensors.len());

    let (b, s) = (batch.batch_size(), batch.seq_len());
    let mut x = tape.embed(emb[idx::TOK], emb[idx::POS], batch.inputs(), s);
    for l in &layers {
        let h = tape.layer_norm(x, l[idx::LN1_G], l[idx::LN1_B]);
        let qkv = tape.linear(h, l[idx::W_QKV], l[idx::B_QKV]);
        let a = tape.causal_attention(qkv, b, s, cfg.n_heads);
        let o = tape.linear(a, l[idx::W_ATTN_OUT], l[idx::B_ATTN_OUT]);
        x = tape.add(x, o);
        let h = tape.layer_norm(x, l[idx::LN2_G], l[idx::LN2_B]);
        let f = tape.linear(h, l[idx::W_IN], l[idx::B_IN]);
        let f = tape.gelu(f);
        let m = tape.linear(f, l[idx::W_MLP_OUT], l[idx::B_MLP_OUT]);
        x = tape.add(x, m);
    }
    let x = tape.layer_norm(x, fin[idx::GAMMA], fin[idx::BETA]);
    let logits = tape.linear(x, head[idx::HEAD_W], head[idx::HEAD_B]);
    let loss = tape.cross_entropy(logits, batch.targets());
    Ok((tape, loss, leaves))
}

/// Mean next-token cross-entropy in nats.
pub fn forward_loss<T: Scalar>(params: &ParamBlocks<T>, batch: &TokenBatch) -> Result<T> {
    let (tape, loss, _) = build(params, batch)?;
    Ok(tape.value(loss).data()[0])
}

pub fn loss_and_grads<T: Scalar>(params: &ParamBlocks<T>, batch: &TokenBatch) -> Result<(T, Gradients<T>)> {
    let (tape, loss, leaves) = build(params, batch)?;
    let value = tape.value(loss).data()[0];
    let mut slots = tape.backward(loss);
    let mut grads = params.zeros_like();
    for (g, id) in grads.tensors_mut().zip(leaves) {
        if let Some(t) = slots[id].take() {
            *g = t;
        }
    }
    Ok((value, grads))
}

/// Gradient of the mean loss with respect to every parameter tensor.
pub fn backward<T: Scalar>(params: &ParamBlocks<T>, batch: &TokenBatch) -> Result<Gradients<T>> {
    loss_and_grads(params, batch).map(|(_, g)| g)
}

/// Mean of per-batch losses, accumulated in binary64 in list order.
pub fn mean_loss<T: Scalar>(params: &ParamBlocks<T>, batches: &[TokenBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::precondition("mean_loss needs at least one batch"));
    }
    let mut total = 0.0;
    for b in batches {
        total += forward_loss(params, b)?.to_f64();
    }
    Ok(total / batches.len() as f64)
}

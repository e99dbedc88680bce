//! Reverse-mode autodiff over a linear tape.
//!
//! The forward pass appends one node per operation; `backward` walks the tape
//! in reverse and accumulates vector-Jacobian products into input slots. Ops
//! are fused at the granularity the transformer needs (linear, layer norm,
//! causal attention, cross-entropy) so intermediates stay small and the
//! reduction order of every sum is fixed by construction.

use std::borrow::Cow;

use super::{Scalar, Tensor};

pub type NodeId = usize;

pub const LN_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Embed { tok: NodeId, pos: NodeId, ids: Vec<u32>, seq: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Gelu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Attention { qkv: NodeId, batch: usize, seq: usize, heads: usize, probs: Vec<T> },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, probs: Vec<T> },
}

struct Node<'p, T: Scalar> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
}

pub struct Tape<'p, T: Scalar> {
    nodes: Vec<Node<'p, T>>,
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Tape { nodes: Vec::new() }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value: Cow::Owned(value), op });
        self.nodes.len() - 1
    }

    /// Register a borrowed tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &'p Tensor<T>) -> NodeId {
        self.nodes.push(Node { value: Cow::Borrowed(t), op: Op::Leaf });
        self.nodes.len() - 1
    }

    /// `tok[ids[n]] + pos[n % seq]` for every flattened position `n`.
    pub fn embed(&mut self, tok: NodeId, pos: NodeId, ids: Vec<u32>, seq: usize) -> NodeId {
        let d = self.value(tok).cols();
        let tok_v = self.value(tok).data();
        let pos_v = self.value(pos).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for (n, &id) in ids.iter().enumerate() {
            let t = &tok_v[id as usize * d..(id as usize + 1) * d];
            let p = &pos_v[(n % seq) * d..(n % seq + 1) * d];
            out.extend(t.iter().zip(p).map(|(&a, &b)| a + b));
        }
        let value = Tensor::new(vec![ids.len(), d], out).expect("embed shape");
        self.push(value, Op::Embed { tok, pos, ids, seq })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, d) = (xv.rows(), xv.cols());
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = Vec::with_capacity(rows * d);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows * d);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let value = Tensor::new(vec![rows, d], out).expect("layer norm shape");
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// `x @ w + b` with `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, k) = (xv.rows(), xv.cols());
        let m = wv.cols();
        debug_assert_eq!(wv.rows(), k);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        T::gemm(n, k, m, T::ONE, xv.data(), k as isize, 1, wv.data(), m as isize, 1, T::ONE, &mut out, m as isize, 1);
        let value = Tensor::new(vec![n, m], out).expect("linear shape");
        self.push(value, Op::Linear { x, w, b })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let out: Vec<T> =
            xv.data().iter().map(|&v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh())).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("gelu shape");
        self.push(value, Op::Gelu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        debug_assert_eq!(av.shape(), bv.shape());
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), out).expect("add shape");
        self.push(value, Op::Add { a, b })
    }

    /// Multi-head causal self-attention over a fused `[batch*seq, 3*d]`
    /// projection laid out as `[q | k | v]`, heads contiguous within each.
    pub fn causal_attention(&mut self, qkv: NodeId, batch: usize, seq: usize, heads: usize) -> NodeId {
        let qv = self.value(qkv);
        let d3 = qv.cols();
        let d = d3 / 3;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let src = qv.data();
        let mut out = vec![T::ZERO; batch * seq * d];
        let mut probs = vec![T::ZERO; batch * heads * seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * d3 + h * dh;
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                // scores = q k^T * scale
                T::gemm(
                    seq,
                    dh,
                    seq,
                    scale,
                    &src[base..],
                    d3 as isize,
                    1,
                    &src[base + d..],
                    1,
                    d3 as isize,
                    T::ZERO,
                    p,
                    seq as isize,
                    1,
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = row[0];
                    for &s in &row[1..=i] {
                        if s > max {
                            max = s;
                        }
                    }
                    let mut sum = T::ZERO;
                    for s in &mut row[..=i] {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = T::ONE / sum;
                    for s in &mut row[..=i] {
                        *s *= inv;
                    }
                    for s in &mut row[i + 1..] {
                        *s = T::ZERO;
                    }
                }
                T::gemm(
                    seq,
                    seq,
                    dh,
                    T::ONE,
                    p,
                    seq as isize,
                    1,
                    &src[base + 2 * d..],
                    d3 as isize,
                    1,
                    T::ZERO,
                    &mut out[b * seq * d + h * dh..],
                    d as isize,
                    1,
                );
            }
        }
        let value = Tensor::new(vec![batch * seq, d], out).expect("attention shape");
        self.push(value, Op::Attention { qkv, batch, seq, heads, probs })
    }

    /// Mean next-token cross-entropy in nats; yields a `[1]` tensor.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<u32>) -> NodeId {
        let lv = self.value(logits);
        let v = lv.cols();
        let mut probs = Vec::with_capacity(lv.numel());
        let mut total = T::ZERO;
        for (row, &t) in lv.data().chunks_exact(v).zip(&targets) {
            let mut max = row[0];
            for &x in &row[1..] {
                if x > max {
                    max = x;
                }
            }
            let mut sum = T::ZERO;
            let start = probs.len();
            for &x in row {
                let e = (x - max).exp();
                probs.push(e);
                sum += e;
            }
            let inv = T::ONE / sum;
            for p in &mut probs[start..] {
                *p *= inv;
            }
            total += sum.ln() + max - row[t as usize];
        }
        let mean = total / T::from_f64(targets.len() as f64);
        let value = Tensor::new(vec![1], vec![mean]).expect("scalar");
        self.push(value, Op::CrossEntropy { logits, targets, probs })
    }

    /// Gradients of the scalar node `root` with respect to every node that
    /// feeds it. Only leaf slots are retained in the result; interior slots
    /// are released as soon as they have been propagated.
    pub fn backward(&self, root: NodeId) -> Vec<Option<Tensor<T>>> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::filled(self.value(root).shape(), T::ONE));

        for id in (0..=root).rev() {
            let Some(dy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(dy);
                }
                Op::Embed { tok, pos, ids, seq } => {
                    let d = dy.cols();
                    let dy = dy.data();
                    {
                        let g = slot(&mut grads, *tok, self.value(*tok)).data_mut();
                        for (n, &t) in ids.iter().enumerate() {
                            let dst = &mut g[t as usize * d..(t as usize + 1) * d];
                            for (a, &b) in dst.iter_mut().zip(&dy[n * d..(n + 1) * d]) {
                                *a += b;
                            }
                        }
                    }
                    let g = slot(&mut grads, *pos, self.value(*pos)).data_mut();
                    for n in 0..ids.len() {
                        let p = n % seq;
                        let dst = &mut g[p * d..(p + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(&dy[n * d..(n + 1) * d]) {
                            *a += b;
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let d = dy.cols();
                    let inv_d = T::from_f64(1.0 / d as f64);
                    let g = self.value(*gamma).data();
                    {
                        let dg = slot(&mut grads, *gamma, self.value(*gamma)).data_mut();
                        for (dyr, hr) in dy.data().chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for j in 0..d {
                                dg[j] += dyr[j] * hr[j];
                            }
                        }
                    }
                    {
                        let db = slot(&mut grads, *beta, self.value(*beta)).data_mut();
                        for dyr in dy.data().chunks_exact(d) {
                            for j in 0..d {
                                db[j] += dyr[j];
                            }
                        }
                    }
                    let dx = slot(&mut grads, *x, self.value(*x)).data_mut();
                    let mut dxhat = vec![T::ZERO; d];
                    for (r, ((dyr, hr), dxr)) in
                        dy.data().chunks_exact(d).zip(xhat.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate()
                    {
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for j in 0..d {
                            dxhat[j] = dyr[j] * g[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        let rs = rstd[r];
                        for j in 0..d {
                            dxr[j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, k) = (xv.rows(), xv.cols());
                    let m = wv.cols();
                    {
                        let dx = slot(&mut grads, *x, xv).data_mut();
                        // dx += dy @ w^T
                        T::gemm(
                            n,
                            m,
                            k,
                            T::ONE,
                            dy.data(),
                            m as isize,
                            1,
                            wv.data(),
                            1,
                            m as isize,
                            T::ONE,
                            dx,
                            k as isize,
                            1,
                        );
                    }
                    {
                        let dw = slot(&mut grads, *w, wv).data_mut();
                        // dw += x^T @ dy
                        T::gemm(
                            k,
                            n,
                            m,
                            T::ONE,
                            xv.data(),
                            1,
                            k as isize,
                            dy.data(),
                            m as isize,
                            1,
                            T::ONE,
                            dw,
                            m as isize,
                            1,
                        );
                    }
                    let db = slot(&mut grads, *b, self.value(*b)).data_mut();
                    for row in dy.data().chunks_exact(m) {
                        for j in 0..m {
                            db[j] += row[j];
                        }
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let c = T::from_f64(GELU_C);
                    let a = T::from_f64(GELU_A);
                    let a3 = T::from_f64(3.0 * GELU_A);
                    let half = T::from_f64(0.5);
                    let dx = slot(&mut grads, *x, xv).data_mut();
                    for ((g, &v), &up) in dx.iter_mut().zip(xv.data()).zip(dy.data()) {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let local = half * (T::ONE + t) + half * v * (T::ONE - t * t) * c * (T::ONE + a3 * v * v);
                        *g += up * local;
                    }
                }
                Op::Add { a, b } => {
                    slot(&mut grads, *a, self.value(*a)).add_assign(&dy);
                    slot(&mut grads, *b, self.value(*b)).add_assign(&dy);
                }
                Op::Attention { qkv, batch, seq, heads, probs } => {
                    let (batch, seq, heads) = (*batch, *seq, *heads);
                    let qv = self.value(*qkv);
                    let d3 = qv.cols();
                    let d = d3 / 3;
                    let dh = d / heads;
                    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                    let src = qv.data();
                    let dout = dy.data();
                    let dqkv = slot(&mut grads, *qkv, qv).data_mut();
                    let mut dp = vec![T::ZERO; seq * seq];
                    for b in 0..batch {
                        for h in 0..heads {
                            let base = b * seq * d3 + h * dh;
                            let obase = b * seq * d + h * dh;
                            let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                            // dP = dout_h @ v^T
                            T::gemm(
                                seq,
                                dh,
                                seq,
                                T::ONE,
                                &dout[obase..],
                                d as isize,
                                1,
                                &src[base + 2 * d..],
                                1,
                                d3 as isize,
                                T::ZERO,
                                &mut dp,
                                seq as isize,
                                1,
                            );
                            // dv += P^T @ dout_h
                            T::gemm(
                                seq,
                                seq,
                                dh,
                                T::ONE,
                                p,
                                1,
                                seq as isize,
                                &dout[obase..],
                                d as isize,
                                1,
                                T::ONE,
                                &mut dqkv[base + 2 * d..],
                                d3 as isize,
                                1,
                            );
                            // dS = P * (dP - rowsum(P * dP)), in place in dp
                            for i in 0..seq {
                                let pr = &p[i * seq..(i + 1) * seq];
                                let dr = &mut dp[i * seq..(i + 1) * seq];
                                let mut dot = T::ZERO;
                                for j in 0..=i {
                                    dot += pr[j] * dr[j];
                                }
                                for j in 0..=i {
                                    dr[j] = pr[j] * (dr[j] - dot);
                                }
                                for v in &mut dr[i + 1..] {
                                    *v = T::ZERO;
                                }
                            }
                            // dq += dS @ k * scale
                            T::gemm(
                                seq,
                                seq,
                                dh,
                                scale,
                                &dp,
                                seq as isize,
                                1,
                                &src[base + d..],
                                d3 as isize,
                                1,
                                T::ONE,
                                &mut dqkv[base..],
                                d3 as isize,
                                1,
                            );
                            // dk += dS^T @ q * scale
                            T::gemm(
                                seq,
                                seq,
                                dh,
                                scale,
                                &dp,
                                1,
                                seq as isize,
                                &src[base..],
                                d3 as isize,
                                1,
                                T::ONE,
                                &mut dqkv[base + d..],
                                d3 as isize,
                                1,
                            );
                        }
                    }
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let lv = self.value(*logits);
                    let v = lv.cols();
                    let up = dy.data()[0] / T::from_f64(targets.len() as f64);
                    let dl = slot(&mut grads, *logits, lv).data_mut();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut dl[r * v..(r + 1) * v];
                        let pr = &probs[r * v..(r + 1) * v];
                        for j in 0..v {
                            row[j] += up * pr[j];
                        }
                        row[t as usize] -= up;
                    }
                }
            }
        }
        grads
    }
}

fn slot<'g, T: Scalar>(grads: &'g mut [Option<Tensor<T>>], id: NodeId, like: &Tensor<T>) -> &'g mut Tensor<T> {
    grads[id].get_or_insert_with(|| Tensor::zeros(like.shape()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_matches_naive() {
        let x = t(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let w = t(&[3, 2], &[1., 0., 0., 1., 1., 1.]);
        let b = t(&[2], &[0.5, -0.5]);
        let mut tape = Tape::new();
        let (xi, wi, bi) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let y = tape.linear(xi, wi, bi);
        assert_eq!(tape.value(y).data(), &[4.5, 4.5, 10.5, 10.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let qkv_data: Vec<f64> = (0..2 * 4 * 12).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3).collect();
        let qkv = t(&[8, 12], &qkv_data);
        let mut tape = Tape::new();
        let q = tape.leaf(&qkv);
        let a = tape.causal_attention(q, 2, 4, 2);
        let Op::Attention { probs, .. } = &tape.nodes[a].op else { unreachable!() };
        for (r, row) in probs.chunks_exact(4).enumerate() {
            let i = r % 4;
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row[i + 1..].iter().all(|&p| p == 0.0), "future positions must be masked");
        }
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = t(&[3, 8], &(0..24).map(|i| (i as f64 * 1.7).sin() * 3.0 + 1.0).collect::<Vec<_>>());
        let g = Tensor::filled(&[8], 1.0);
        let b = Tensor::zeros(&[8]);
        let mut tape = Tape::new();
        let (xi, gi, bi) = (tape.leaf(&x), tape.leaf(&g), tape.leaf(&b));
        let y = tape.layer_norm(xi, gi, bi);
        for row in tape.value(y).data().chunks_exact(8) {
            let mean: f64 = row.iter().sum::<f64>() / 8.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gelu_backward_matches_difference() {
        let xs = [-2.0, -0.3, 0.0, 0.7, 1.9];
        for &x0 in &xs {
            let f = |x: f64| {
                let v = t(&[1], &[x]);
                let mut tape = Tape::new();
                let xi = tape.leaf(&v);
                let y = tape.gelu(xi);
                tape.value(y).data()[0]
            };
            let v = t(&[1], &[x0]);
            let mut tape = Tape::new();
            let xi = tape.leaf(&v);
            let y = tape.gelu(xi);
            let g = tape.backward(y)[xi].as_ref().unwrap().data()[0];
            let h = 1e-6;
            let fd = (f(x0 + h) - f(x0 - h)) / (2.0 * h);
            assert!((g - fd).abs() < 1e-8, "x={x0} g={g} fd={fd}");
        }
    }
}

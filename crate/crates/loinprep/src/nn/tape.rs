//! Eager tape-based reverse-mode autodiff.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`] walks
//! the record in reverse, accumulating gradients in construction order —
//! single-threaded and therefore bit-deterministic. Tapes are cheap and
//! rebuilt per update step; parameters live outside the tape in
//! [`ParamSet`]s and are referenced by `(set, index)` keys.
//!
//! Batching convention: a "blocked" tensor stacks `B` sample blocks of
//! `block` rows each; ops that need block structure (attention, positional
//! broadcasts, per-block slicing) take the block size explicitly.

use super::tensor::{ParamIdx, ParamSet, Tensor};
use std::collections::BTreeMap;

/// Handle to a tape node.
pub type VarId = usize;

/// Key of a parameter: (parameter-set id, index within the set).
pub type ParamId = (u32, ParamIdx);

/// Gradients keyed by parameter, in deterministic order.
#[derive(Debug, Clone, Default)]
pub struct Grads {
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn get(&self, set: u32, idx: ParamIdx) -> Option<&Tensor> {
        self.by_param.get(&(set, idx))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.by_param.iter()
    }

    fn accumulate(&mut self, key: ParamId, grad: &Tensor) {
        match self.by_param.get_mut(&key) {
            Some(t) => t.add_scaled(grad, 1.0),
            None => {
                self.by_param.insert(key, grad.clone());
            }
        }
    }

    /// Max |gradient entry| across all parameters.
    pub fn max_abs(&self) -> f64 {
        self.by_param.values().fold(0.0, |m, t| m.max(t.max_abs()))
    }
}

enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(VarId, VarId),
    AddRowBroadcast(VarId, VarId),
    Add(VarId, VarId),
    Sub(VarId, VarId),
    MulElem(VarId, VarId),
    MulConstTensor(VarId, Tensor),
    ScaleConst(VarId, f64),
    AddConstScalar(VarId),
    LeakyRelu(VarId, f64),
    Gelu(VarId),
    Tanh(VarId),
    Exp(VarId),
    LnEps(VarId, f64),
    Clamp(VarId, f64, f64),
    RowSoftmax(VarId),
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
    },
    MultiHeadAttention {
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        seq: usize,
    },
    ConcatCols(VarId, VarId),
    SliceCols(VarId, usize, usize),
    TakeRowsPerBlock {
        x: VarId,
        block: usize,
        from: usize,
        to: usize,
    },
    PrependRowPerBlock {
        x: VarId,
        row: VarId,
        block: usize,
    },
    AddBlockBroadcast {
        x: VarId,
        p: VarId,
        block: usize,
    },
    AddRowToBlockRange {
        x: VarId,
        row: VarId,
        block: usize,
        from: usize,
        to: usize,
    },
    Reshape(VarId),
    RowSum(VarId),
    MeanAll(VarId),
    Min(VarId, VarId),
    HuberTo {
        x: VarId,
        target: Tensor,
        delta: f64,
    },
    SoftmaxCrossEntropy {
        logits: VarId,
        labels: Vec<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    /// Op-specific cached forward quantities (attention probabilities,
    /// layer-norm row stats, cross-entropy probabilities).
    aux: Vec<f64>,
}

/// Autodiff tape; see module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Registers a trainable parameter leaf (value copied from the set).
    pub fn param(&mut self, set: u32, params: &ParamSet, idx: ParamIdx) -> VarId {
        self.push(
            Op::Leaf {
                param: Some((set, idx)),
            },
            params.value(idx).clone(),
            true,
            Vec::new(),
        )
    }

    /// Registers a constant input leaf (no gradient).
    pub fn input(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf { param: None }, value, false, Vec::new())
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id].value
    }

    /// Convenience: current scalar value of a 1×1 node.
    pub fn scalar(&self, id: VarId) -> f64 {
        let t = &self.nodes[id].value;
        assert_eq!(t.shape(), (1, 1), "scalar() on non-1×1 node");
        t.data[0]
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool, aux: Vec<f64>) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
            aux,
        });
        self.nodes.len() - 1
    }

    fn ng(&self, id: VarId) -> bool {
        self.nodes[id].needs_grad
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.nodes[a].value.matmul(&self.nodes[b].value);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MatMul(a, b), v, g, Vec::new())
    }

    /// `x + bias` with `bias` a 1×C row broadcast over all rows.
    pub fn add_row_broadcast(&mut self, x: VarId, bias: VarId) -> VarId {
        let xt = &self.nodes[x].value;
        let bt = &self.nodes[bias].value;
        assert_eq!(bt.rows, 1);
        assert_eq!(bt.cols, xt.cols);
        let mut v = xt.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] += bt.data[c];
            }
        }
        let g = self.ng(x) || self.ng(bias);
        self.push(Op::AddRowBroadcast(x, bias), v, g, Vec::new())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let (at, bt) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(at.shape(), bt.shape());
        let mut v = at.clone();
        v.add_scaled(bt, 1.0);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Add(a, b), v, g, Vec::new())
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let (at, bt) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(at.shape(), bt.shape());
        let mut v = at.clone();
        v.add_scaled(bt, -1.0);
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Sub(a, b), v, g, Vec::new())
    }

    pub fn mul_elem(&mut self, a: VarId, b: VarId) -> VarId {
        let (at, bt) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(at.shape(), bt.shape());
        let v = Tensor {
            rows: at.rows,
            cols: at.cols,
            data: at.data.iter().zip(&bt.data).map(|(x, y)| x * y).collect(),
        };
        let g = self.ng(a) || self.ng(b);
        self.push(Op::MulElem(a, b), v, g, Vec::new())
    }

    /// Elementwise multiply by a constant tensor (dropout masks, validity
    /// masks); no gradient flows into the constant.
    pub fn mul_const_tensor(&mut self, x: VarId, k: Tensor) -> VarId {
        let xt = &self.nodes[x].value;
        assert_eq!(xt.shape(), k.shape());
        let v = Tensor {
            rows: xt.rows,
            cols: xt.cols,
            data: xt.data.iter().zip(&k.data).map(|(a, b)| a * b).collect(),
        };
        let g = self.ng(x);
        self.push(Op::MulConstTensor(x, k), v, g, Vec::new())
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let v = self.nodes[x].value.map(|a| a * k);
        let g = self.ng(x);
        self.push(Op::ScaleConst(x, k), v, g, Vec::new())
    }

    pub fn add_const(&mut self, x: VarId, k: f64) -> VarId {
        let v = self.nodes[x].value.map(|a| a + k);
        let g = self.ng(x);
        self.push(Op::AddConstScalar(x), v, g, Vec::new())
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let v = self.nodes[x].value.map(|a| if a >= 0.0 { a } else { slope * a });
        let g = self.ng(x);
        self.push(Op::LeakyRelu(x, slope), v, g, Vec::new())
    }

    /// GELU via the tanh approximation (smooth, so finite-difference checks
    /// behave).
    pub fn gelu(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x].value.map(gelu_fwd);
        let g = self.ng(x);
        self.push(Op::Gelu(x), v, g, Vec::new())
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x].value.map(f64::tanh);
        let g = self.ng(x);
        self.push(Op::Tanh(x), v, g, Vec::new())
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let v = self.nodes[x].value.map(f64::exp);
        let g = self.ng(x);
        self.push(Op::Exp(x), v, g, Vec::new())
    }

    /// `ln(x + eps)`.
    pub fn ln_eps(&mut self, x: VarId, eps: f64) -> VarId {
        let v = self.nodes[x].value.map(|a| (a + eps).ln());
        let g = self.ng(x);
        self.push(Op::LnEps(x, eps), v, g, Vec::new())
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: VarId, lo: f64, hi: f64) -> VarId {
        let v = self.nodes[x].value.map(|a| a.clamp(lo, hi));
        let g = self.ng(x);
        self.push(Op::Clamp(x, lo, hi), v, g, Vec::new())
    }

    /// Per-row softmax (max-subtracted). Additive masking is done by the
    /// caller (add a large negative constant to excluded entries).
    pub fn row_softmax(&mut self, x: VarId) -> VarId {
        let xt = &self.nodes[x].value;
        let mut v = xt.clone();
        for r in 0..v.rows {
            softmax_row(&mut v.data[r * v.cols..(r + 1) * v.cols]);
        }
        let g = self.ng(x);
        self.push(Op::RowSoftmax(x), v, g, Vec::new())
    }

    /// Row-wise layer norm with learnable gain/bias (both 1×C).
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId) -> VarId {
        const EPS: f64 = 1e-5;
        let xt = &self.nodes[x].value;
        let gt = &self.nodes[gamma].value;
        let bt = &self.nodes[beta].value;
        assert_eq!(gt.shape(), (1, xt.cols));
        assert_eq!(bt.shape(), (1, xt.cols));
        let (rows, cols) = xt.shape();
        let mut v = Tensor::zeros(rows, cols);
        let mut aux = Vec::with_capacity(rows * 2);
        for r in 0..rows {
            let row = &xt.data[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv_std = 1.0 / (var + EPS).sqrt();
            for c in 0..cols {
                v.data[r * cols + c] = (row[c] - mean) * inv_std * gt.data[c] + bt.data[c];
            }
            aux.push(mean);
            aux.push(inv_std);
        }
        let g = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(Op::LayerNorm { x, gamma, beta }, v, g, aux)
    }

    /// Multi-head self-attention over blocked rows: inputs are (B·seq)×D,
    /// attention runs within each block of `seq` rows, unmasked.
    pub fn multi_head_attention(
        &mut self,
        q: VarId,
        k: VarId,
        v: VarId,
        heads: usize,
        seq: usize,
    ) -> VarId {
        let (qt, kt, vt) = (
            &self.nodes[q].value,
            &self.nodes[k].value,
            &self.nodes[v].value,
        );
        assert_eq!(qt.shape(), kt.shape());
        assert_eq!(qt.shape(), vt.shape());
        let (rows, d) = qt.shape();
        assert_eq!(rows % seq, 0, "rows not a multiple of seq");
        assert_eq!(d % heads, 0, "model dim not a multiple of heads");
        let blocks = rows / seq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(rows, d);
        let mut aux = vec![0.0f64; blocks * heads * seq * seq];
        for b in 0..blocks {
            let base = b * seq;
            for h in 0..heads {
                let c0 = h * dh;
                let probs =
                    &mut aux[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                for i in 0..seq {
                    // scores s_j = q_i · k_j * scale, softmaxed in place
                    for j in 0..seq {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += qt.get(base + i, c0 + c) * kt.get(base + j, c0 + c);
                        }
                        probs[i * seq + j] = acc * scale;
                    }
                    softmax_row(&mut probs[i * seq..(i + 1) * seq]);
                    for j in 0..seq {
                        let p = probs[i * seq + j];
                        if p == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            out.data[(base + i) * d + c0 + c] += p * vt.get(base + j, c0 + c);
                        }
                    }
                }
            }
        }
        let g = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            Op::MultiHeadAttention { q, k, v, heads, seq },
            out,
            g,
            aux,
        )
    }

    pub fn concat_cols(&mut self, a: VarId, b: VarId) -> VarId {
        let (at, bt) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(at.rows, bt.rows);
        let (rows, ca, cb) = (at.rows, at.cols, bt.cols);
        let mut v = Tensor::zeros(rows, ca + cb);
        for r in 0..rows {
            v.data[r * (ca + cb)..r * (ca + cb) + ca]
                .copy_from_slice(&at.data[r * ca..(r + 1) * ca]);
            v.data[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                .copy_from_slice(&bt.data[r * cb..(r + 1) * cb]);
        }
        let g = self.ng(a) || self.ng(b);
        self.push(Op::ConcatCols(a, b), v, g, Vec::new())
    }

    /// Columns `[from, to)`.
    pub fn slice_cols(&mut self, x: VarId, from: usize, to: usize) -> VarId {
        let xt = &self.nodes[x].value;
        assert!(from < to && to <= xt.cols);
        let (rows, cols) = (xt.rows, to - from);
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            v.data[r * cols..(r + 1) * cols]
                .copy_from_slice(&xt.data[r * xt.cols + from..r * xt.cols + to]);
        }
        let g = self.ng(x);
        self.push(Op::SliceCols(x, from, to), v, g, Vec::new())
    }

    /// Rows `[from, to)` of every block of `block` rows.
    pub fn take_rows_per_block(&mut self, x: VarId, block: usize, from: usize, to: usize) -> VarId {
        let xt = &self.nodes[x].value;
        assert_eq!(xt.rows % block, 0);
        assert!(from < to && to <= block);
        let blocks = xt.rows / block;
        let take = to - from;
        let mut v = Tensor::zeros(blocks * take, xt.cols);
        for b in 0..blocks {
            let src = (b * block + from) * xt.cols..(b * block + to) * xt.cols;
            let dst = b * take * xt.cols..(b + 1) * take * xt.cols;
            v.data[dst].copy_from_slice(&xt.data[src]);
        }
        let g = self.ng(x);
        self.push(Op::TakeRowsPerBlock { x, block, from, to }, v, g, Vec::new())
    }

    /// Prepends the same 1×C `row` to every block of `block` rows
    /// (class-token style).
    pub fn prepend_row_per_block(&mut self, x: VarId, row: VarId, block: usize) -> VarId {
        let xt = &self.nodes[x].value;
        let rt = &self.nodes[row].value;
        assert_eq!(rt.shape(), (1, xt.cols));
        assert_eq!(xt.rows % block, 0);
        let blocks = xt.rows / block;
        let cols = xt.cols;
        let mut v = Tensor::zeros(blocks * (block + 1), cols);
        for b in 0..blocks {
            let dst0 = b * (block + 1) * cols;
            v.data[dst0..dst0 + cols].copy_from_slice(&rt.data);
            v.data[dst0 + cols..dst0 + (block + 1) * cols]
                .copy_from_slice(&xt.data[b * block * cols..(b + 1) * block * cols]);
        }
        let g = self.ng(x) || self.ng(row);
        self.push(Op::PrependRowPerBlock { x, row, block }, v, g, Vec::new())
    }

    /// Adds a (block×C) parameter to every block (positional embeddings).
    pub fn add_block_broadcast(&mut self, x: VarId, p: VarId, block: usize) -> VarId {
        let xt = &self.nodes[x].value;
        let pt = &self.nodes[p].value;
        assert_eq!(pt.shape(), (block, xt.cols));
        assert_eq!(xt.rows % block, 0);
        let mut v = xt.clone();
        let cols = v.cols;
        for r in 0..v.rows {
            let pr = r % block;
            for c in 0..cols {
                v.data[r * cols + c] += pt.data[pr * cols + c];
            }
        }
        let g = self.ng(x) || self.ng(p);
        self.push(Op::AddBlockBroadcast { x, p, block }, v, g, Vec::new())
    }

    /// Adds a single 1×C `row` to rows `[from, to)` of every block
    /// (source encodings).
    pub fn add_row_to_block_range(
        &mut self,
        x: VarId,
        row: VarId,
        block: usize,
        from: usize,
        to: usize,
    ) -> VarId {
        let xt = &self.nodes[x].value;
        let rt = &self.nodes[row].value;
        assert_eq!(rt.shape(), (1, xt.cols));
        assert_eq!(xt.rows % block, 0);
        assert!(from < to && to <= block);
        let mut v = xt.clone();
        let cols = v.cols;
        for r in 0..v.rows {
            let pr = r % block;
            if pr >= from && pr < to {
                for c in 0..cols {
                    v.data[r * cols + c] += rt.data[c];
                }
            }
        }
        let g = self.ng(x) || self.ng(row);
        self.push(
            Op::AddRowToBlockRange {
                x,
                row,
                block,
                from,
                to,
            },
            v,
            g,
            Vec::new(),
        )
    }

    /// Reinterprets the (contiguous) data with a new shape.
    pub fn reshape(&mut self, x: VarId, rows: usize, cols: usize) -> VarId {
        let xt = &self.nodes[x].value;
        assert_eq!(xt.len(), rows * cols);
        let v = Tensor {
            rows,
            cols,
            data: xt.data.clone(),
        };
        let g = self.ng(x);
        self.push(Op::Reshape(x), v, g, Vec::new())
    }

    /// Sums each row: (R×C) → (R×1).
    pub fn row_sum(&mut self, x: VarId) -> VarId {
        let xt = &self.nodes[x].value;
        let v = Tensor {
            rows: xt.rows,
            cols: 1,
            data: (0..xt.rows)
                .map(|r| xt.data[r * xt.cols..(r + 1) * xt.cols].iter().sum())
                .collect(),
        };
        let g = self.ng(x);
        self.push(Op::RowSum(x), v, g, Vec::new())
    }

    /// Mean over all entries: → 1×1.
    pub fn mean_all(&mut self, x: VarId) -> VarId {
        let xt = &self.nodes[x].value;
        let v = Tensor::scalar(xt.data.iter().sum::<f64>() / xt.len() as f64);
        let g = self.ng(x);
        self.push(Op::MeanAll(x), v, g, Vec::new())
    }

    /// Elementwise minimum; subgradient follows the smaller input
    /// (ties go to `a`).
    pub fn min(&mut self, a: VarId, b: VarId) -> VarId {
        let (at, bt) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(at.shape(), bt.shape());
        let v = Tensor {
            rows: at.rows,
            cols: at.cols,
            data: at
                .data
                .iter()
                .zip(&bt.data)
                .map(|(x, y)| x.min(*y))
                .collect(),
        };
        let g = self.ng(a) || self.ng(b);
        self.push(Op::Min(a, b), v, g, Vec::new())
    }

    /// Elementwise Huber loss of `x` against a constant target.
    pub fn huber_to(&mut self, x: VarId, target: Tensor, delta: f64) -> VarId {
        let xt = &self.nodes[x].value;
        assert_eq!(xt.shape(), target.shape());
        let v = Tensor {
            rows: xt.rows,
            cols: xt.cols,
            data: xt
                .data
                .iter()
                .zip(&target.data)
                .map(|(a, t)| {
                    let r = a - t;
                    if r.abs() <= delta {
                        0.5 * r * r
                    } else {
                        delta * (r.abs() - 0.5 * delta)
                    }
                })
                .collect(),
        };
        let g = self.ng(x);
        self.push(Op::HuberTo { x, target, delta }, v, g, Vec::new())
    }

    /// Per-row softmax cross-entropy against integer labels: (R×C) → (R×1).
    pub fn softmax_cross_entropy(&mut self, logits: VarId, labels: Vec<usize>) -> VarId {
        let lt = &self.nodes[logits].value;
        assert_eq!(lt.rows, labels.len());
        let (rows, cols) = lt.shape();
        let mut probs = lt.data.clone();
        let mut v = Tensor::zeros(rows, 1);
        for r in 0..rows {
            let row = &mut probs[r * cols..(r + 1) * cols];
            softmax_row(row);
            v.data[r] = -(row[labels[r]].max(1e-300)).ln();
        }
        let g = self.ng(logits);
        self.push(Op::SoftmaxCrossEntropy { logits, labels }, v, g, probs)
    }

    /// Seeds d(loss)/d(loss) = 1 and accumulates gradients down to parameter
    /// leaves. `loss` must be 1×1.
    pub fn backward(&self, loss: VarId) -> Grads {
        assert_eq!(
            self.nodes[loss].value.shape(),
            (1, 1),
            "backward() expects a scalar loss"
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));
        let mut out = Grads::default();

        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let aux = &self.nodes[id].aux;

            macro_rules! bump {
                ($target:expr, $grad:expr) => {{
                    let t: VarId = $target;
                    if self.nodes[t].needs_grad {
                        let g: Tensor = $grad;
                        match &mut grads[t] {
                            Some(existing) => existing.add_scaled(&g, 1.0),
                            slot => *slot = Some(g),
                        }
                    }
                }};
            }

            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(key) = param {
                        out.accumulate(*key, &gout);
                    }
                }
                &Op::MatMul(a, b) => {
                    if self.nodes[a].needs_grad {
                        let g = gout.matmul_bt(&self.nodes[b].value);
                        bump!(a, g);
                    }
                    if self.nodes[b].needs_grad {
                        let g = self.nodes[a].value.matmul_at(&gout);
                        bump!(b, g);
                    }
                }
                &Op::AddRowBroadcast(x, bias) => {
                    if self.nodes[bias].needs_grad {
                        let mut g = Tensor::zeros(1, gout.cols);
                        for r in 0..gout.rows {
                            for c in 0..gout.cols {
                                g.data[c] += gout.data[r * gout.cols + c];
                            }
                        }
                        bump!(bias, g);
                    }
                    bump!(x, gout.clone());
                }
                &Op::Add(a, b) => {
                    bump!(a, gout.clone());
                    bump!(b, gout.clone());
                }
                &Op::Sub(a, b) => {
                    bump!(a, gout.clone());
                    bump!(b, gout.map(|v| -v));
                }
                &Op::MulElem(a, b) => {
                    if self.nodes[a].needs_grad {
                        let bt = &self.nodes[b].value;
                        let g = Tensor {
                            rows: gout.rows,
                            cols: gout.cols,
                            data: gout.data.iter().zip(&bt.data).map(|(g, v)| g * v).collect(),
                        };
                        bump!(a, g);
                    }
                    if self.nodes[b].needs_grad {
                        let at = &self.nodes[a].value;
                        let g = Tensor {
                            rows: gout.rows,
                            cols: gout.cols,
                            data: gout.data.iter().zip(&at.data).map(|(g, v)| g * v).collect(),
                        };
                        bump!(b, g);
                    }
                }
                Op::MulConstTensor(x, k) => {
                    let x = *x;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout.data.iter().zip(&k.data).map(|(g, v)| g * v).collect(),
                    };
                    bump!(x, g);
                }
                &Op::ScaleConst(x, k) => bump!(x, gout.map(|v| v * k)),
                &Op::AddConstScalar(x) => bump!(x, gout.clone()),
                &Op::LeakyRelu(x, slope) => {
                    let xt = &self.nodes[x].value;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout
                            .data
                            .iter()
                            .zip(&xt.data)
                            .map(|(g, &v)| if v >= 0.0 { *g } else { g * slope })
                            .collect(),
                    };
                    bump!(x, g);
                }
                &Op::Gelu(x) => {
                    let xt = &self.nodes[x].value;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout
                            .data
                            .iter()
                            .zip(&xt.data)
                            .map(|(g, &v)| g * gelu_grad(v))
                            .collect(),
                    };
                    bump!(x, g);
                }
                &Op::Tanh(x) => {
                    let yt = &self.nodes[id].value;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout
                            .data
                            .iter()
                            .zip(&yt.data)
                            .map(|(g, &y)| g * (1.0 - y * y))
                            .collect(),
                    };
                    bump!(x, g);
                }
                &Op::Exp(x) => {
                    let yt = &self.nodes[id].value;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout.data.iter().zip(&yt.data).map(|(g, &y)| g * y).collect(),
                    };
                    bump!(x, g);
                }
                &Op::LnEps(x, eps) => {
                    let xt = &self.nodes[x].value;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout
                            .data
                            .iter()
                            .zip(&xt.data)
                            .map(|(g, &v)| g / (v + eps))
                            .collect(),
                    };
                    bump!(x, g);
                }
                &Op::Clamp(x, lo, hi) => {
                    let xt = &self.nodes[x].value;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout
                            .data
                            .iter()
                            .zip(&xt.data)
                            .map(|(g, &v)| if v >= lo && v <= hi { *g } else { 0.0 })
                            .collect(),
                    };
                    bump!(x, g);
                }
                &Op::RowSoftmax(x) => {
                    let p = &self.nodes[id].value;
                    let mut g = Tensor::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let pr = &p.data[r * p.cols..(r + 1) * p.cols];
                        let gr = &gout.data[r * p.cols..(r + 1) * p.cols];
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        for c in 0..p.cols {
                            g.data[r * p.cols + c] = pr[c] * (gr[c] - dot);
                        }
                    }
                    bump!(x, g);
                }
                &Op::LayerNorm { x, gamma, beta } => {
                    let xt = &self.nodes[x].value;
                    let gt = &self.nodes[gamma].value;
                    let (rows, cols) = xt.shape();
                    let mut gx = Tensor::zeros(rows, cols);
                    let mut gg = Tensor::zeros(1, cols);
                    let mut gb = Tensor::zeros(1, cols);
                    for r in 0..rows {
                        let mean = aux[r * 2];
                        let inv_std = aux[r * 2 + 1];
                        let xrow = &xt.data[r * cols..(r + 1) * cols];
                        let grow = &gout.data[r * cols..(r + 1) * cols];
                        // dxhat, plus gain/bias grads
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        let mut dxhat = vec![0.0f64; cols];
                        for c in 0..cols {
                            let xhat = (xrow[c] - mean) * inv_std;
                            gg.data[c] += grow[c] * xhat;
                            gb.data[c] += grow[c];
                            dxhat[c] = grow[c] * gt.data[c];
                            mean_dxhat += dxhat[c];
                            mean_dxhat_xhat += dxhat[c] * xhat;
                        }
                        mean_dxhat /= cols as f64;
                        mean_dxhat_xhat /= cols as f64;
                        for c in 0..cols {
                            let xhat = (xrow[c] - mean) * inv_std;
                            gx.data[r * cols + c] =
                                inv_std * (dxhat[c] - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    bump!(x, gx);
                    bump!(gamma, gg);
                    bump!(beta, gb);
                }
                &Op::MultiHeadAttention { q, k, v, heads, seq } => {
                    let qt = &self.nodes[q].value;
                    let kt = &self.nodes[k].value;
                    let vt = &self.nodes[v].value;
                    let (rows, d) = qt.shape();
                    let blocks = rows / seq;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Tensor::zeros(rows, d);
                    let mut gk = Tensor::zeros(rows, d);
                    let mut gv = Tensor::zeros(rows, d);
                    let mut dp = vec![0.0f64; seq];
                    let mut ds = vec![0.0f64; seq];
                    for b in 0..blocks {
                        let base = b * seq;
                        for h in 0..heads {
                            let c0 = h * dh;
                            let probs =
                                &aux[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                            for i in 0..seq {
                                let prow = &probs[i * seq..(i + 1) * seq];
                                // dV += pᵀ dO ; dp = dO Vᵀ
                                for j in 0..seq {
                                    let mut acc = 0.0;
                                    for c in 0..dh {
                                        let go = gout.data[(base + i) * d + c0 + c];
                                        gv.data[(base + j) * d + c0 + c] += prow[j] * go;
                                        acc += go * vt.get(base + j, c0 + c);
                                    }
                                    dp[j] = acc;
                                }
                                let dot: f64 =
                                    prow.iter().zip(dp.iter()).map(|(p, d)| p * d).sum();
                                for j in 0..seq {
                                    ds[j] = prow[j] * (dp[j] - dot) * scale;
                                }
                                for j in 0..seq {
                                    let s = ds[j];
                                    if s == 0.0 {
                                        continue;
                                    }
                                    for c in 0..dh {
                                        gq.data[(base + i) * d + c0 + c] +=
                                            s * kt.get(base + j, c0 + c);
                                        gk.data[(base + j) * d + c0 + c] +=
                                            s * qt.get(base + i, c0 + c);
                                    }
                                }
                            }
                        }
                    }
                    bump!(q, gq);
                    bump!(k, gk);
                    bump!(v, gv);
                }
                &Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a].value.cols;
                    let cb = self.nodes[b].value.cols;
                    if self.nodes[a].needs_grad {
                        let mut g = Tensor::zeros(gout.rows, ca);
                        for r in 0..gout.rows {
                            g.data[r * ca..(r + 1) * ca]
                                .copy_from_slice(&gout.data[r * (ca + cb)..r * (ca + cb) + ca]);
                        }
                        bump!(a, g);
                    }
                    if self.nodes[b].needs_grad {
                        let mut g = Tensor::zeros(gout.rows, cb);
                        for r in 0..gout.rows {
                            g.data[r * cb..(r + 1) * cb].copy_from_slice(
                                &gout.data[r * (ca + cb) + ca..(r + 1) * (ca + cb)],
                            );
                        }
                        bump!(b, g);
                    }
                }
                &Op::SliceCols(x, from, _to) => {
                    let xt = &self.nodes[x].value;
                    let mut g = Tensor::zeros(xt.rows, xt.cols);
                    for r in 0..gout.rows {
                        for c in 0..gout.cols {
                            g.data[r * xt.cols + from + c] = gout.data[r * gout.cols + c];
                        }
                    }
                    bump!(x, g);
                }
                &Op::TakeRowsPerBlock { x, block, from, to } => {
                    let xt = &self.nodes[x].value;
                    let take = to - from;
                    let cols = xt.cols;
                    let mut g = Tensor::zeros(xt.rows, cols);
                    for b in 0..xt.rows / block {
                        let src = b * take * cols..(b + 1) * take * cols;
                        let dst = (b * block + from) * cols..(b * block + to) * cols;
                        g.data[dst].copy_from_slice(&gout.data[src]);
                    }
                    bump!(x, g);
                }
                &Op::PrependRowPerBlock { x, row, block } => {
                    let cols = gout.cols;
                    let blocks = gout.rows / (block + 1);
                    if self.nodes[row].needs_grad {
                        let mut gr = Tensor::zeros(1, cols);
                        for b in 0..blocks {
                            let r0 = b * (block + 1);
                            for c in 0..cols {
                                gr.data[c] += gout.data[r0 * cols + c];
                            }
                        }
                        bump!(row, gr);
                    }
                    if self.nodes[x].needs_grad {
                        let mut gx = Tensor::zeros(blocks * block, cols);
                        for b in 0..blocks {
                            let src = (b * (block + 1) + 1) * cols..(b + 1) * (block + 1) * cols;
                            let dst = b * block * cols..(b + 1) * block * cols;
                            gx.data[dst].copy_from_slice(&gout.data[src]);
                        }
                        bump!(x, gx);
                    }
                }
                &Op::AddBlockBroadcast { x, p, block } => {
                    if self.nodes[p].needs_grad {
                        let cols = gout.cols;
                        let mut gp = Tensor::zeros(block, cols);
                        for r in 0..gout.rows {
                            let pr = r % block;
                            for c in 0..cols {
                                gp.data[pr * cols + c] += gout.data[r * cols + c];
                            }
                        }
                        bump!(p, gp);
                    }
                    bump!(x, gout.clone());
                }
                &Op::AddRowToBlockRange {
                    x,
                    row,
                    block,
                    from,
                    to,
                } => {
                    if self.nodes[row].needs_grad {
                        let cols = gout.cols;
                        let mut gr = Tensor::zeros(1, cols);
                        for r in 0..gout.rows {
                            let pr = r % block;
                            if pr >= from && pr < to {
                                for c in 0..cols {
                                    gr.data[c] += gout.data[r * cols + c];
                                }
                            }
                        }
                        bump!(row, gr);
                    }
                    bump!(x, gout.clone());
                }
                &Op::Reshape(x) => {
                    let xt = &self.nodes[x].value;
                    let g = Tensor {
                        rows: xt.rows,
                        cols: xt.cols,
                        data: gout.data.clone(),
                    };
                    bump!(x, g);
                }
                &Op::RowSum(x) => {
                    let xt = &self.nodes[x].value;
                    let mut g = Tensor::zeros(xt.rows, xt.cols);
                    for r in 0..xt.rows {
                        let gr = gout.data[r];
                        for c in 0..xt.cols {
                            g.data[r * xt.cols + c] = gr;
                        }
                    }
                    bump!(x, g);
                }
                &Op::MeanAll(x) => {
                    let xt = &self.nodes[x].value;
                    let scale = gout.data[0] / xt.len() as f64;
                    let g = Tensor {
                        rows: xt.rows,
                        cols: xt.cols,
                        data: vec![scale; xt.len()],
                    };
                    bump!(x, g);
                }
                &Op::Min(a, b) => {
                    let (at, bt) = (&self.nodes[a].value, &self.nodes[b].value);
                    if self.nodes[a].needs_grad {
                        let g = Tensor {
                            rows: gout.rows,
                            cols: gout.cols,
                            data: gout
                                .data
                                .iter()
                                .zip(at.data.iter().zip(&bt.data))
                                .map(|(g, (x, y))| if x <= y { *g } else { 0.0 })
                                .collect(),
                        };
                        bump!(a, g);
                    }
                    if self.nodes[b].needs_grad {
                        let g = Tensor {
                            rows: gout.rows,
                            cols: gout.cols,
                            data: gout
                                .data
                                .iter()
                                .zip(at.data.iter().zip(&bt.data))
                                .map(|(g, (x, y))| if x > y { *g } else { 0.0 })
                                .collect(),
                        };
                        bump!(b, g);
                    }
                }
                Op::HuberTo { x, target, delta } => {
                    let (x, delta) = (*x, *delta);
                    let xt = &self.nodes[x].value;
                    let g = Tensor {
                        rows: gout.rows,
                        cols: gout.cols,
                        data: gout
                            .data
                            .iter()
                            .zip(xt.data.iter().zip(&target.data))
                            .map(|(g, (a, t))| g * (a - t).clamp(-delta, delta))
                            .collect(),
                    };
                    bump!(x, g);
                }
                Op::SoftmaxCrossEntropy { logits, labels } => {
                    let logits = *logits;
                    let cols = self.nodes[logits].value.cols;
                    let rows = self.nodes[logits].value.rows;
                    let mut g = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = gout.data[r];
                        for c in 0..cols {
                            let p = aux[r * cols + c];
                            let y = if c == labels[r] { 1.0 } else { 0.0 };
                            g.data[r * cols + c] = gr * (p - y);
                        }
                    }
                    bump!(logits, g);
                }
            }
        }
        out
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.7978845608028654; // √(2/π)

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a small net exercising most ops; returns the scalar loss.
    fn build_loss(params: &ParamSet, tape: &mut Tape) -> VarId {
        let w1 = tape.param(0, params, 0);
        let b1 = tape.param(0, params, 1);
        let w2 = tape.param(0, params, 2);
        let gamma = tape.param(0, params, 3);
        let beta = tape.param(0, params, 4);
        let src = tape.param(0, params, 5);
        let x = tape.input(Tensor::from_fn(6, 4, |r, c| {
            ((r * 4 + c) as f64 * 0.37).sin() * 0.8
        }));
        let h = tape.matmul(x, w1);
        let h = tape.add_row_broadcast(h, b1);
        let h = tape.add_row_to_block_range(h, src, 3, 1, 3);
        let h = tape.layer_norm(h, gamma, beta);
        let h = tape.multi_head_attention(h, h, h, 2, 3);
        let h = tape.gelu(h);
        let h2 = tape.matmul(h, w2);
        let t = tape.tanh(h2);
        let lr = tape.leaky_relu(h2, 0.01);
        let both = tape.concat_cols(t, lr);
        let part = tape.slice_cols(both, 1, 5);
        let sm = tape.row_softmax(part);
        let ln = tape.ln_eps(sm, 1e-8);
        let prod = tape.mul_elem(sm, ln);
        let rs = tape.row_sum(prod);
        let rs2 = tape.reshape(rs, 2, 3);
        let taken = tape.take_rows_per_block(rs2, 1, 0, 1);
        let hub = tape.huber_to(taken, Tensor::from_vec(2, 3, vec![0.1; 6]), 1.0);
        tape.mean_all(hub)
    }

    #[test]
    fn finite_difference_agreement_across_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        params.add("w1", init::xavier(4, 6, &mut rng));
        params.add("b1", Tensor::zeros(1, 6));
        params.add("w2", init::xavier(6, 3, &mut rng));
        params.add("gamma", Tensor::from_vec(1, 6, vec![1.0; 6]));
        params.add("beta", Tensor::zeros(1, 6));
        params.add("src", init::xavier(1, 6, &mut rng));

        let mut tape = Tape::new();
        let loss = build_loss(&params, &mut tape);
        let grads = tape.backward(loss);

        let eps = 1e-6;
        let mut checked = 0usize;
        for idx in 0..params.len() {
            let n = params.value(idx).len();
            for e in 0..n {
                let orig = params.value(idx).data[e];
                params.value_mut(idx).data[e] = orig + eps;
                let mut tp = Tape::new();
                let lp = build_loss(&params, &mut tp);
                let fp = tp.scalar(lp);
                params.value_mut(idx).data[e] = orig - eps;
                let mut tm = Tape::new();
                let lm = build_loss(&params, &mut tm);
                let fm = tm.scalar(lm);
                params.value_mut(idx).data[e] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let analytic = grads.get(0, idx).map_or(0.0, |g| g.data[e]);
                let denom = analytic.abs().max(numeric.abs());
                if denom > 1e-7 {
                    let rel = (analytic - numeric).abs() / denom;
                    assert!(
                        rel < 1e-5,
                        "param {idx}[{e}]: analytic {analytic} vs numeric {numeric}"
                    );
                } else {
                    assert!((analytic - numeric).abs() < 1e-7);
                }
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn softmax_cross_entropy_grad_is_p_minus_onehot() {
        let mut params = ParamSet::new();
        params.add(
            "logits",
            Tensor::from_vec(2, 3, vec![0.3, -0.1, 0.9, 0.0, 0.0, 0.0]),
        );
        let mut tape = Tape::new();
        let l = tape.param(0, &params, 0);
        let ce = tape.softmax_cross_entropy(l, vec![2, 0]);
        let loss = tape.mean_all(ce);
        let grads = tape.backward(loss);
        let g = grads.get(0, 0).unwrap();
        // Row 1 logits are all zero → p = 1/3 each; label 0.
        assert!((g.get(1, 0) - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-12);
        assert!((g.get(1, 1) - (1.0 / 3.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn attention_is_permutation_equivariant_within_block() {
        // Swapping two rows of the (single-block) input swaps the outputs.
        let x = Tensor::from_fn(4, 8, |r, c| ((r * 8 + c) as f64).sin());
        let mut tape = Tape::new();
        let xin = tape.input(x.clone());
        let out = tape.multi_head_attention(xin, xin, xin, 2, 4);
        let base = tape.value(out).clone();

        let mut swapped = x.clone();
        for c in 0..8 {
            swapped.data.swap(c, 8 + c); // swap rows 0 and 1
        }
        let mut tape2 = Tape::new();
        let xin2 = tape2.input(swapped);
        let out2 = tape2.multi_head_attention(xin2, xin2, xin2, 2, 4);
        let got = tape2.value(out2);
        for c in 0..8 {
            assert!((base.get(0, c) - got.get(1, c)).abs() < 1e-12);
            assert!((base.get(1, c) - got.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = ParamSet::new();
        params.add("w1", init::xavier(4, 6, &mut rng));
        params.add("b1", Tensor::zeros(1, 6));
        params.add("w2", init::xavier(6, 3, &mut rng));
        params.add("gamma", Tensor::from_vec(1, 6, vec![1.0; 6]));
        params.add("beta", Tensor::zeros(1, 6));
        params.add("src", init::xavier(1, 6, &mut rng));
        let run = || {
            let mut tape = Tape::new();
            let loss = build_loss(&params, &mut tape);
            let g = tape.backward(loss);
            (tape.scalar(loss), format!("{:?}", g.iter().collect::<Vec<_>>()))
        };
        assert_eq!(run(), run());
    }
}

/// Tape variable ids for one bound parameter set.
pub struct SetBinding {
    ids: Vec<VarId>,
}

/// Registers every tensor of `set` on the tape — as trainable parameters
/// or as constants — and returns name-addressable variable ids.
pub fn bind_set(tape: &mut Tape, set_id: u32, set: &ParamSet, trainable: bool) -> SetBinding {
    let ids = (0..set.len())
        .map(|i| {
            if trainable {
                tape.param(set_id, set, i)
            } else {
                tape.input(set.value(i).clone())
            }
        })
        .collect();
    SetBinding { ids }
}

impl SetBinding {
    pub fn get(&self, set: &ParamSet, name: &str) -> VarId {
        self.ids[set.index_of(name).unwrap_or_else(|| panic!("missing param {name}"))]
    }
}

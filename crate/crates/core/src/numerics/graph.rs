//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node whose inputs already exist, so node order is a
//! topological order and the backward sweep is one reverse pass that visits each
//! node once. Backward rules are written per operation; operations owned by other
//! modules (SSM convolution, attention) plug in through [`CustomOp`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::ops::{
    check_layer_norm, flip_rows, gelu_grad_scalar, gelu_scalar, layer_norm_raw, softmax_in_place,
};
use crate::numerics::tensor::gemm;
use crate::numerics::{ParamId, ParamStore, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation with a hand-written vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the output gradient. Entries for inputs
    /// with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Flip { x: Var, seq_len: usize },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation tape. Build it during a forward pass, then call [`Graph::backward`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A leaf that does receive gradient but is not tied to a stored parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node, so
    /// tied uses share one gradient accumulator.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_leaves(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n) = if trans_b {
            (tb.shape()[1], tb.shape()[0])
        } else {
            (tb.shape()[0], tb.shape()[1])
        };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), trans_b, &mut out, 0.0);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, trans_b },
            needs,
        ))
    }

    /// `a [m x k] * b [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a [m x k] * b^T` with `b [n x k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    /// Broadcast a length-`cols` vector over every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let cols = tx.cols();
        if tb.numel() != cols {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tb.data()[i % cols];
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(out, Op::AddBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let needs = self.needs(x);
        self.push(out, Op::Scale(x, factor), needs)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu_scalar);
        let needs = self.needs(x);
        self.push(out, Op::Gelu(x), needs)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        check_layer_norm(tx, tg, tb, eps)?;
        let r = layer_norm_raw(tx.data(), tx.cols(), tg.data(), tb.data(), eps);
        let out = Tensor::new(tx.shape().to_vec(), r.out)?;
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: r.xhat,
                rstd: r.rstd,
            },
            needs,
        ))
    }

    /// Reverse the row order within each consecutive block of `seq_len` rows.
    pub fn flip(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let tx = self.value(x);
        if seq_len == 0 || !tx.rows().is_multiple_of(seq_len) {
            return Err(Error::invalid(format!(
                "flip: {} rows are not a multiple of seq_len {seq_len}",
                tx.rows()
            )));
        }
        let out = Tensor::new(tx.shape().to_vec(), flip_rows(tx.data(), tx.cols(), seq_len))?;
        let needs = self.needs(x);
        Ok(self.push(out, Op::Flip { x, seq_len }, needs))
    }

    /// Row gather from a `[vocab x d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: id as u32,
                    vocab_size: vocab,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let needs = self.needs(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Inverted dropout: zero with probability `rate`, scale survivors by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.numel())
            .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(x);
        self.push(out, Op::Dropout { x, mask }, needs)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    /// Mean cross-entropy over rows whose label is not negative. Zero when no row is labeled.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, vocab) = (tl.rows(), tl.cols());
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "masked_cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &label) in labels.iter().enumerate() {
            if label < 0 {
                continue;
            }
            if label as usize >= vocab {
                return Err(Error::TokenOutOfRange {
                    id: label as u32,
                    vocab_size: vocab,
                });
            }
            let row = &mut probs[r * vocab..(r + 1) * vocab];
            row.copy_from_slice(tl.row(r));
            softmax_in_place(row);
            total -= row[label as usize].ln();
            count += 1;
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    pub fn custom(&mut self, inputs: Vec<Var>, output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom { inputs, op }, needs)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |v: Var, gv: Vec<f64>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], gv);
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            &Op::MatMul { a, b, trans_b } => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = node.value.shape()[1];
                if self.needs(a) {
                    let mut ga = vec![0.0; m * k];
                    // trans_b: b is [n x k] so ga = g * b; otherwise b is [k x n], ga = g * b^T
                    gemm(m, n, k, g, false, tb.data(), !trans_b, &mut ga, 0.0);
                    send(a, ga);
                }
                if self.needs(b) {
                    let mut gb = vec![0.0; k * n];
                    if trans_b {
                        gemm(n, m, k, g, true, ta.data(), false, &mut gb, 0.0);
                    } else {
                        gemm(k, m, n, ta.data(), true, g, false, &mut gb, 0.0);
                    }
                    send(b, gb);
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::AddBias(x, bias) => {
                let cols = self.value(bias).numel();
                let mut gb = vec![0.0; cols];
                for (i, v) in g.iter().enumerate() {
                    gb[i % cols] += v;
                }
                send(x, g.to_vec());
                send(bias, gb);
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                send(a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                send(b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
            }
            &Op::Scale(x, f) => send(x, g.iter().map(|v| v * f).collect()),
            &Op::Gelu(x) => {
                let tx = self.value(x);
                send(
                    x,
                    g.iter()
                        .zip(tx.data())
                        .map(|(g, &v)| g * gelu_grad_scalar(v))
                        .collect(),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let cols = self.value(*x).cols();
                let gn = self.value(*gain).data();
                let rows = g.len() / cols;
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; cols];
                let mut gbias = vec![0.0; cols];
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for c in 0..cols {
                        let dh = gr[c] * gn[c];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[c];
                        gg[c] += gr[c] * hr[c];
                        gbias[c] += gr[c];
                    }
                    mean_dh /= cols as f64;
                    mean_dh_h /= cols as f64;
                    for c in 0..cols {
                        let dh = gr[c] * gn[c];
                        gx[r * cols + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                send(*x, gx);
                send(*gain, gg);
                send(*bias, gbias);
            }
            &Op::Flip { x, seq_len } => {
                send(x, flip_rows(g, node.value.cols(), seq_len));
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut gt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        gt[id * d + c] += g[r * d + c];
                    }
                }
                send(*table, gt);
            }
            Op::Dropout { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
            &Op::Sum(x) => send(x, vec![g[0]; self.value(x).numel()]),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let mut gl = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        if label < 0 {
                            continue;
                        }
                        for c in 0..vocab {
                            gl[r * vocab + c] = scale * probs[r * vocab + c];
                        }
                        gl[r * vocab + label as usize] -= scale;
                    }
                }
                send(*logits, gl);
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let gs = op.backward(&values, &node.value, g, &needs);
                for (&v, gv) in inputs.iter().zip(gs) {
                    if let Some(gv) = gv {
                        send(v, gv);
                    }
                }
            }
        }
    }
}

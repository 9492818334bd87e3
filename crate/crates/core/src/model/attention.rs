//! Exact multi-head softmax attention over stacked sequences.

use crate::error::{Error, Result};
use crate::numerics::ops::softmax_in_place;
use crate::numerics::{CustomOp, Graph, Tensor, Var};

struct Layout {
    nseq: usize,
    seq_len: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

impl Layout {
    fn new(q: &Tensor, seq_len: usize, heads: usize) -> Result<Self> {
        let (rows, d) = (q.rows(), q.cols());
        if seq_len == 0 || rows % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::invalid(format!(
                "attention: {rows}x{d} input does not split into length-{seq_len} sequences and {heads} heads"
            )));
        }
        Ok(Self {
            nseq: rows / seq_len,
            seq_len,
            d,
            heads,
            dh: d / heads,
        })
    }

    fn at(&self, s: usize, t: usize, h: usize) -> usize {
        (s * self.seq_len + t) * self.d + h * self.dh
    }

    fn prob(&self, s: usize, h: usize, i: usize) -> usize {
        ((s * self.heads + h) * self.seq_len + i) * self.seq_len
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention probabilities `[nseq, heads, L, L]`. Keys with `key_mask[row] == false`
/// are excluded unless every key of that sequence is masked.
pub fn attention_probs(
    q: &Tensor,
    k: &Tensor,
    seq_len: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if q.shape() != k.shape() {
        return Err(Error::Shape {
            op: "attention",
            lhs: q.shape().to_vec(),
            rhs: k.shape().to_vec(),
        });
    }
    let lay = Layout::new(q, seq_len, heads)?;
    let scale = 1.0 / (lay.dh as f64).sqrt();
    let l = lay.seq_len;
    let mut probs = vec![0.0; lay.nseq * heads * l * l];
    for s in 0..lay.nseq {
        let allowed: Vec<bool> = match key_mask {
            Some(m) => {
                let seq = &m[s * l..(s + 1) * l];
                if seq.iter().any(|&b| b) {
                    seq.to_vec()
                } else {
                    vec![true; l]
                }
            }
            None => vec![true; l],
        };
        for h in 0..heads {
            for i in 0..l {
                let qi = &q.data()[lay.at(s, i, h)..lay.at(s, i, h) + lay.dh];
                let row = &mut probs[lay.prob(s, h, i)..lay.prob(s, h, i) + l];
                for j in 0..l {
                    row[j] = if allowed[j] {
                        let kj = &k.data()[lay.at(s, j, h)..lay.at(s, j, h) + lay.dh];
                        dot(qi, kj) * scale
                    } else {
                        f64::NEG_INFINITY
                    };
                }
                softmax_in_place(row);
            }
        }
    }
    Ok(probs)
}

struct AttentionOp {
    seq_len: usize,
    heads: usize,
    probs: Vec<f64>,
}

impl CustomOp for AttentionOp {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        g: &[f64],
        _needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let lay = Layout::new(q, self.seq_len, self.heads).expect("validated in forward");
        let (l, dh) = (lay.seq_len, lay.dh);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = vec![0.0; q.numel()];
        let mut gk = vec![0.0; k.numel()];
        let mut gv = vec![0.0; v.numel()];
        let mut dp = vec![0.0; l];
        for s in 0..lay.nseq {
            for h in 0..lay.heads {
                for i in 0..l {
                    let p = &self.probs[lay.prob(s, h, i)..lay.prob(s, h, i) + l];
                    let gi = &g[lay.at(s, i, h)..lay.at(s, i, h) + dh];
                    for j in 0..l {
                        let vj = lay.at(s, j, h);
                        dp[j] = dot(gi, &v.data()[vj..vj + dh]);
                        for c in 0..dh {
                            gv[vj + c] += p[j] * gi[c];
                        }
                    }
                    let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    let qi = lay.at(s, i, h);
                    for j in 0..l {
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = lay.at(s, j, h);
                        for c in 0..dh {
                            gq[qi + c] += ds * k.data()[kj + c];
                            gk[kj + c] += ds * q.data()[qi + c];
                        }
                    }
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }
}

/// `softmax(Q K^T / sqrt(d/heads)) V` per head and per sequence.
pub fn attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    seq_len: usize,
    heads: usize,
    key_mask: Option<&[bool]>,
) -> Result<Var> {
    let (tq, tk, tv) = (g.value(q), g.value(k), g.value(v));
    if tv.shape() != tq.shape() {
        return Err(Error::Shape {
            op: "attention",
            lhs: tq.shape().to_vec(),
            rhs: tv.shape().to_vec(),
        });
    }
    if let Some(m) = key_mask {
        if m.len() != tq.rows() {
            return Err(Error::invalid("attention key mask length differs from row count"));
        }
    }
    let probs = attention_probs(tq, tk, seq_len, heads, key_mask)?;
    let lay = Layout::new(tq, seq_len, heads)?;
    let mut out = vec![0.0; tq.numel()];
    for s in 0..lay.nseq {
        for h in 0..heads {
            for i in 0..seq_len {
                let p = &probs[lay.prob(s, h, i)..lay.prob(s, h, i) + seq_len];
                let oi = lay.at(s, i, h);
                for (j, &pj) in p.iter().enumerate() {
                    let vj = lay.at(s, j, h);
                    for c in 0..lay.dh {
                        out[oi + c] += pj * tv.data()[vj + c];
                    }
                }
            }
        }
    }
    let out = Tensor::new(tq.shape().to_vec(), out)?;
    Ok(g.custom(
        vec![q, k, v],
        out,
        Box::new(AttentionOp {
            seq_len,
            heads,
            probs,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn single_token_returns_value() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let k = g.constant(Tensor::from_rows(&[vec![-3.0, 0.5]]).unwrap());
        let v = g.constant(Tensor::from_rows(&[vec![4.0, 5.0]]).unwrap());
        let o = attention(&mut g, q, k, v, 1, 1, None).unwrap();
        assert_eq!(g.value(o).data(), &[4.0, 5.0]);
    }

    #[test]
    fn probabilities_normalize_and_respect_mask() {
        let mut rng = Rng::new(1);
        let q = Tensor::matrix(8, 4, rng.normal_vec(32, 1.0)).unwrap();
        let k = Tensor::matrix(8, 4, rng.normal_vec(32, 1.0)).unwrap();
        let mask = [true, true, true, false, true, false, false, false];
        let p = attention_probs(&q, &k, 4, 2, Some(&mask)).unwrap();
        for row in p.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // first sequence: key 3 masked
        assert_eq!(p[3], 0.0);
        // second sequence: only key 0 allowed
        let second = &p[2 * 4 * 4..];
        assert!((second[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(2);
        let (rows, d, seq_len, heads) = (6, 4, 3, 2);
        let mk = |rng: &mut Rng| Tensor::matrix(rows, d, rng.normal_vec(rows * d, 1.0)).unwrap();
        let (q0, k0, v0, w) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
        let mask = [true, true, false, true, true, true];
        let loss = |q: &Tensor, k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (q, k, v) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = attention(&mut g, q, k, v, seq_len, heads, Some(&mask)).unwrap();
            let wv = g.constant(w.clone());
            let ow = g.mul(o, wv).unwrap();
            let l = g.sum(ow);
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let (q, k, v) = (g.variable(q0.clone()), g.variable(k0.clone()), g.variable(v0.clone()));
        let o = attention(&mut g, q, k, v, seq_len, heads, Some(&mask)).unwrap();
        let wv = g.constant(w.clone());
        let ow = g.mul(o, wv).unwrap();
        let l = g.sum(ow);
        let grads = g.backward(l).unwrap();
        let h = 1e-5;
        for (which, var) in [(0, q), (1, k), (2, v)] {
            for i in 0..rows * d {
                let mut ts = [q0.clone(), k0.clone(), v0.clone()];
                ts[which].data_mut()[i] += h;
                let up = loss(&ts[0], &ts[1], &ts[2]);
                ts[which].data_mut()[i] -= 2.0 * h;
                let down = loss(&ts[0], &ts[1], &ts[2]);
                let fd = (up - down) / (2.0 * h);
                let an = grads.get(var).unwrap()[i];
                assert!((fd - an).abs() < 1e-8 || (fd - an).abs() / fd.abs().max(an.abs()) < 1e-5,
                    "input {which} idx {i}: fd={fd} an={an}");
            }
        }
    }
}

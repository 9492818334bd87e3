use crate::error::{Error, Result};
use crate::numerics::{CustomOp, Graph, Tensor, Var};
use crate::ssm::{discretize, kernel_vjp, materialize_kernel, CausalConv, SsmParams};

/// Graph handles for the trainable fields of one SSM.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub log_neg_re: Var,
    pub im: Var,
    pub c_re: Var,
    pub c_im: Var,
    pub d: Var,
    pub log_dt: Var,
}

/// Gather the columns of `seq_len`-row blocks of a row-major `[rows x cols]` buffer.
fn columns(data: &[f64], cols: usize, seq_len: usize) -> Vec<Vec<f64>> {
    let nseq = data.len() / (cols * seq_len);
    let mut out = vec![vec![0.0; seq_len]; nseq * cols];
    for s in 0..nseq {
        for t in 0..seq_len {
            let row = &data[(s * seq_len + t) * cols..(s * seq_len + t + 1) * cols];
            for (c, &v) in row.iter().enumerate() {
                out[s * cols + c][t] = v;
            }
        }
    }
    out
}

fn scatter(cols_data: &[Vec<f64>], cols: usize, seq_len: usize) -> Vec<f64> {
    let nseq = cols_data.len() / cols;
    let mut out = vec![0.0; nseq * seq_len * cols];
    for s in 0..nseq {
        for c in 0..cols {
            let col = &cols_data[s * cols + c];
            for t in 0..seq_len {
                out[(s * seq_len + t) * cols + c] = col[t];
            }
        }
    }
    out
}

fn convolve_columns(conv: &CausalConv, us: &[Vec<f64>]) -> Vec<Vec<f64>> {
    // One column per transform: packing two columns into one complex FFT would
    // make identical columns differ in the last bit.
    let l = conv.len();
    us.iter()
        .map(|u| {
            let mut y = vec![0.0; l];
            conv.forward_pair(u, None, &mut y, None);
            y
        })
        .collect()
}

fn check_rows(x: &Tensor, seq_len: usize) -> Result<()> {
    if x.shape().len() != 2 || seq_len == 0 || !x.rows().is_multiple_of(seq_len) {
        return Err(Error::invalid(format!(
            "SSM input {:?} is not a stack of length-{seq_len} sequences",
            x.shape()
        )));
    }
    Ok(())
}

/// Apply one SSM to every column of an `L x d` sequence, sharing one kernel.
pub fn ssm_apply(p: &SsmParams, x: &Tensor) -> Result<Tensor> {
    p.validate()?;
    let l = x.rows();
    check_rows(x, l)?;
    let kernel = materialize_kernel(&discretize(p), l);
    let conv = CausalConv::new(&kernel, p.d)?;
    let ys = convolve_columns(&conv, &columns(x.data(), x.cols(), l));
    Tensor::new(x.shape().to_vec(), scatter(&ys, x.cols(), l))
}

struct SsmOp {
    b_re: Vec<f64>,
    b_im: Vec<f64>,
    conjugate_pairs: bool,
    seq_len: usize,
    conv: CausalConv,
}

fn params_from(inputs: &[&Tensor], b_re: &[f64], b_im: &[f64], conjugate_pairs: bool) -> SsmParams {
    SsmParams {
        log_neg_re: inputs[1].data().to_vec(),
        im: inputs[2].data().to_vec(),
        c_re: inputs[3].data().to_vec(),
        c_im: inputs[4].data().to_vec(),
        b_re: b_re.to_vec(),
        b_im: b_im.to_vec(),
        d: inputs[5].data()[0],
        log_dt: inputs[6].data()[0],
        conjugate_pairs,
    }
}

impl CustomOp for SsmOp {
    fn name(&self) -> &'static str {
        "ssm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (cols, l) = (x.cols(), self.seq_len);
        let us = columns(x.data(), cols, l);
        let gs = columns(grad_out, cols, l);
        let mut gus = vec![vec![0.0; l]; us.len()];
        let (mut ar, mut ai) = self.conv.new_accumulator();
        let mut g_d = 0.0;
        for ((u, g), gu) in us.iter().zip(&gs).zip(gus.iter_mut()) {
            g_d += self.conv.backward_pair(u, None, g, None, gu, None, &mut ar, &mut ai);
        }
        let g_taps = self.conv.finish_taps(ar, ai);
        let p = params_from(inputs, &self.b_re, &self.b_im, self.conjugate_pairs);
        let pg = kernel_vjp(&p, &g_taps);
        let mut out = vec![
            needs[0].then(|| scatter(&gus, cols, l)),
            Some(pg.log_neg_re),
            Some(pg.im),
            Some(pg.c_re),
            Some(pg.c_im),
            Some(vec![g_d]),
            Some(vec![pg.log_dt]),
        ];
        for (slot, &n) in out.iter_mut().zip(needs).skip(1) {
            if !n {
                *slot = None;
            }
        }
        out
    }
}

/// SSM over a stack of sequences on the tape. `x` is `[nseq * seq_len, d]`;
/// `b` is the frozen input vector `B`.
pub fn ssm_layer(
    g: &mut Graph,
    x: Var,
    vars: &SsmVars,
    b_re: &[f64],
    b_im: &[f64],
    conjugate_pairs: bool,
    seq_len: usize,
) -> Result<Var> {
    let xv = g.value(x);
    check_rows(xv, seq_len)?;
    let inputs = [x, vars.log_neg_re, vars.im, vars.c_re, vars.c_im, vars.d, vars.log_dt];
    let tensors: Vec<&Tensor> = inputs.iter().map(|&v| g.value(v)).collect();
    let p = params_from(&tensors, b_re, b_im, conjugate_pairs);
    p.validate()?;
    let kernel = materialize_kernel(&discretize(&p), seq_len);
    let conv = CausalConv::new(&kernel, p.d)?;
    let cols = xv.cols();
    let ys = convolve_columns(&conv, &columns(xv.data(), cols, seq_len));
    let out = Tensor::new(xv.shape().to_vec(), scatter(&ys, cols, seq_len))?;
    let op = SsmOp {
        b_re: b_re.to_vec(),
        b_im: b_im.to_vec(),
        conjugate_pairs,
        seq_len,
        conv,
    };
    Ok(g.custom(inputs.to_vec(), out, Box::new(op)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use crate::ssm::{convolve, init_s4d, scan};

    fn vars_for(g: &mut Graph, p: &SsmParams) -> SsmVars {
        SsmVars {
            log_neg_re: g.variable(Tensor::vector(p.log_neg_re.clone())),
            im: g.variable(Tensor::vector(p.im.clone())),
            c_re: g.variable(Tensor::vector(p.c_re.clone())),
            c_im: g.variable(Tensor::vector(p.c_im.clone())),
            d: g.variable(Tensor::vector(vec![p.d])),
            log_dt: g.variable(Tensor::vector(vec![p.log_dt])),
        }
    }

    #[test]
    fn single_column_is_convolve() {
        let mut rng = Rng::new(1);
        let p = init_s4d(8, 0.01, 0.1, &mut rng).unwrap();
        let u = rng.normal_vec(10, 1.0);
        let y = ssm_apply(&p, &Tensor::matrix(10, 1, u.clone()).unwrap()).unwrap();
        let k = materialize_kernel(&discretize(&p), 10);
        assert_eq!(y.data(), convolve(&k, p.d, &u).unwrap().as_slice());
    }

    #[test]
    fn identical_columns_identical_outputs() {
        let mut rng = Rng::new(2);
        let p = init_s4d(8, 0.01, 0.1, &mut rng).unwrap();
        let u = rng.normal_vec(12, 1.0);
        let x: Vec<f64> = u.iter().flat_map(|&v| [v, v, v]).collect();
        let y = ssm_apply(&p, &Tensor::matrix(12, 3, x).unwrap()).unwrap();
        for t in 0..12 {
            assert_eq!(y.at(t, 0), y.at(t, 1));
            assert_eq!(y.at(t, 0), y.at(t, 2));
        }
    }

    #[test]
    fn matches_per_column_scan() {
        let mut rng = Rng::new(3);
        let p = init_s4d(8, 0.01, 0.1, &mut rng).unwrap();
        let x = Tensor::matrix(16, 4, rng.normal_vec(64, 1.0)).unwrap();
        let y = ssm_apply(&p, &x).unwrap();
        let d = discretize(&p);
        for c in 0..4 {
            let col: Vec<f64> = (0..16).map(|t| x.at(t, c)).collect();
            let s = scan(&d, &col);
            for t in 0..16 {
                assert!((y.at(t, c) - s[t]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stacked_sequences_are_independent() {
        let mut rng = Rng::new(4);
        let p = init_s4d(4, 0.01, 0.1, &mut rng).unwrap();
        let x = Tensor::matrix(3 * 6, 5, rng.normal_vec(90, 1.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let vars = vars_for(&mut g, &p);
        let y = ssm_layer(&mut g, xv, &vars, &p.b_re, &p.b_im, true, 6).unwrap();
        for s in 0..3 {
            let block = Tensor::matrix(6, 5, x.data()[s * 30..(s + 1) * 30].to_vec()).unwrap();
            let expect = ssm_apply(&p, &block).unwrap();
            let got = &g.value(y).data()[s * 30..(s + 1) * 30];
            assert!(expect.data().iter().zip(got).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = Rng::new(5);
        let mut p = init_s4d(4, 0.05, 0.5, &mut rng).unwrap();
        p.d = 0.3;
        let (seq_len, nseq, cols) = (7, 2, 3);
        let x = Tensor::matrix(nseq * seq_len, cols, rng.normal_vec(nseq * seq_len * cols, 1.0)).unwrap();
        let w = Tensor::matrix(nseq * seq_len, cols, rng.normal_vec(nseq * seq_len * cols, 1.0)).unwrap();
        let loss_of = |p: &SsmParams, x: &Tensor| -> f64 {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let vars = vars_for(&mut g, p);
            let y = ssm_layer(&mut g, xv, &vars, &p.b_re, &p.b_im, true, seq_len).unwrap();
            let wv = g.constant(w.clone());
            let yw = g.mul(y, wv).unwrap();
            let yy = g.mul(yw, y).unwrap();
            let l = g.sum(yy);
            g.value(l).data()[0]
        };
        let mut g = Graph::new();
        let xv = g.variable(x.clone());
        let vars = vars_for(&mut g, &p);
        let y = ssm_layer(&mut g, xv, &vars, &p.b_re, &p.b_im, true, seq_len).unwrap();
        let wv = g.constant(w.clone());
        let yw = g.mul(y, wv).unwrap();
        let yy = g.mul(yw, y).unwrap();
        let l = g.sum(yy);
        let grads = g.backward(l).unwrap();
        let h = 1e-5;
        let cmp = |an: f64, fd: f64, what: &str| {
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(err < 1e-4 || (fd - an).abs() < 1e-8, "{what}: fd={fd} an={an}");
        };
        for i in 0..x.numel() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            cmp(grads.get(xv).unwrap()[i], (loss_of(&p, &xp) - loss_of(&p, &xm)) / (2.0 * h), "x");
        }
        let fields: [(&str, Var, fn(&mut SsmParams) -> &mut Vec<f64>); 4] = [
            ("log_neg_re", vars.log_neg_re, |p| &mut p.log_neg_re),
            ("im", vars.im, |p| &mut p.im),
            ("c_re", vars.c_re, |p| &mut p.c_re),
            ("c_im", vars.c_im, |p| &mut p.c_im),
        ];
        for (name, var, field) in fields {
            for n in 0..p.modes() {
                let (mut pp, mut pm) = (p.clone(), p.clone());
                field(&mut pp)[n] += h;
                field(&mut pm)[n] -= h;
                cmp(grads.get(var).unwrap()[n], (loss_of(&pp, &x) - loss_of(&pm, &x)) / (2.0 * h), name);
            }
        }
        let (mut pp, mut pm) = (p.clone(), p.clone());
        pp.d += h;
        pm.d -= h;
        cmp(grads.get(vars.d).unwrap()[0], (loss_of(&pp, &x) - loss_of(&pm, &x)) / (2.0 * h), "d");
        let (mut pp, mut pm) = (p.clone(), p.clone());
        pp.log_dt += h;
        pm.log_dt -= h;
        cmp(grads.get(vars.log_dt).unwrap()[0], (loss_of(&pp, &x) - loss_of(&pm, &x)) / (2.0 * h), "log_dt");
    }
}

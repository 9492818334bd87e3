use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{attention_probs, BlockIds, Direction, GatedRoute, Model, RouteIds};
use crate::numerics::{ops::flip_rows, Graph, Rng, Tensor};
use crate::ssm::{discretize, materialize_kernel, ssm_apply, ssm_layer, SsmParams, SsmVars};

/// Outputs count as changed when they move by at least this much.
pub const LEAK_THRESHOLD: f64 = 1e-12;

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CausalityReport {
    pub seq_len: usize,
    pub trials: usize,
    /// Forward outputs at `k < j` that moved when `u_j` was perturbed.
    pub forward_violations: usize,
    /// Backward outputs at `k > j` that moved.
    pub backward_violations: usize,
    pub max_forward_leak: f64,
    pub max_backward_leak: f64,
}

impl CausalityReport {
    pub fn passed(&self) -> bool {
        self.forward_violations == 0 && self.backward_violations == 0
    }
}

fn column(u: &[f64]) -> Tensor {
    Tensor::vector(u.to_vec()).reshape(vec![u.len(), 1]).expect("column shape")
}

fn forward_branch(p: &SsmParams, u: &[f64]) -> Result<Vec<f64>> {
    Ok(ssm_apply(p, &column(u))?.into_data())
}

fn backward_branch(p: &SsmParams, u: &[f64]) -> Result<Vec<f64>> {
    let l = u.len();
    let y = ssm_apply(p, &column(&flip_rows(u, 1, l)))?;
    Ok(flip_rows(y.data(), 1, l))
}

/// Perturb one random position per trial and count outputs on the wrong side that move.
pub fn probe_causality(
    fwd: &SsmParams,
    bwd: &SsmParams,
    seq_len: usize,
    trials: usize,
    seed: u64,
) -> Result<CausalityReport> {
    if seq_len == 0 {
        return Err(Error::invalid("seq_len must be positive"));
    }
    let mut rng = Rng::new(seed);
    let mut rep = CausalityReport {
        seq_len,
        trials,
        ..Default::default()
    };
    for _ in 0..trials {
        let u = rng.normal_vec(seq_len, 1.0);
        let j = rng.below(seq_len as u64) as usize;
        let mut v = u.clone();
        v[j] += 1.0 + rng.uniform();
        let (f0, f1) = (forward_branch(fwd, &u)?, forward_branch(fwd, &v)?);
        let (b0, b1) = (backward_branch(bwd, &u)?, backward_branch(bwd, &v)?);
        for k in 0..j {
            let d = (f1[k] - f0[k]).abs();
            rep.max_forward_leak = rep.max_forward_leak.max(d);
            rep.forward_violations += usize::from(d >= LEAK_THRESHOLD);
        }
        for k in j + 1..seq_len {
            let d = (b1[k] - b0[k]).abs();
            rep.max_backward_leak = rep.max_backward_leak.max(d);
            rep.backward_violations += usize::from(d >= LEAK_THRESHOLD);
        }
    }
    Ok(rep)
}

/// Causality probe on one layer's SSM pair.
pub fn probe_model_causality(model: &Model, layer: usize, seq_len: usize, trials: usize, seed: u64) -> Result<CausalityReport> {
    let (Some(f), Some(b)) = (
        model.ssm_params(layer, Direction::Forward),
        model.ssm_params(layer, Direction::Backward),
    ) else {
        return Err(Error::Unsupported(format!("layer {layer} has no SSM routing")));
    };
    probe_causality(&f, &b, seq_len, trials, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StaticRoutingReport {
    /// Largest difference between the kernels materialized for the two inputs.
    pub kernel_max_diff: f64,
    /// Largest difference between the input-output Jacobians at the two inputs.
    pub routing_max_diff: f64,
    pub outputs_max_diff: f64,
}

/// Input-output Jacobian `dy_k / du_j` of one SSM column at `u`, via the tape.
pub fn ssm_routing_matrix(p: &SsmParams, u: &[f64]) -> Result<Vec<f64>> {
    let l = u.len();
    let mut g = Graph::new();
    let x = g.variable(column(u));
    let vars = SsmVars {
        log_neg_re: g.constant(Tensor::vector(p.log_neg_re.clone())),
        im: g.constant(Tensor::vector(p.im.clone())),
        c_re: g.constant(Tensor::vector(p.c_re.clone())),
        c_im: g.constant(Tensor::vector(p.c_im.clone())),
        d: g.constant(Tensor::scalar(p.d)),
        log_dt: g.constant(Tensor::scalar(p.log_dt)),
    };
    let y = ssm_layer(&mut g, x, &vars, &p.b_re, &p.b_im, p.conjugate_pairs, l)?;
    let mut jac = vec![0.0; l * l];
    for k in 0..l {
        let mut e = vec![0.0; l];
        e[k] = 1.0;
        let ev = g.constant(column(&e));
        let picked = g.mul(y, ev)?;
        let s = g.sum(picked);
        let grads = g.backward(s)?;
        let row = grads.get(x).ok_or_else(|| Error::invalid("no gradient reached the input"))?;
        jac[k * l..(k + 1) * l].copy_from_slice(row);
    }
    Ok(jac)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// SSM routing depends only on parameters: kernels and Jacobians agree for any two inputs.
pub fn probe_static_routing(p: &SsmParams, u1: &[f64], u2: &[f64]) -> Result<StaticRoutingReport> {
    if u1.len() != u2.len() || u1.is_empty() {
        return Err(Error::invalid("static-routing probe needs two non-empty inputs of equal length"));
    }
    let l = u1.len();
    // Rebuild the kernel from scratch per input, as a layer call would.
    let k1 = materialize_kernel(&discretize(p), l);
    let k2 = materialize_kernel(&discretize(p), l);
    Ok(StaticRoutingReport {
        kernel_max_diff: max_diff(&k1.taps, &k2.taps),
        routing_max_diff: max_diff(&ssm_routing_matrix(p, u1)?, &ssm_routing_matrix(p, u2)?),
        outputs_max_diff: max_diff(&forward_branch(p, u1)?, &forward_branch(p, u2)?),
    })
}

/// Largest change of attention probabilities between two inputs `x1`, `x2`
/// (`L x d`) under projections `w_q`, `w_k`.
pub fn probe_attention_routing(w_q: &Tensor, w_k: &Tensor, x1: &Tensor, x2: &Tensor, heads: usize) -> Result<f64> {
    let probs = |x: &Tensor| -> Result<Vec<f64>> {
        let q = crate::numerics::matmul(x, w_q)?;
        let k = crate::numerics::matmul(x, w_k)?;
        attention_probs(&q, &k, x.rows(), heads, None)
    };
    Ok(max_diff(&probs(x1)?, &probs(x2)?))
}

/// First-layer forward-branch activations: `W_u1 SSM_f(F)` for gated blocks,
/// `proj_f(SSM_f(x))` for stacked SSM blocks. Causal in the token positions.
pub fn first_layer_forward_branch(model: &Model, tokens: &[u32]) -> Result<Tensor> {
    let l = tokens.len();
    let mut g = Graph::new();
    let vocab = model.cfg.vocab_size;
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad, vocab_size: vocab });
    }
    let table = g.param(&model.store, model.embed.token);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let x = g.embedding(table, &ids)?;
    let store = &model.store;
    let out = match model.blocks.first() {
        Some(BlockIds::Gated(b)) => {
            let GatedRoute::Ssm { fwd, .. } = &b.route else {
                return Err(Error::Unsupported("first layer is attention-routed".into()));
            };
            let xn = b.ln.apply(&mut g, store, x, model.cfg.ln_eps)?;
            let f = b.w_f.apply(&mut g, store, xn)?;
            let f = g.gelu(f);
            let s = fwd.apply(&mut g, store, f, l)?;
            b.w_u1.apply(&mut g, store, s)?
        }
        Some(BlockIds::Stacked(b)) => {
            let RouteIds::Ssm { fwd, proj_fwd, .. } = &b.route else {
                return Err(Error::Unsupported("first layer is attention-routed".into()));
            };
            let s = fwd.apply(&mut g, store, x, l)?;
            proj_fwd.apply(&mut g, store, s)?
        }
        None => return Err(Error::invalid("model has no layers")),
    };
    Ok(g.value(out).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExtensionReport {
    pub old_len: usize,
    pub new_len: usize,
    /// Over all layers and directions: max |K_new[l] - K_old[l]| for `l < old_len`.
    pub kernel_prefix_max_diff: f64,
    /// First-layer forward-branch activations on a prefix-matched long input.
    pub activation_max_diff: f64,
}

/// Compare kernels and forward-branch activations at `old_len` and `new_len`.
/// `long` must start with `short`.
pub fn probe_length_extension(model: &Model, short: &[u32], long: &[u32]) -> Result<ExtensionReport> {
    let (old_len, new_len) = (short.len(), long.len());
    if new_len <= old_len || long[..old_len] != *short {
        return Err(Error::invalid("long input must strictly extend the short input"));
    }
    let mut kdiff: f64 = 0.0;
    for layer in 0..model.blocks.len() {
        for dir in [Direction::Forward, Direction::Backward] {
            let Some(p) = model.ssm_params(layer, dir) else {
                return Err(Error::Unsupported("length extension probe needs SSM routing".into()));
            };
            let disc = discretize(&p);
            let a = materialize_kernel(&disc, old_len);
            let b = materialize_kernel(&disc, new_len);
            kdiff = kdiff.max(max_diff(&a.taps, &b.taps[..old_len]));
        }
    }
    let s = first_layer_forward_branch(model, short)?;
    let t = first_layer_forward_branch(model, long)?;
    let cols = s.cols();
    Ok(ExtensionReport {
        old_len,
        new_len,
        kernel_prefix_max_diff: kdiff,
        activation_max_diff: max_diff(s.data(), &t.data()[..old_len * cols]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, ModelConfig, Routing};
    use crate::ssm::init_s4d;

    fn pair() -> (SsmParams, SsmParams) {
        let mut r = Rng::new(4);
        (init_s4d(8, 0.001, 0.1, &mut r).unwrap(), init_s4d(8, 0.001, 0.1, &mut r).unwrap())
    }

    #[test]
    fn random_trials_have_no_violations() {
        let (f, b) = pair();
        let rep = probe_causality(&f, &b, 64, 20, 1).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn last_and_first_position_perturbations() {
        let (f, b) = pair();
        let u = Rng::new(2).normal_vec(16, 1.0);
        let mut v = u.clone();
        v[15] += 1.0;
        let (y0, y1) = (forward_branch(&f, &u).unwrap(), forward_branch(&f, &v).unwrap());
        assert!(max_diff(&y0[..15], &y1[..15]) < LEAK_THRESHOLD);
        let mut w = u.clone();
        w[0] += 1.0;
        let (z0, z1) = (backward_branch(&b, &u).unwrap(), backward_branch(&b, &w).unwrap());
        assert!(max_diff(&z0[1..], &z1[1..]) < LEAK_THRESHOLD);
        // The branches do reach the other side.
        assert!(max_diff(&z0[..1], &z1[..1]) > 0.0);
        assert!((y1[15] - y0[15]).abs() > 0.0);
    }

    #[test]
    fn routing_is_static_for_ssm_not_attention() {
        let (f, _) = pair();
        let mut r = Rng::new(9);
        let (u1, u2) = (r.normal_vec(12, 1.0), r.normal_vec(12, 1.0));
        let rep = probe_static_routing(&f, &u1, &u2).unwrap();
        assert_eq!(rep.kernel_max_diff, 0.0);
        assert_eq!(rep.routing_max_diff, 0.0);
        assert!(rep.outputs_max_diff > 0.0);
        let w = |r: &mut Rng| Tensor::matrix(4, 4, r.normal_vec(16, 1.0)).unwrap();
        let (wq, wk, x1, x2) = (w(&mut r), w(&mut r), w(&mut r), w(&mut r));
        assert!(probe_attention_routing(&wq, &wk, &x1, &x2, 2).unwrap() > 0.0);
    }

    #[test]
    fn routing_matrix_is_lower_triangular_toeplitz() {
        let (f, _) = pair();
        let jac = ssm_routing_matrix(&f, &[0.5; 6]).unwrap();
        let k = materialize_kernel(&discretize(&f), 6);
        for row in 0..6 {
            for col in 0..6 {
                let v = jac[row * 6 + col];
                if col > row {
                    assert!(v.abs() < 1e-12);
                } else {
                    let expect = k.taps[row - col] + if row == col { f.d } else { 0.0 };
                    assert!((v - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn extension_prefix_agreement() {
        let m = Model::new(ModelConfig::toy(Arch::Gated, Routing::Ssm), 2).unwrap();
        let long: Vec<u32> = (0..128).map(|i| 5 + (i * 37 % 500) as u32).collect();
        let rep = probe_length_extension(&m, &long[..32], &long).unwrap();
        assert!(rep.kernel_prefix_max_diff < 1e-12);
        assert!(rep.activation_max_diff < 1e-10, "{rep:?}");
    }
}

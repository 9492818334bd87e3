use crate::error::Result;
use crate::model::attention::attention;
use crate::model::network::{GatedIds, GatedRoute, RouteIds, StackedIds};
use crate::model::ModelConfig;
use crate::numerics::{Graph, ParamStore, Rng, Var};

fn maybe_dropout(g: &mut Graph, x: Var, rate: f64, rng: Option<&mut Rng>) -> Var {
    match rng {
        Some(r) if rate > 0.0 => g.dropout(x, rate, r),
        _ => x,
    }
}

fn flipped_mask(mask: &[bool], seq_len: usize) -> Vec<bool> {
    mask.chunks(seq_len)
        .flat_map(|c| c.iter().rev().copied())
        .collect()
}

/// Gated unit:
/// `X = LN(x)`, `V = σ(W_v X)`, `F = σ(W_f X)`, `B = σ(W_b flip X)`,
/// `U1 = W_u1 R_f(F)`, `U2 = W_u2 R_b(B)`, `U = σ(W_u (U1 ⊙ flip U2))`, `out = x + W_o (U ⊙ V)`.
#[allow(clippy::too_many_arguments)]
pub fn gated_block(
    g: &mut Graph,
    x: Var,
    ids: &GatedIds,
    store: &ParamStore,
    cfg: &ModelConfig,
    seq_len: usize,
    key_mask: Option<&[bool]>,
    dropout: Option<&mut Rng>,
) -> Result<Var> {
    let xn = ids.ln.apply(g, store, x, cfg.ln_eps)?;
    let v = ids.w_v.apply(g, store, xn)?;
    let v = g.gelu(v);
    let f = ids.w_f.apply(g, store, xn)?;
    let f = g.gelu(f);
    let xf = g.flip(xn, seq_len)?;
    let b = ids.w_b.apply(g, store, xf)?;
    let b = g.gelu(b);
    let (rf, rb) = match &ids.route {
        GatedRoute::Ssm { fwd, bwd } => (
            fwd.apply(g, store, f, seq_len)?,
            bwd.apply(g, store, b, seq_len)?,
        ),
        GatedRoute::Attention {
            q_fwd,
            k_fwd,
            q_bwd,
            k_bwd,
        } => {
            let back_mask = key_mask.map(|m| flipped_mask(m, seq_len));
            let q = q_fwd.apply(g, store, f)?;
            let k = k_fwd.apply(g, store, f)?;
            let rf = attention(g, q, k, f, seq_len, cfg.n_heads, key_mask)?;
            let q = q_bwd.apply(g, store, b)?;
            let k = k_bwd.apply(g, store, b)?;
            let rb = attention(g, q, k, b, seq_len, cfg.n_heads, back_mask.as_deref())?;
            (rf, rb)
        }
    };
    let u1 = ids.w_u1.apply(g, store, rf)?;
    let u2 = ids.w_u2.apply(g, store, rb)?;
    let u2 = g.flip(u2, seq_len)?;
    let mixed = g.mul(u1, u2)?;
    let u = ids.w_u.apply(g, store, mixed)?;
    let u = g.gelu(u);
    let uv = g.mul(u, v)?;
    let o = ids.w_o.apply(g, store, uv)?;
    let o = maybe_dropout(g, o, cfg.dropout, dropout);
    g.add(o, x)
}

/// Post-LN layout: `h = LN(x + Route(x))`, `out = LN(h + FFN(h))`.
#[allow(clippy::too_many_arguments)]
pub fn stacked_block(
    g: &mut Graph,
    x: Var,
    ids: &StackedIds,
    store: &ParamStore,
    cfg: &ModelConfig,
    seq_len: usize,
    key_mask: Option<&[bool]>,
    mut dropout: Option<&mut Rng>,
) -> Result<Var> {
    let routed = match &ids.route {
        RouteIds::Attention { q, k, v, o } => {
            let (qv, kv, vv) = (
                q.apply(g, store, x)?,
                k.apply(g, store, x)?,
                v.apply(g, store, x)?,
            );
            let a = attention(g, qv, kv, vv, seq_len, cfg.n_heads, key_mask)?;
            o.apply(g, store, a)?
        }
        RouteIds::Ssm {
            fwd,
            bwd,
            proj_fwd,
            proj_bwd,
        } => {
            let h = fwd.apply(g, store, x, seq_len)?;
            let h = proj_fwd.apply(g, store, h)?;
            let h = g.flip(h, seq_len)?;
            let h = bwd.apply(g, store, h, seq_len)?;
            let h = g.flip(h, seq_len)?;
            proj_bwd.apply(g, store, h)?
        }
    };
    let routed = maybe_dropout(g, routed, cfg.dropout, dropout.as_deref_mut());
    let h = g.add(x, routed)?;
    let h = ids.ln1.apply(g, store, h, cfg.ln_eps)?;
    let f = ids.ffn_in.apply(g, store, h)?;
    let f = g.gelu(f);
    let f = ids.ffn_out.apply(g, store, f)?;
    let f = maybe_dropout(g, f, cfg.dropout, dropout);
    let out = g.add(h, f)?;
    ids.ln2.apply(g, store, out, cfg.ln_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Arch, BlockIds, Model, Routing};
    use crate::numerics::{ParamId, Tensor};

    fn small(arch: Arch, routing: Routing, d: usize, n_state: usize, heads: usize) -> Model {
        small_with_std(arch, routing, d, n_state, heads, 0.02)
    }

    fn small_with_std(arch: Arch, routing: Routing, d: usize, n_state: usize, heads: usize, std: f64) -> Model {
        let mut cfg = ModelConfig::toy(arch, routing);
        cfg.n_layers = 1;
        cfg.d_model = d;
        cfg.intermediate = if arch == Arch::Gated { 3 * d } else { 4 * d };
        cfg.n_state = n_state;
        cfg.n_heads = heads;
        cfg.vocab_size = 16;
        cfg.init_std = std;
        Model::new(cfg, 11).unwrap()
    }

    fn run_block(m: &Model, g: &mut Graph, x: Var, seq_len: usize) -> Var {
        match &m.blocks[0] {
            BlockIds::Gated(ids) => {
                gated_block(g, x, ids, &m.store, &m.cfg, seq_len, None, None).unwrap()
            }
            BlockIds::Stacked(ids) => {
                stacked_block(g, x, ids, &m.store, &m.cfg, seq_len, None, None).unwrap()
            }
        }
    }

    fn block_out(m: &Model, x: &Tensor, seq_len: usize) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = run_block(m, &mut g, xv, seq_len);
        g.value(y).clone()
    }

    fn set(m: &mut Model, name: &str, f: impl Fn(usize, usize) -> f64) {
        let id = m.store.id(name).unwrap();
        let t = &mut m.store.get_mut(id).value;
        let cols = if t.shape().len() == 2 { t.cols() } else { t.numel() };
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = f(i / cols, i % cols);
        }
    }

    #[test]
    fn zero_output_projection_is_identity() {
        let mut m = small(Arch::Gated, Routing::Ssm, 4, 4, 1);
        set(&mut m, "layer0.w_o", |_, _| 0.0);
        let x = Tensor::matrix(8, 4, Rng::new(2).normal_vec(32, 1.0)).unwrap();
        assert_eq!(block_out(&m, &x, 8), x);
    }

    #[test]
    fn all_zero_weights_pass_through() {
        let mut m = small(Arch::Gated, Routing::Ssm, 4, 4, 1);
        let names: Vec<String> = m.store.iter().map(|(_, p)| p.name.clone()).collect();
        for n in names.iter().filter(|n| n.starts_with("layer0.w_") || n.ends_with("ln.bias")) {
            set(&mut m, n, |_, _| 0.0);
        }
        let x = Tensor::matrix(8, 4, Rng::new(5).normal_vec(32, 1.0)).unwrap();
        assert_eq!(block_out(&m, &x, 8), x);
    }

    #[test]
    fn gated_intermediate_shapes() {
        let m = small(Arch::Gated, Routing::Ssm, 4, 4, 1);
        let BlockIds::Gated(ids) = m.blocks[0] else { unreachable!() };
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(8, 4, Rng::new(1).normal_vec(32, 1.0)).unwrap());
        let v = ids.w_v.apply(&mut g, &m.store, x).unwrap();
        let u = ids.w_u.apply(&mut g, &m.store, x).unwrap();
        assert_eq!(g.value(v).shape(), &[8, 12]);
        assert_eq!(g.value(u).shape(), &[8, 12]);
    }

    #[test]
    fn single_token_attention_route() {
        let mut m = small(Arch::Stacked, Routing::Attention, 4, 4, 1);
        // Check the route alone: with L = 1 softmax is 1 so Route(x) = x W_v W_o.
        let x = Tensor::matrix(1, 4, vec![0.3, -1.0, 2.0, 0.5]).unwrap();
        let BlockIds::Stacked(ids) = m.blocks[0] else { unreachable!() };
        let RouteIds::Attention { v, o, .. } = ids.route else { unreachable!() };
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let routed = match &ids.route {
            RouteIds::Attention { q, k, v, o } => {
                let (a, b, c) = (
                    q.apply(&mut g, &m.store, xv).unwrap(),
                    k.apply(&mut g, &m.store, xv).unwrap(),
                    v.apply(&mut g, &m.store, xv).unwrap(),
                );
                let att = attention(&mut g, a, b, c, 1, 1, None).unwrap();
                o.apply(&mut g, &m.store, att).unwrap()
            }
            _ => unreachable!(),
        };
        let wv = m.store.value(v.w);
        let wo = m.store.value(o.w);
        let expect = crate::numerics::matmul(&crate::numerics::matmul(&x, wv).unwrap(), wo).unwrap();
        assert!(g.value(routed).max_abs_diff(&expect) < 1e-12);
        // And the block is deterministic.
        set(&mut m, "layer0.ffn_out", |_, _| 0.0);
        assert_eq!(block_out(&m, &x, 1), block_out(&m, &x, 1));
    }

    #[test]
    fn identity_ssm_route() {
        let mut m = small(Arch::Stacked, Routing::Ssm, 3, 2, 1);
        // Kernel taps (1, 0, ...) come from C ≈ 0 plus D = 1; the route is then
        // proj_b(flip(D * flip(proj_f(D * x)))) = x with identity projections.
        for dir in ["ssm_fwd", "ssm_bwd"] {
            set(&mut m, &format!("layer0.{dir}.c_re"), |_, _| 0.0);
            set(&mut m, &format!("layer0.{dir}.c_im"), |_, _| 0.0);
            set(&mut m, &format!("layer0.{dir}.d"), |_, _| 1.0);
        }
        for p in ["proj_fwd", "proj_bwd"] {
            set(&mut m, &format!("layer0.{p}"), |r, c| if r == c { 1.0 } else { 0.0 });
        }
        let BlockIds::Stacked(ids) = m.blocks[0] else { unreachable!() };
        let RouteIds::Ssm { fwd, bwd, proj_fwd, proj_bwd } = ids.route else { unreachable!() };
        let x = Tensor::matrix(5, 3, Rng::new(3).normal_vec(15, 1.0)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let h = fwd.apply(&mut g, &m.store, xv, 5).unwrap();
        let h = proj_fwd.apply(&mut g, &m.store, h).unwrap();
        let h = g.flip(h, 5).unwrap();
        let h = bwd.apply(&mut g, &m.store, h, 5).unwrap();
        let h = g.flip(h, 5).unwrap();
        let r = proj_bwd.apply(&mut g, &m.store, h).unwrap();
        assert!(g.value(r).max_abs_diff(&x) < 1e-15);
    }

    /// Every parameter gradient of one block against central differences.
    fn check_block_gradients(m: &mut Model, seq_len: usize) {
        let d = m.cfg.d_model;
        let x = Tensor::matrix(seq_len, d, Rng::new(8).normal_vec(seq_len * d, 1.0)).unwrap();
        let w = Rng::new(9).normal_vec(seq_len * d, 1.0);
        let objective = |m: &Model| -> (f64, Graph, Var) {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = run_block(m, &mut g, xv, seq_len);
            let wv = g.constant(Tensor::matrix(seq_len, d, w.clone()).unwrap());
            let p = g.mul(y, wv).unwrap();
            let s = g.sum(p);
            (g.value(s).data()[0], g, s)
        };
        let (_, g, s) = objective(m);
        let grads = g.backward(s).unwrap();
        m.store.zero_grad();
        m.store.accumulate(&g, &grads);
        let ids: Vec<ParamId> = m.store.iter().filter(|(_, p)| p.trainable).map(|(i, _)| i).collect();
        let mut checked = 0;
        for id in ids {
            let name = m.store.get(id).name.clone();
            if !name.starts_with("layer0") {
                continue;
            }
            let n = m.store.value(id).numel();
            for j in (0..n).step_by((n / 6).max(1)) {
                let h = 1e-5;
                let orig = m.store.value(id).data()[j];
                m.store.get_mut(id).value.data_mut()[j] = orig + h;
                let up = objective(m).0;
                m.store.get_mut(id).value.data_mut()[j] = orig - h;
                let dn = objective(m).0;
                m.store.get_mut(id).value.data_mut()[j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = m.store.get(id).grad[j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(rel < 1e-4, "{name}[{j}]: fd {fd} vs analytic {an} (rel {rel})");
                checked += 1;
            }
        }
        assert!(checked > 20);
    }

    #[test]
    fn gated_ssm_gradients() {
        let mut m = small(Arch::Gated, Routing::Ssm, 8, 4, 1);
        check_block_gradients(&mut m, 16);
    }

    #[test]
    fn gated_attention_gradients() {
        let mut m = small(Arch::Gated, Routing::Attention, 8, 4, 2);
        check_block_gradients(&mut m, 6);
    }

    #[test]
    fn stacked_attention_gradients() {
        let mut m = small(Arch::Stacked, Routing::Attention, 8, 4, 2);
        check_block_gradients(&mut m, 16);
    }

    #[test]
    fn stacked_ssm_gradients() {
        let mut m = small(Arch::Stacked, Routing::Ssm, 8, 4, 1);
        check_block_gradients(&mut m, 16);
    }

    #[test]
    fn bidirectional_coverage() {
        // O(1) weights so the multiplicative path is far above rounding.
        let m = small_with_std(Arch::Gated, Routing::Ssm, 4, 4, 1, 0.5);
        let base = Tensor::matrix(8, 4, Rng::new(4).normal_vec(32, 1.0)).unwrap();
        let y0 = block_out(&m, &base, 8);
        for j in [0, 3, 7] {
            let mut x = base.clone();
            x.data_mut()[j * 4] += 1e-2;
            let y = block_out(&m, &x, 8);
            for k in 0..8 {
                let moved = (0..4).any(|c| (y.at(k, c) - y0.at(k, c)).abs() > 1e-9);
                assert!(moved, "position {j} does not reach {k}");
            }
        }
    }
}

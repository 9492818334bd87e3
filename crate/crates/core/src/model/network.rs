use crate::error::{Error, Result};
use crate::model::blocks::{gated_block, stacked_block};
use crate::model::{Arch, ModelConfig, Routing};
use crate::numerics::{Graph, ParamId, ParamStore, Rng, Tensor, Var};
use crate::ssm::{init_s4d, SsmParams, SsmVars};

/// PAD token id; attention never attends to PAD keys.
pub const PAD_ID: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// Projection `x W (+ b)` with `W: [in x out]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormIds {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormIds {
    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, eps: f64) -> Result<Var> {
        let (gain, bias) = (g.param(store, self.gain), g.param(store, self.bias));
        g.layer_norm(x, gain, bias, eps)
    }
}

/// Trainable SSM fields. `B` is the frozen vector `1 + 0i`.
#[derive(Clone, Copy, Debug)]
pub struct SsmIds {
    pub log_neg_re: ParamId,
    pub im: ParamId,
    pub c_re: ParamId,
    pub c_im: ParamId,
    pub d: ParamId,
    pub log_dt: ParamId,
}

impl SsmIds {
    pub fn params(&self, store: &ParamStore) -> SsmParams {
        let modes = store.value(self.log_neg_re).numel();
        SsmParams {
            log_neg_re: store.value(self.log_neg_re).data().to_vec(),
            im: store.value(self.im).data().to_vec(),
            c_re: store.value(self.c_re).data().to_vec(),
            c_im: store.value(self.c_im).data().to_vec(),
            b_re: vec![1.0; modes],
            b_im: vec![0.0; modes],
            d: store.scalar(self.d),
            log_dt: store.scalar(self.log_dt),
            conjugate_pairs: true,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var, seq_len: usize) -> Result<Var> {
        let vars = SsmVars {
            log_neg_re: g.param(store, self.log_neg_re),
            im: g.param(store, self.im),
            c_re: g.param(store, self.c_re),
            c_im: g.param(store, self.c_im),
            d: g.param(store, self.d),
            log_dt: g.param(store, self.log_dt),
        };
        let modes = store.value(self.log_neg_re).numel();
        crate::ssm::ssm_layer(g, x, &vars, &vec![1.0; modes], &vec![0.0; modes], true, seq_len)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GatedIds {
    pub ln: LayerNormIds,
    pub w_v: Linear,
    pub w_f: Linear,
    pub w_b: Linear,
    pub w_u1: Linear,
    pub w_u2: Linear,
    pub w_u: Linear,
    pub w_o: Linear,
    pub route: GatedRoute,
}

/// Sequence mixer inside the gated unit. The attention form keeps the
/// forward/backward split: each direction has its own query/key projections
/// and attends over the (possibly flipped) gate input directly.
#[derive(Clone, Copy, Debug)]
pub enum GatedRoute {
    Ssm { fwd: SsmIds, bwd: SsmIds },
    Attention { q_fwd: Linear, k_fwd: Linear, q_bwd: Linear, k_bwd: Linear },
}

#[derive(Clone, Copy, Debug)]
pub enum RouteIds {
    Attention {
        q: Linear,
        k: Linear,
        v: Linear,
        o: Linear,
    },
    Ssm {
        fwd: SsmIds,
        bwd: SsmIds,
        proj_fwd: Linear,
        proj_bwd: Linear,
    },
}

#[derive(Clone, Copy, Debug)]
pub struct StackedIds {
    pub route: RouteIds,
    pub ln1: LayerNormIds,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ln2: LayerNormIds,
}

#[derive(Clone, Copy, Debug)]
pub enum BlockIds {
    Gated(GatedIds),
    Stacked(StackedIds),
}

impl BlockIds {
    /// Forward and backward SSMs of this layer, if it routes with SSMs.
    pub fn ssms(&self) -> Option<(SsmIds, SsmIds)> {
        match self {
            BlockIds::Gated(GatedIds {
                route: GatedRoute::Ssm { fwd, bwd },
                ..
            }) => Some((*fwd, *bwd)),
            BlockIds::Stacked(StackedIds {
                route: RouteIds::Ssm { fwd, bwd, .. },
                ..
            }) => Some((*fwd, *bwd)),
            _ => None,
        }
    }
}

/// Token table (tied with the output projection), optional positions, MLM head.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingIds {
    pub token: ParamId,
    pub position: Option<ParamId>,
    pub head_dense: Linear,
    pub head_ln: LayerNormIds,
    pub out_bias: ParamId,
}

/// Parameter factory: random init when an RNG is present, zeros otherwise.
struct Builder<'a> {
    store: ParamStore,
    rng: Option<&'a mut Rng>,
    cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let data = match self.rng.as_deref_mut() {
            Some(r) => r.normal_vec(rows * cols, self.cfg.init_std),
            None => vec![0.0; rows * cols],
        };
        self.store.add(name, Tensor::matrix(rows, cols, data)?, true, true)
    }

    fn linear(&mut self, name: String, rows: usize, cols: usize) -> Result<Linear> {
        let w = self.weight(name.clone(), rows, cols)?;
        let b = if self.cfg.use_bias {
            Some(self.store.add(format!("{name}.bias"), Tensor::zeros(&[cols]), true, false)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn layer_norm(&mut self, name: &str) -> Result<LayerNormIds> {
        let d = self.cfg.d_model;
        Ok(LayerNormIds {
            gain: self.store.add(format!("{name}.gain"), Tensor::full(&[d], 1.0), true, false)?,
            bias: self.store.add(format!("{name}.bias"), Tensor::zeros(&[d]), true, false)?,
        })
    }

    fn ssm(&mut self, name: &str) -> Result<SsmIds> {
        let cfg = self.cfg;
        let p = match self.rng.as_deref_mut() {
            Some(r) => init_s4d(cfg.n_state, cfg.dt_min, cfg.dt_max, r)?,
            None => init_s4d(cfg.n_state, cfg.dt_min, cfg.dt_max, &mut Rng::new(0))?,
        };
        let mut add = |field: &str, data: Vec<f64>, trainable: bool| {
            self.store
                .add(format!("{name}.{field}"), Tensor::vector(data), trainable, false)
        };
        Ok(SsmIds {
            log_neg_re: add("log_neg_re", p.log_neg_re, true)?,
            im: add("im", p.im, cfg.train_ssm_imag)?,
            c_re: add("c_re", p.c_re, true)?,
            c_im: add("c_im", p.c_im, true)?,
            d: add("d", vec![p.d], true)?,
            log_dt: add("log_dt", vec![p.log_dt], true)?,
        })
    }
}

/// A complete masked language model.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub embed: EmbeddingIds,
    pub blocks: Vec<BlockIds>,
}

impl Model {
    /// Random initialization from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Self::build(cfg, Some(&mut rng))
    }

    /// Same layout with zero weights (used when loading).
    pub fn skeleton(cfg: ModelConfig) -> Result<Self> {
        Self::build(cfg, None)
    }

    fn build(cfg: ModelConfig, rng: Option<&mut Rng>) -> Result<Self> {
        cfg.validate()?;
        let (d, inter) = (cfg.d_model, cfg.intermediate);
        let mut b = Builder {
            store: ParamStore::new(),
            rng,
            cfg: &cfg,
        };
        let token = b.weight("embed.token".into(), cfg.vocab_size, d)?;
        let position = if cfg.use_position_embeddings {
            Some(b.weight("embed.position".into(), cfg.max_len, d)?)
        } else {
            None
        };
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let p = format!("layer{i}");
            let block = match cfg.arch {
                Arch::Gated => {
                    let ln = b.layer_norm(&format!("{p}.ln"))?;
                    BlockIds::Gated(GatedIds {
                        ln,
                        w_v: b.linear(format!("{p}.w_v"), d, inter)?,
                        w_f: b.linear(format!("{p}.w_f"), d, d)?,
                        w_b: b.linear(format!("{p}.w_b"), d, d)?,
                        w_u1: b.linear(format!("{p}.w_u1"), d, d)?,
                        w_u2: b.linear(format!("{p}.w_u2"), d, d)?,
                        w_u: b.linear(format!("{p}.w_u"), d, inter)?,
                        w_o: b.linear(format!("{p}.w_o"), inter, d)?,
                        route: match cfg.routing {
                            Routing::Ssm => GatedRoute::Ssm {
                                fwd: b.ssm(&format!("{p}.ssm_fwd"))?,
                                bwd: b.ssm(&format!("{p}.ssm_bwd"))?,
                            },
                            Routing::Attention => GatedRoute::Attention {
                                q_fwd: b.linear(format!("{p}.attn_fwd.q"), d, d)?,
                                k_fwd: b.linear(format!("{p}.attn_fwd.k"), d, d)?,
                                q_bwd: b.linear(format!("{p}.attn_bwd.q"), d, d)?,
                                k_bwd: b.linear(format!("{p}.attn_bwd.k"), d, d)?,
                            },
                        },
                    })
                }
                Arch::Stacked => {
                    let route = match cfg.routing {
                        Routing::Attention => RouteIds::Attention {
                            q: b.linear(format!("{p}.attn.q"), d, d)?,
                            k: b.linear(format!("{p}.attn.k"), d, d)?,
                            v: b.linear(format!("{p}.attn.v"), d, d)?,
                            o: b.linear(format!("{p}.attn.o"), d, d)?,
                        },
                        Routing::Ssm => RouteIds::Ssm {
                            fwd: b.ssm(&format!("{p}.ssm_fwd"))?,
                            bwd: b.ssm(&format!("{p}.ssm_bwd"))?,
                            proj_fwd: b.linear(format!("{p}.proj_fwd"), d, d)?,
                            proj_bwd: b.linear(format!("{p}.proj_bwd"), d, d)?,
                        },
                    };
                    BlockIds::Stacked(StackedIds {
                        route,
                        ln1: b.layer_norm(&format!("{p}.ln1"))?,
                        ffn_in: b.linear(format!("{p}.ffn_in"), d, inter)?,
                        ffn_out: b.linear(format!("{p}.ffn_out"), inter, d)?,
                        ln2: b.layer_norm(&format!("{p}.ln2"))?,
                    })
                }
            };
            blocks.push(block);
        }
        let head_dense = b.linear("head.dense".into(), d, d)?;
        let head_ln = b.layer_norm("head.ln")?;
        let out_bias = b
            .store
            .add("head.out_bias", Tensor::zeros(&[cfg.vocab_size]), true, false)?;
        let store = b.store;
        Ok(Self {
            cfg,
            store,
            embed: EmbeddingIds {
                token,
                position,
                head_dense,
                head_ln,
                out_bias,
            },
            blocks,
        })
    }

    /// Build from named tensors (e.g. a checkpoint). Every parameter must be present with its shape.
    pub fn from_tensors<'a>(
        cfg: ModelConfig,
        tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    ) -> Result<Self> {
        let mut model = Self::skeleton(cfg)?;
        let mut seen = vec![false; model.store.len()];
        for (name, t) in tensors {
            let Some(id) = model.store.id(name) else { continue };
            let p = model.store.get_mut(id);
            if p.value.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "load parameter",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            let name = &model.store.get(ParamId(i)).name;
            return Err(Error::format("checkpoint", format!("missing parameter `{name}`")));
        }
        Ok(model)
    }

    pub fn ssm_params(&self, layer: usize, dir: Direction) -> Option<SsmParams> {
        let (f, b) = self.blocks.get(layer)?.ssms()?;
        Some(match dir {
            Direction::Forward => f.params(&self.store),
            Direction::Backward => b.params(&self.store),
        })
    }

    /// Final hidden states `[nseq * seq_len, d]` before the MLM head.
    pub fn hidden(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        seq_len: usize,
        mut dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        if seq_len == 0 || tokens.is_empty() || !tokens.len().is_multiple_of(seq_len) {
            return Err(Error::invalid(format!(
                "{} tokens do not form sequences of length {seq_len}",
                tokens.len()
            )));
        }
        let vocab = self.cfg.vocab_size;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: vocab,
            });
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.param(&self.store, self.embed.token);
        let mut x = g.embedding(table, &ids)?;
        if let Some(pos) = self.embed.position {
            if seq_len > self.cfg.max_len {
                return Err(Error::Unsupported(format!(
                    "sequence length {seq_len} exceeds the position table ({})",
                    self.cfg.max_len
                )));
            }
            let pos_ids: Vec<usize> = (0..tokens.len()).map(|i| i % seq_len).collect();
            let table = g.param(&self.store, pos);
            let p = g.embedding(table, &pos_ids)?;
            x = g.add(x, p)?;
        }
        x = match dropout.as_deref_mut() {
            Some(r) => g.dropout(x, self.cfg.dropout, r),
            None => x,
        };
        let key_mask: Vec<bool> = tokens.iter().map(|&t| t != PAD_ID).collect();
        for block in &self.blocks {
            x = match block {
                BlockIds::Gated(ids) => gated_block(
                    g,
                    x,
                    ids,
                    &self.store,
                    &self.cfg,
                    seq_len,
                    Some(&key_mask),
                    dropout.as_deref_mut(),
                )?,
                BlockIds::Stacked(ids) => stacked_block(
                    g,
                    x,
                    ids,
                    &self.store,
                    &self.cfg,
                    seq_len,
                    Some(&key_mask),
                    dropout.as_deref_mut(),
                )?,
            };
        }
        Ok(x)
    }

    /// Logits `[nseq * seq_len, vocab]`. Dropout is active only when an RNG is given.
    pub fn logits(
        &self,
        g: &mut Graph,
        tokens: &[u32],
        seq_len: usize,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let h = self.hidden(g, tokens, seq_len, dropout)?;
        let h = self.embed.head_dense.apply(g, &self.store, h)?;
        let h = g.gelu(h);
        let h = self.embed.head_ln.apply(g, &self.store, h, self.cfg.ln_eps)?;
        let table = g.param(&self.store, self.embed.token);
        let logits = g.matmul_bt(h, table)?;
        let bias = g.param(&self.store, self.embed.out_bias);
        g.add_bias(logits, bias)
    }

    /// Evaluation-mode logits for one sequence.
    pub fn forward_mlm(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut g = Graph::new();
        let out = self.logits(&mut g, tokens, tokens.len(), None)?;
        Ok(g.value(out).clone())
    }

    /// Mean cross-entropy over positions with `labels >= 0`.
    pub fn mlm_loss(
        &self,
        g: &mut Graph,
        input_ids: &[u32],
        labels: &[i64],
        seq_len: usize,
        dropout: Option<&mut Rng>,
    ) -> Result<Var> {
        let logits = self.logits(g, input_ids, seq_len, dropout)?;
        g.masked_cross_entropy(logits, labels)
    }

    /// Re-target the model at a longer sequence length. SSM kernels need no new
    /// parameters; a learned position table cannot be extended.
    pub fn extend_max_len(&mut self, new_len: usize) -> Result<()> {
        if new_len <= self.cfg.max_len {
            return Err(Error::invalid(format!(
                "new length {new_len} must exceed the current max_len {}",
                self.cfg.max_len
            )));
        }
        if self.embed.position.is_some() {
            return Err(Error::Unsupported(
                "cannot extend a model with a learned position table; extend the table first".into(),
            ));
        }
        self.cfg.max_len = new_len;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_shape_and_determinism() {
        for (arch, routing) in [
            (Arch::Gated, Routing::Ssm),
            (Arch::Gated, Routing::Attention),
            (Arch::Stacked, Routing::Attention),
            (Arch::Stacked, Routing::Ssm),
        ] {
            let mut cfg = ModelConfig::toy(arch, routing);
            cfg.n_layers = 1;
            cfg.d_model = 16;
            cfg.intermediate = 48;
            cfg.vocab_size = 50;
            cfg.n_state = 4;
            let m = Model::new(cfg, 3).unwrap();
            let tokens: Vec<u32> = (0..10).map(|i| (i * 7 % 50) as u32).collect();
            let a = m.forward_mlm(&tokens).unwrap();
            let b = m.forward_mlm(&tokens).unwrap();
            assert_eq!(a.shape(), &[10, 50]);
            assert_eq!(a, b);
            for r in 0..10 {
                let row = a.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let s: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn out_of_range_token_errors() {
        let m = Model::new(ModelConfig::toy(Arch::Gated, Routing::Ssm), 1).unwrap();
        assert!(matches!(m.forward_mlm(&[1, 2, 9999]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn tied_output_shares_token_table() {
        let m = Model::new(ModelConfig::toy(Arch::Gated, Routing::Ssm), 1).unwrap();
        let mut g = Graph::new();
        let _ = m.logits(&mut g, &[5, 6, 7], 3, None).unwrap();
        let token_leaves = g.param_leaves().filter(|(id, _)| *id == m.embed.token).count();
        assert_eq!(token_leaves, 1);
    }

    #[test]
    fn extension_rules() {
        let mut m = Model::new(ModelConfig::toy(Arch::Gated, Routing::Ssm), 1).unwrap();
        let before = m.store.numel();
        m.extend_max_len(128).unwrap();
        assert_eq!(m.store.numel(), before);
        assert!(m.extend_max_len(64).is_err());
        let mut a = Model::new(ModelConfig::toy(Arch::Stacked, Routing::Attention), 1).unwrap();
        assert!(matches!(a.extend_max_len(64), Err(Error::Unsupported(_))));
    }
}

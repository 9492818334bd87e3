use serde::Serialize;

use crate::model::{Arch, ModelConfig, Routing};

/// Analytic parameter count, itemized. Block figures are per layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub block_weights: usize,
    pub block_biases: usize,
    pub block_layer_norms: usize,
    pub block_ssm: usize,
    pub per_block: usize,
    pub n_layers: usize,
    pub token_embeddings: usize,
    pub position_embeddings: usize,
    pub head: usize,
    pub total: usize,
}

/// Count without allocating. Each SSM stores `4 * N/2 + 2` values (Re/Im of Λ
/// and C per mode, plus D and log Δ); the input vector B is fixed.
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let (d, i) = (cfg.d_model, cfg.intermediate);
    let ssm = 4 * cfg.ssm_modes() + 2;
    // (matrix shapes, number of SSMs, number of LayerNorms)
    let (mats, ssms, lns): (Vec<(usize, usize)>, usize, usize) = match (cfg.arch, cfg.routing) {
        (Arch::Gated, routing) => {
            let mut m = vec![(d, i), (d, d), (d, d), (d, d), (d, d), (d, i), (i, d)];
            let ssms = match routing {
                Routing::Ssm => 2,
                Routing::Attention => {
                    m.extend([(d, d); 4]);
                    0
                }
            };
            (m, ssms, 1)
        }
        (Arch::Stacked, Routing::Attention) => (vec![(d, d), (d, d), (d, d), (d, d), (d, i), (i, d)], 0, 2),
        (Arch::Stacked, Routing::Ssm) => (vec![(d, d), (d, d), (d, i), (i, d)], 2, 2),
    };
    let block_weights = mats.iter().map(|(r, c)| r * c).sum();
    let block_biases = if cfg.use_bias {
        mats.iter().map(|(_, c)| c).sum()
    } else {
        0
    };
    let block_layer_norms = 2 * d * lns;
    let block_ssm = ssms * ssm;
    let per_block = block_weights + block_biases + block_layer_norms + block_ssm;
    let token_embeddings = cfg.vocab_size * d;
    let position_embeddings = if cfg.use_position_embeddings {
        cfg.max_len * d
    } else {
        0
    };
    let head = d * d + if cfg.use_bias { d } else { 0 } + 2 * d + cfg.vocab_size;
    ParamCount {
        block_weights,
        block_biases,
        block_layer_norms,
        block_ssm,
        per_block,
        n_layers: cfg.n_layers,
        token_embeddings,
        position_embeddings,
        head,
        total: per_block * cfg.n_layers + token_embeddings + position_embeddings + head,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn block_identities_at_full_width() {
        let gated = param_count(&ModelConfig::bigs_large());
        assert_eq!(gated.block_weights, 13 * 1024 * 1024);
        assert_eq!(gated.block_weights, 13_631_488);
        let bert = param_count(&ModelConfig::new(Arch::Stacked, Routing::Attention));
        assert_eq!(bert.block_weights, 12_582_912);
    }

    #[test]
    fn full_bigs_total() {
        let c = param_count(&ModelConfig::bigs_large());
        assert!((330_000_000..=370_000_000).contains(&c.total), "{}", c.total);
    }

    #[test]
    fn matches_enumeration() {
        for arch in [Arch::Gated, Arch::Stacked] {
            for routing in [Routing::Ssm, Routing::Attention] {
                for bias in [false, true] {
                    let mut cfg = ModelConfig::toy(arch, routing);
                    cfg.use_bias = bias;
                    let m = Model::new(cfg.clone(), 0).unwrap();
                    assert_eq!(param_count(&cfg).total, m.store.numel(), "{arch:?}/{routing:?} bias={bias}");
                    let weights: usize = m
                        .store
                        .iter()
                        .filter(|(_, p)| p.name.starts_with("layer0.") && p.value.shape().len() == 2)
                        .map(|(_, p)| p.value.numel())
                        .sum();
                    assert_eq!(weights, param_count(&cfg).block_weights);
                }
            }
        }
    }
}

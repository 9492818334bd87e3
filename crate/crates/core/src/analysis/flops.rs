//! Analytic FLOP counts for one sequence, forward plus backward.
//!
//! Counting rules, in "textbook" units where a multiply and an add are two FLOPs:
//! dense `m x k` by `k x n` products cost `2mkn`; an FFT of size `n` costs
//! `5 n log2 n`; each SSM convolves every feature column with three transforms of
//! size `2L` plus `8L` pointwise work (spectrum product, skip term); kernel
//! materialization costs `8 L` per mode; attention adds `4 L^2 d` (scores and
//! weighted sum); LayerNorm costs `5` per element. Embeddings, the MLM head and
//! softmax are excluded. The result is then scaled by
//! `flops_per_mac / 2` and by `1 + backward_multiplier`.

use std::fmt::Write as _;

use serde::Serialize;

use crate::model::{Arch, ModelConfig, Routing};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FlopConvention {
    /// FLOPs charged per multiply-accumulate.
    pub flops_per_mac: f64,
    /// Backward cost as a multiple of the forward cost.
    pub backward_multiplier: f64,
}

impl Default for FlopConvention {
    /// One FLOP per fused multiply-add, backward twice the forward.
    fn default() -> Self {
        Self {
            flops_per_mac: 1.0,
            backward_multiplier: 2.0,
        }
    }
}

impl FlopConvention {
    /// Multiply and add counted separately.
    pub fn separate_mul_add() -> Self {
        Self {
            flops_per_mac: 2.0,
            backward_multiplier: 2.0,
        }
    }

    pub fn forward_only(flops_per_mac: f64) -> Self {
        Self {
            flops_per_mac,
            backward_multiplier: 0.0,
        }
    }

    fn factor(&self) -> f64 {
        self.flops_per_mac / 2.0 * (1.0 + self.backward_multiplier)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Projections,
    SsmConvolution,
    AttentionScores,
    Ffn,
    LayerNorm,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Projections,
        Component::SsmConvolution,
        Component::AttentionScores,
        Component::Ffn,
        Component::LayerNorm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::Projections => "projections",
            Component::SsmConvolution => "ssm_convolution",
            Component::AttentionScores => "attention_scores",
            Component::Ffn => "ffn",
            Component::LayerNorm => "layer_norm",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub model: String,
    pub length: usize,
    pub convention: FlopConvention,
    pub components: Vec<(Component, f64)>,
    pub total: f64,
}

impl FlopReport {
    pub fn component(&self, c: Component) -> f64 {
        self.components
            .iter()
            .find(|(k, _)| *k == c)
            .map_or(0.0, |(_, v)| *v)
    }
}

fn fft_cost(n: usize) -> f64 {
    5.0 * n as f64 * (n as f64).log2()
}

/// Textbook cost of one SSM layer on `d` columns of length `l`.
fn ssm_cost(l: usize, d: usize, modes: usize) -> f64 {
    // Best case: no padding up to a power of two, so the count is smooth in `l`.
    let n = 2 * l;
    let per_column = 3.0 * fft_cost(n) + 8.0 * l as f64;
    d as f64 * per_column + 8.0 * (modes * l) as f64
}

pub fn flop_estimate(cfg: &ModelConfig, length: usize) -> FlopReport {
    flop_estimate_with(cfg, length, FlopConvention::default())
}

pub fn flop_estimate_with(cfg: &ModelConfig, length: usize, conv: FlopConvention) -> FlopReport {
    let (l, d, i) = (length as f64, cfg.d_model as f64, cfg.intermediate as f64);
    let ssm = ssm_cost(length, cfg.d_model, cfg.ssm_modes());
    // (projections, ssm, attention, ffn, LayerNorms per layer)
    let (proj, ssm_total, att, ffn, ln_layers) = match (cfg.arch, cfg.routing) {
        // W_v, W_u: d x I and W_o: I x d; four d x d gates/projections.
        (Arch::Gated, Routing::Ssm) => (2.0 * l * (3.0 * d * i + 4.0 * d * d), 2.0 * ssm, 0.0, 0.0, 1.0),
        (Arch::Gated, Routing::Attention) => (
            2.0 * l * (3.0 * d * i + 8.0 * d * d),
            0.0,
            2.0 * 4.0 * l * l * d,
            0.0,
            1.0,
        ),
        (Arch::Stacked, Routing::Attention) => (2.0 * l * 4.0 * d * d, 0.0, 4.0 * l * l * d, 4.0 * l * d * i, 2.0),
        (Arch::Stacked, Routing::Ssm) => (2.0 * l * 2.0 * d * d, 2.0 * ssm, 0.0, 4.0 * l * d * i, 2.0),
    };
    let ln = 5.0 * l * d * ln_layers;
    let layers = cfg.n_layers as f64;
    let scale = conv.factor() * layers;
    let components: Vec<(Component, f64)> = [
        (Component::Projections, proj),
        (Component::SsmConvolution, ssm_total),
        (Component::AttentionScores, att),
        (Component::Ffn, ffn),
        (Component::LayerNorm, ln),
    ]
    .into_iter()
    .map(|(c, v)| (c, v * scale))
    .collect();
    let total = components.iter().map(|(_, v)| v).sum();
    FlopReport {
        model: format!(
            "{}/{}",
            match cfg.arch {
                Arch::Gated => "gated",
                Arch::Stacked => "stacked",
            },
            match cfg.routing {
                Routing::Ssm => "ssm",
                Routing::Attention => "attention",
            }
        ),
        length,
        convention: conv,
        components,
        total,
    }
}

/// CSV `model,length,component,flops`; each report ends with a `total` row.
pub fn flops_csv(reports: &[FlopReport]) -> String {
    let mut s = String::from("model,length,component,flops\n");
    for r in reports {
        for (c, v) in &r.components {
            let _ = writeln!(s, "{},{},{},{:e}", r.model, r.length, c.as_str(), v);
        }
        let _ = writeln!(s, "{},{},total,{:e}", r.model, r.length, r.total);
    }
    s
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{DEFAULT_DT_MAX, DEFAULT_DT_MIN};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// BERT-style sublayer stack (post-LN).
    Stacked,
    /// Single gated unit per layer.
    Gated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    Ssm,
    Attention,
}

impl std::str::FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stacked" | "stack" => Ok(Arch::Stacked),
            "gated" => Ok(Arch::Gated),
            _ => Err(Error::invalid(format!("unknown arch `{s}` (stacked|gated)"))),
        }
    }
}

impl std::str::FromStr for Routing {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ssm" => Ok(Routing::Ssm),
            "attention" | "att" => Ok(Routing::Attention),
            _ => Err(Error::invalid(format!("unknown routing `{s}` (ssm|attention)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub routing: Routing,
    pub n_layers: usize,
    pub d_model: usize,
    /// Logical SSM state size N; N/2 conjugate pairs are stored.
    pub n_state: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_heads: usize,
    /// Width of V and U in the gated block, FFN width in the stacked block.
    pub intermediate: usize,
    pub dropout: f64,
    pub use_position_embeddings: bool,
    pub use_bias: bool,
    pub ln_eps: f64,
    pub init_std: f64,
    pub dt_min: f64,
    pub dt_max: f64,
    pub train_ssm_imag: bool,
}

impl ModelConfig {
    /// Full-size defaults for a variant: d = 1024, N = 64, length 128, BERT vocabulary.
    pub fn new(arch: Arch, routing: Routing) -> Self {
        let d = 1024;
        Self {
            arch,
            routing,
            n_layers: match arch {
                Arch::Gated => 23,
                Arch::Stacked => 24,
            },
            d_model: d,
            n_state: 64,
            max_len: 128,
            vocab_size: 30522,
            n_heads: 16,
            intermediate: match arch {
                Arch::Gated => 3 * d,
                Arch::Stacked => 4 * d,
            },
            dropout: 0.1,
            use_position_embeddings: routing == Routing::Attention,
            use_bias: false,
            ln_eps: 1e-12,
            init_std: 0.02,
            dt_min: DEFAULT_DT_MIN,
            dt_max: DEFAULT_DT_MAX,
            train_ssm_imag: true,
        }
    }

    /// Gated/SSM at full size.
    pub fn bigs_large() -> Self {
        Self::new(Arch::Gated, Routing::Ssm)
    }

    /// Stacked/attention at full size.
    pub fn bert_large() -> Self {
        let mut cfg = Self::new(Arch::Stacked, Routing::Attention);
        cfg.max_len = 512;
        cfg
    }

    /// Desk-scale variant: d = 64, N = 16, two layers, length 32.
    pub fn toy(arch: Arch, routing: Routing) -> Self {
        let d = 64;
        Self {
            n_layers: 2,
            d_model: d,
            n_state: 16,
            max_len: 32,
            vocab_size: 512,
            n_heads: 4,
            intermediate: match arch {
                Arch::Gated => 3 * d,
                Arch::Stacked => 4 * d,
            },
            ..Self::new(arch, routing)
        }
    }

    pub fn ssm_modes(&self) -> usize {
        self.n_state / 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid(m));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return fail("n_layers, d_model, vocab_size and max_len must be positive".into());
        }
        if self.intermediate == 0 {
            return fail("intermediate must be positive".into());
        }
        if self.routing == Routing::Ssm && (self.n_state == 0 || !self.n_state.is_multiple_of(2)) {
            return fail(format!("n_state must be positive and even, got {}", self.n_state));
        }
        if self.routing == Routing::Attention
            && (self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads))
        {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.ln_eps > 0.0) {
            return fail("ln_eps must be positive".into());
        }
        if !(0.0 < self.dt_min && self.dt_min < self.dt_max) {
            return fail("need 0 < dt_min < dt_max".into());
        }
        Ok(())
    }

    /// Set one field from its textual form, as used by config files and `--set`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::invalid(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "arch" => self.arch = value.parse()?,
            "routing" => self.routing = value.parse()?,
            "n_layers" => self.n_layers = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_state" => self.n_state = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "vocab_size" => self.vocab_size = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "intermediate" => self.intermediate = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "use_position_embeddings" => self.use_position_embeddings = parse(key, value)?,
            "use_bias" => self.use_bias = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "init_std" => self.init_std = parse(key, value)?,
            "dt_min" => self.dt_min = parse(key, value)?,
            "dt_max" => self.dt_max = parse(key, value)?,
            "train_ssm_imag" => self.train_ssm_imag = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::Rng;

pub const DEFAULT_DT_MIN: f64 = 0.001;
pub const DEFAULT_DT_MAX: f64 = 0.1;

/// Continuous-time diagonal SSM.
///
/// `Re Λ = -exp(log_neg_re)` is negative by construction, `Im Λ = im`,
/// and `Δ = exp(log_dt)`. All per-state buffers have [`SsmParams::modes`] entries.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams {
    pub log_neg_re: Vec<f64>,
    pub im: Vec<f64>,
    pub c_re: Vec<f64>,
    pub c_im: Vec<f64>,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
    pub d: f64,
    pub log_dt: f64,
    /// Each stored state stands for a conjugate pair; kernels use `2 Re(..)`.
    pub conjugate_pairs: bool,
}

impl SsmParams {
    /// Build from explicit complex eigenvalues. Fails if any `Re λ >= 0`.
    pub fn from_diagonal(
        lambda: &[Complex64],
        b: &[Complex64],
        c: &[Complex64],
        d: f64,
        dt: f64,
        conjugate_pairs: bool,
    ) -> Result<Self> {
        if lambda.is_empty() || b.len() != lambda.len() || c.len() != lambda.len() {
            return Err(Error::invalid("Λ, B and C need the same non-zero length"));
        }
        if lambda.iter().any(|l| !(l.re < 0.0)) {
            return Err(Error::invalid("every Re Λ must be negative"));
        }
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("step size must be positive, got {dt}")));
        }
        Ok(Self {
            log_neg_re: lambda.iter().map(|l| (-l.re).ln()).collect(),
            im: lambda.iter().map(|l| l.im).collect(),
            c_re: c.iter().map(|z| z.re).collect(),
            c_im: c.iter().map(|z| z.im).collect(),
            b_re: b.iter().map(|z| z.re).collect(),
            b_im: b.iter().map(|z| z.im).collect(),
            d,
            log_dt: dt.ln(),
            conjugate_pairs,
        })
    }

    /// Number of stored states.
    pub fn modes(&self) -> usize {
        self.log_neg_re.len()
    }

    /// Logical state size N (stored states, doubled in conjugate-pair mode).
    pub fn n_state(&self) -> usize {
        self.modes() * if self.conjugate_pairs { 2 } else { 1 }
    }

    pub fn lambda(&self, n: usize) -> Complex64 {
        Complex64::new(-self.log_neg_re[n].exp(), self.im[n])
    }

    pub fn b(&self, n: usize) -> Complex64 {
        Complex64::new(self.b_re[n], self.b_im[n])
    }

    pub fn c(&self, n: usize) -> Complex64 {
        Complex64::new(self.c_re[n], self.c_im[n])
    }

    pub fn dt(&self) -> f64 {
        self.log_dt.exp()
    }

    /// Trainable scalars: `Λ` (two buffers), `C` (two buffers), `D` and `log Δ`.
    /// `B` is frozen.
    pub fn trainable_count(&self) -> usize {
        4 * self.modes() + 2
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.modes();
        if m == 0 {
            return Err(Error::invalid("SSM needs at least one state"));
        }
        let lens = [self.im.len(), self.c_re.len(), self.c_im.len(), self.b_re.len(), self.b_im.len()];
        if lens.iter().any(|&l| l != m) {
            return Err(Error::invalid(format!("SSM buffers disagree in length: {m} vs {lens:?}")));
        }
        Ok(())
    }
}

/// S4D-Lin initialization: `Λ_n = -1/2 + iπn` for the `n_state / 2` stored
/// states of the conjugate pairs, `B = 1`, `C ~ N(0, 1)` per component,
/// `log Δ ~ U[log dt_min, log dt_max]`, `D = 1`.
pub fn init_s4d(n_state: usize, dt_min: f64, dt_max: f64, rng: &mut Rng) -> Result<SsmParams> {
    if n_state == 0 || !n_state.is_multiple_of(2) {
        return Err(Error::invalid(format!(
            "S4D initialization needs a positive even state size, got {n_state}"
        )));
    }
    if !(0.0 < dt_min && dt_min < dt_max) {
        return Err(Error::invalid(format!(
            "need 0 < dt_min < dt_max, got {dt_min}, {dt_max}"
        )));
    }
    let modes = n_state / 2;
    let c_re = rng.normal_vec(modes, 1.0);
    let c_im = rng.normal_vec(modes, 1.0);
    let log_dt = rng.uniform_range(dt_min.ln(), dt_max.ln());
    Ok(SsmParams {
        log_neg_re: vec![0.5f64.ln(); modes],
        im: (0..modes).map(|n| PI * n as f64).collect(),
        c_re,
        c_im,
        b_re: vec![1.0; modes],
        b_im: vec![0.0; modes],
        d: 1.0,
        log_dt,
        conjugate_pairs: true,
    })
}

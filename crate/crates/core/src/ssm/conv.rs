//! Causal convolution by FFT.
//!
//! Inputs are zero-padded to a power of two `>= 2L` so the circular product has no
//! wrap-around. Because the kernel is real, two real columns can be packed as
//! `u1 + i u2` to share one transform pair.

use crate::error::{Error, Result};
use crate::numerics::fft::FftPlan;
use crate::ssm::Kernel;

/// A kernel prepared for repeated application at a fixed length.
#[derive(Clone, Debug)]
pub struct CausalConv {
    len: usize,
    plan: FftPlan,
    k_re: Vec<f64>,
    k_im: Vec<f64>,
    d_skip: f64,
}

/// Gradients of [`convolve`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvolveGrads {
    pub taps: Vec<f64>,
    pub d_skip: f64,
    pub u: Vec<f64>,
}

impl CausalConv {
    pub fn new(kernel: &Kernel, d_skip: f64) -> Result<Self> {
        let len = kernel.len();
        if len == 0 {
            return Err(Error::invalid("convolution kernel must have at least one tap"));
        }
        let n = (2 * len).next_power_of_two();
        let plan = FftPlan::new(n)?;
        let mut k_re = kernel.taps.clone();
        k_re.resize(n, 0.0);
        let mut k_im = vec![0.0; n];
        plan.forward_in_place(&mut k_re, &mut k_im);
        Ok(Self {
            len,
            plan,
            k_re,
            k_im,
            d_skip,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn pack(&self, a: &[f64], b: Option<&[f64]>, reverse: bool) -> (Vec<f64>, Vec<f64>) {
        let n = self.plan.len();
        let l = self.len;
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        for t in 0..l {
            let src = if reverse { l - 1 - t } else { t };
            re[t] = a[src];
            if let Some(b) = b {
                im[t] = b[src];
            }
        }
        self.plan.forward_in_place(&mut re, &mut im);
        (re, im)
    }

    fn times_kernel(&self, re: &mut [f64], im: &mut [f64]) {
        for i in 0..re.len() {
            let (a, b) = (re[i], im[i]);
            re[i] = a * self.k_re[i] - b * self.k_im[i];
            im[i] = a * self.k_im[i] + b * self.k_re[i];
        }
    }

    /// Convolve up to two columns at once; `y1`/`y2` receive `K * u + D u`.
    pub fn forward_pair(&self, u1: &[f64], u2: Option<&[f64]>, y1: &mut [f64], y2: Option<&mut [f64]>) {
        let (mut re, mut im) = self.pack(u1, u2, false);
        self.times_kernel(&mut re, &mut im);
        self.plan.inverse_in_place(&mut re, &mut im);
        for t in 0..self.len {
            y1[t] = re[t] + self.d_skip * u1[t];
        }
        if let (Some(u2), Some(y2)) = (u2, y2) {
            for t in 0..self.len {
                y2[t] = im[t] + self.d_skip * u2[t];
            }
        }
    }

    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        if u.len() != self.len {
            return Err(Error::Shape {
                op: "convolve",
                lhs: vec![self.len],
                rhs: vec![u.len()],
            });
        }
        let mut y = vec![0.0; self.len];
        self.forward_pair(u, None, &mut y, None);
        Ok(y)
    }

    /// Backward for up to two columns. Writes input gradients into `gu1`/`gu2`,
    /// adds the kernel correlation into the frequency-domain accumulator
    /// `acc_re/acc_im` and returns the contribution to `∂/∂D`.
    #[allow(clippy::too_many_arguments)]
    pub fn backward_pair(
        &self,
        u1: &[f64],
        u2: Option<&[f64]>,
        g1: &[f64],
        g2: Option<&[f64]>,
        gu1: &mut [f64],
        gu2: Option<&mut [f64]>,
        acc_re: &mut [f64],
        acc_im: &mut [f64],
    ) -> f64 {
        let n = self.plan.len();
        let l = self.len;
        let (ur, ui) = self.pack(u1, u2, false);
        let (rr, ri) = self.pack(g1, g2, true);
        // FFT of (u1 + i u2) * conj(r1 + i r2) has real part u1*r1 + u2*r2.
        for k in 0..n {
            let j = (n - k) % n;
            let (cr, ci) = (rr[j], -ri[j]);
            acc_re[k] += ur[k] * cr - ui[k] * ci;
            acc_im[k] += ur[k] * ci + ui[k] * cr;
        }
        let (mut re, mut im) = (rr, ri);
        self.times_kernel(&mut re, &mut im);
        self.plan.inverse_in_place(&mut re, &mut im);
        let mut g_d = 0.0;
        for t in 0..l {
            gu1[t] = re[l - 1 - t] + self.d_skip * g1[t];
            g_d += g1[t] * u1[t];
        }
        if let (Some(u2), Some(g2), Some(gu2)) = (u2, g2, gu2) {
            for t in 0..l {
                gu2[t] = im[l - 1 - t] + self.d_skip * g2[t];
                g_d += g2[t] * u2[t];
            }
        }
        g_d
    }

    pub fn new_accumulator(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; self.plan.len()], vec![0.0; self.plan.len()])
    }

    /// Turn the frequency-domain accumulator into `∂loss/∂taps`.
    pub fn finish_taps(&self, mut acc_re: Vec<f64>, mut acc_im: Vec<f64>) -> Vec<f64> {
        self.plan.inverse_in_place(&mut acc_re, &mut acc_im);
        (0..self.len).map(|l| acc_re[self.len - 1 - l]).collect()
    }
}

/// `y_k = sum_{l<=k} taps[l] u_{k-l} + d_skip u_k`.
pub fn convolve(kernel: &Kernel, d_skip: f64, u: &[f64]) -> Result<Vec<f64>> {
    if kernel.len() != u.len() {
        return Err(Error::Shape {
            op: "convolve",
            lhs: vec![kernel.len()],
            rhs: vec![u.len()],
        });
    }
    CausalConv::new(kernel, d_skip)?.apply(u)
}

pub fn convolve_vjp(kernel: &Kernel, d_skip: f64, u: &[f64], g_y: &[f64]) -> Result<ConvolveGrads> {
    if kernel.len() != u.len() || g_y.len() != u.len() {
        return Err(Error::Shape {
            op: "convolve_vjp",
            lhs: vec![kernel.len()],
            rhs: vec![u.len(), g_y.len()],
        });
    }
    let conv = CausalConv::new(kernel, d_skip)?;
    let (mut ar, mut ai) = conv.new_accumulator();
    let mut gu = vec![0.0; u.len()];
    let g_d = conv.backward_pair(u, None, g_y, None, &mut gu, None, &mut ar, &mut ai);
    Ok(ConvolveGrads {
        taps: conv.finish_taps(ar, ai),
        d_skip: g_d,
        u: gu,
    })
}

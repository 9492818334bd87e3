use num_complex::Complex64;

use crate::numerics::ComplexVector;
use crate::ssm::SsmParams;

/// Zero-order-hold discretization of an [`SsmParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteSsm {
    pub a_bar: ComplexVector,
    pub b_bar: ComplexVector,
    pub c: ComplexVector,
    pub d: f64,
    pub conjugate_pairs: bool,
}

impl DiscreteSsm {
    pub fn modes(&self) -> usize {
        self.a_bar.len()
    }

    /// 2 when each stored state represents a conjugate pair, else 1.
    pub fn output_factor(&self) -> f64 {
        if self.conjugate_pairs {
            2.0
        } else {
            1.0
        }
    }

    pub fn max_decay(&self) -> f64 {
        self.a_bar.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }
}

/// Convolution kernel `K[l] = f Re sum_n C_n Ā_n^l B̄_n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    pub taps: Vec<f64>,
}

impl Kernel {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// `Ā = exp(ΔΛ)`, `B̄ = (Ā - 1) / Λ · B`, `C̄ = C`, `D̄ = D`.
pub fn discretize(p: &SsmParams) -> DiscreteSsm {
    let dt = p.dt();
    let m = p.modes();
    let mut a_bar = ComplexVector::zeros(m);
    let mut b_bar = ComplexVector::zeros(m);
    let mut c = ComplexVector::zeros(m);
    for n in 0..m {
        let lambda = p.lambda(n);
        let a = (lambda * dt).exp();
        a_bar.set(n, a);
        b_bar.set(n, (a - 1.0) / lambda * p.b(n));
        c.set(n, p.c(n));
    }
    DiscreteSsm {
        a_bar,
        b_bar,
        c,
        d: p.d,
        conjugate_pairs: p.conjugate_pairs,
    }
}

/// Kernel taps from the diagonal power form: each state contributes
/// `C_n B̄_n Ā_n^l`, accumulated by repeated multiplication. Taps of a longer
/// kernel reproduce those of a shorter one bit for bit.
pub fn materialize_kernel(disc: &DiscreteSsm, length: usize) -> Kernel {
    let f = disc.output_factor();
    let mut taps = vec![0.0; length];
    for n in 0..disc.modes() {
        let a = disc.a_bar.get(n);
        let mut z = disc.c.get(n) * disc.b_bar.get(n);
        for tap in taps.iter_mut() {
            *tap += f * z.re;
            z *= a;
        }
    }
    Kernel { taps }
}

/// Recurrent reference: `x_k = Ā x_{k-1} + B̄ u_k`, `y_k = f Re(C x_k) + D u_k`, `x_{-1} = 0`.
pub fn scan(disc: &DiscreteSsm, u: &[f64]) -> Vec<f64> {
    let f = disc.output_factor();
    let m = disc.modes();
    let mut state = vec![Complex64::new(0.0, 0.0); m];
    u.iter()
        .map(|&uk| {
            let mut acc = 0.0;
            for (n, x) in state.iter_mut().enumerate() {
                *x = disc.a_bar.get(n) * *x + disc.b_bar.get(n) * uk;
                acc += (disc.c.get(n) * *x).re;
            }
            f * acc + disc.d * uk
        })
        .collect()
}

/// Gradients with respect to the discrete parameters, in the `∂/∂re + i ∂/∂im` convention.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteGrads {
    pub a_bar: ComplexVector,
    pub b_bar: ComplexVector,
    pub c: ComplexVector,
}

/// Gradients with respect to every field of [`SsmParams`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SsmGrads {
    pub log_neg_re: Vec<f64>,
    pub im: Vec<f64>,
    pub c_re: Vec<f64>,
    pub c_im: Vec<f64>,
    pub b_re: Vec<f64>,
    pub b_im: Vec<f64>,
    pub d: f64,
    pub log_dt: f64,
}

/// Pull a kernel gradient `∂loss/∂K[l]` back to the discrete parameters.
pub fn kernel_disc_vjp(disc: &DiscreteSsm, g_taps: &[f64]) -> DiscreteGrads {
    let f = disc.output_factor();
    let m = disc.modes();
    let mut out = DiscreteGrads {
        a_bar: ComplexVector::zeros(m),
        b_bar: ComplexVector::zeros(m),
        c: ComplexVector::zeros(m),
    };
    for n in 0..m {
        let a = disc.a_bar.get(n);
        // s1 = sum_l G_l a^l ; s2 = sum_l G_l l a^(l-1)
        let mut s1 = Complex64::new(0.0, 0.0);
        let mut s2 = Complex64::new(0.0, 0.0);
        let mut pow = Complex64::new(1.0, 0.0);
        let mut pow_prev = Complex64::new(0.0, 0.0);
        for (l, &g) in g_taps.iter().enumerate() {
            s1 += pow * g;
            if l > 0 {
                s2 += pow_prev * (g * l as f64);
            }
            pow_prev = pow;
            pow *= a;
        }
        let (b, c) = (disc.b_bar.get(n), disc.c.get(n));
        out.c.set(n, (b * s1).conj() * f);
        out.b_bar.set(n, (c * s1).conj() * f);
        out.a_bar.set(n, (c * b * s2).conj() * f);
    }
    out
}

/// Pull discrete-parameter gradients back through the zero-order hold.
pub fn discretize_vjp(p: &SsmParams, disc: &DiscreteSsm, g: &DiscreteGrads) -> SsmGrads {
    let m = p.modes();
    let dt = p.dt();
    let mut out = SsmGrads {
        log_neg_re: vec![0.0; m],
        im: vec![0.0; m],
        c_re: vec![0.0; m],
        c_im: vec![0.0; m],
        b_re: vec![0.0; m],
        b_im: vec![0.0; m],
        d: 0.0,
        log_dt: 0.0,
    };
    let mut g_dt = 0.0;
    for n in 0..m {
        let lambda = p.lambda(n);
        let b = p.b(n);
        let a = disc.a_bar.get(n);
        let g_bbar = g.b_bar.get(n);
        let g_a = g.a_bar.get(n) + g_bbar * (b / lambda).conj();
        let g_lambda =
            g_bbar * (-(a - 1.0) * b / (lambda * lambda)).conj() + g_a * (a * dt).conj();
        g_dt += (g_a.conj() * lambda * a).re;
        out.log_neg_re[n] = -p.log_neg_re[n].exp() * g_lambda.re;
        out.im[n] = g_lambda.im;
        let g_c = g.c.get(n);
        out.c_re[n] = g_c.re;
        out.c_im[n] = g_c.im;
        let g_b = g_bbar * ((a - 1.0) / lambda).conj();
        out.b_re[n] = g_b.re;
        out.b_im[n] = g_b.im;
    }
    out.log_dt = g_dt * dt;
    out
}

/// `∂loss/∂params` given `∂loss/∂K`. The `d` field stays zero: the skip term is not part of the kernel.
pub fn kernel_vjp(p: &SsmParams, g_taps: &[f64]) -> SsmGrads {
    let disc = discretize(p);
    discretize_vjp(p, &disc, &kernel_disc_vjp(&disc, g_taps))
}

//! Iterative radix-2 FFT.
//!
//! Convention: the forward transform is unnormalized,
//! `X[k] = sum_n x[n] exp(-2 pi i k n / len)`, and the inverse carries the full `1/len`
//! factor, so `ifft(fft(x)) == x`. Neither direction is unitary on its own.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::ComplexVector;

/// Precomputed twiddles and bit-reversal permutation for one transform length.
#[derive(Clone, Debug)]
pub struct FftPlan {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
    bitrev: Vec<usize>,
}

impl FftPlan {
    pub fn new(len: usize) -> Result<Self> {
        if len == 0 || !len.is_power_of_two() {
            return Err(Error::FftLength(len));
        }
        let half = len / 2;
        let cos = (0..half).map(|k| (2.0 * PI * k as f64 / len as f64).cos()).collect();
        let sin = (0..half).map(|k| (2.0 * PI * k as f64 / len as f64).sin()).collect();
        let bits = len.trailing_zeros();
        let bitrev = (0..len)
            .map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) })
            .collect();
        Ok(Self {
            len,
            cos,
            sin,
            bitrev,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn transform(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let n = self.len;
        assert_eq!(re.len(), n, "buffer length does not match plan");
        assert_eq!(im.len(), n, "buffer length does not match plan");
        for i in 0..n {
            let j = self.bitrev[i];
            if i < j {
                re.swap(i, j);
                im.swap(i, j);
            }
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let mut size = 2;
        while size <= n {
            let half = size / 2;
            let stride = n / size;
            for start in (0..n).step_by(size) {
                for k in 0..half {
                    let wr = self.cos[k * stride];
                    let wi = sign * self.sin[k * stride];
                    let (a, b) = (start + k, start + k + half);
                    let tr = re[b] * wr - im[b] * wi;
                    let ti = re[b] * wi + im[b] * wr;
                    re[b] = re[a] - tr;
                    im[b] = im[a] - ti;
                    re[a] += tr;
                    im[a] += ti;
                }
            }
            size *= 2;
        }
        if inverse {
            let scale = 1.0 / n as f64;
            re.iter_mut().for_each(|v| *v *= scale);
            im.iter_mut().for_each(|v| *v *= scale);
        }
    }

    pub fn forward_in_place(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, false);
    }

    pub fn inverse_in_place(&self, re: &mut [f64], im: &mut [f64]) {
        self.transform(re, im, true);
    }
}

pub fn fft(x: &ComplexVector) -> Result<ComplexVector> {
    let plan = FftPlan::new(x.len())?;
    let mut out = x.clone();
    plan.forward_in_place(&mut out.re, &mut out.im);
    Ok(out)
}

pub fn ifft(x: &ComplexVector) -> Result<ComplexVector> {
    let plan = FftPlan::new(x.len())?;
    let mut out = x.clone();
    plan.inverse_in_place(&mut out.re, &mut out.im);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn dft(x: &ComplexVector) -> ComplexVector {
        let n = x.len();
        ComplexVector::from_fn(n, |k| {
            (0..n)
                .map(|j| {
                    let ang = -2.0 * PI * (k * j) as f64 / n as f64;
                    x.get(j) * num_complex::Complex64::new(ang.cos(), ang.sin())
                })
                .sum()
        })
    }

    fn random(n: usize, rng: &mut Rng) -> ComplexVector {
        ComplexVector::new(rng.normal_vec(n, 1.0), rng.normal_vec(n, 1.0)).unwrap()
    }

    #[test]
    fn zeros_stay_zero() {
        let y = fft(&ComplexVector::zeros(8)).unwrap();
        assert!(y.re.iter().chain(&y.im).all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_is_flat() {
        let y = fft(&ComplexVector::from_real(&[1.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(y.re, vec![1.0; 4]);
        assert_eq!(y.im, vec![0.0; 4]);
    }

    #[test]
    fn matches_direct_dft() {
        let mut rng = Rng::new(16);
        let x = random(16, &mut rng);
        assert!(fft(&x).unwrap().max_abs_diff(&dft(&x)) < 1e-10);
    }

    #[test]
    fn round_trip_all_lengths() {
        let mut rng = Rng::new(2);
        for p in 0..=12 {
            let x = random(1 << p, &mut rng);
            let back = ifft(&fft(&x).unwrap()).unwrap();
            assert!(back.max_abs_diff(&x) < 1e-10, "len {}", 1 << p);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert!(matches!(fft(&ComplexVector::zeros(6)), Err(Error::FftLength(6))));
        assert!(FftPlan::new(0).is_err());
    }

    #[test]
    fn circular_convolution_matches_direct() {
        let mut rng = Rng::new(11);
        let (a, b) = (rng.normal_vec(20, 1.0), rng.normal_vec(20, 1.0));
        let n = 64;
        let pad = |v: &[f64]| {
            let mut p = v.to_vec();
            p.resize(n, 0.0);
            ComplexVector::from_real(&p)
        };
        let (fa, fb) = (fft(&pad(&a)).unwrap(), fft(&pad(&b)).unwrap());
        let prod = ComplexVector::from_fn(n, |i| fa.get(i) * fb.get(i));
        let conv = ifft(&prod).unwrap();
        for k in 0..39 {
            let direct: f64 = (0..20)
                .filter(|&i| k >= i && k - i < 20)
                .map(|i| a[i] * b[k - i])
                .sum();
            assert!((conv.re[k] - direct).abs() < 1e-9);
        }
    }
}

//! Iterative radix-2 Cooley-Tukey FFT. Sizes must be powers of two.

use num_complex::Complex;

use crate::scalar::{sc, Scalar};

use super::DspError;

fn bit_reverse_permute<S: Scalar>(buf: &mut [Complex<S>]) {
    let n = buf.len();
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            buf.swap(i, j);
        }
    }
}

fn transform<S: Scalar>(buf: &mut [Complex<S>], inverse: bool) {
    let n = buf.len();
    bit_reverse_permute(buf);
    let sign = if inverse { S::one() } else { -S::one() };
    let mut len = 2;
    while len <= n {
        let ang = sign * sc::<S>(2.0) * S::PI() / sc::<S>(len as f64);
        let wlen = Complex::new(ang.cos(), ang.sin());
        for start in (0..n).step_by(len) {
            let mut w = Complex::new(S::one(), S::zero());
            for k in 0..len / 2 {
                let u = buf[start + k];
                let v = buf[start + k + len / 2] * w;
                buf[start + k] = u + v;
                buf[start + k + len / 2] = u - v;
                w = w * wlen;
            }
        }
        len <<= 1;
    }
    if inverse {
        let inv_n = S::one() / sc::<S>(n as f64);
        for v in buf.iter_mut() {
            *v = Complex::new(v.re * inv_n, v.im * inv_n);
        }
    }
}

fn check_pow2(n: usize) -> Result<(), DspError> {
    if n == 0 || !n.is_power_of_two() {
        return Err(DspError::InvalidArg {
            op: "fft",
            reason: format!("size {n} is not a power of two"),
        });
    }
    Ok(())
}

/// In-place forward DFT (no normalization).
pub fn fft<S: Scalar>(buf: &mut [Complex<S>]) -> Result<(), DspError> {
    check_pow2(buf.len())?;
    transform(buf, false);
    Ok(())
}

/// In-place inverse DFT (scaled by 1/N).
pub fn ifft<S: Scalar>(buf: &mut [Complex<S>]) -> Result<(), DspError> {
    check_pow2(buf.len())?;
    transform(buf, true);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex<f64>]) -> Vec<Complex<f64>> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for (i, &v) in x.iter().enumerate() {
                    let ang = -2.0 * std::f64::consts::PI * (k * i) as f64 / n as f64;
                    acc += v * Complex::new(ang.cos(), ang.sin());
                }
                acc
            })
            .collect()
    }

    #[test]
    fn matches_naive_dft() {
        let x: Vec<Complex<f64>> = (0..64)
            .map(|i| Complex::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let expected = naive_dft(&x);
        let mut buf = x.clone();
        fft(&mut buf).unwrap();
        for (a, b) in buf.iter().zip(&expected) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let x: Vec<Complex<f64>> = (0..128)
            .map(|i| Complex::new((i as f64).sin(), 0.0))
            .collect();
        let mut buf = x.clone();
        fft(&mut buf).unwrap();
        ifft(&mut buf).unwrap();
        for (a, b) in buf.iter().zip(&x) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_power_of_two() {
        let mut buf = vec![Complex::new(0.0f64, 0.0); 48];
        assert!(fft(&mut buf).is_err());
    }
}

//! Complex FFT (iterative radix-2, Bluestein chirp-z for other lengths) and the
//! real-input transforms used by the frequency adapter.

use num_complex::Complex;

use crate::scalar::{from_usize, lit, Scalar};

fn twiddle<T: Scalar>(k: usize, n: usize, sign: T) -> Complex<T> {
    // Reduce k before converting so large n keeps its phase accurate.
    let theta = sign * lit::<T>(2.0) * T::PI() * from_usize::<T>(k % n) / from_usize::<T>(n);
    Complex::new(theta.cos(), theta.sin())
}

fn radix2_in_place<T: Scalar>(buf: &mut [Complex<T>], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    let mut j = 0;
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
    let sign = if inverse { T::one() } else { -T::one() };
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let roots: Vec<Complex<T>> = (0..half).map(|k| twiddle(k, len, sign)).collect();
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let u = buf[start + k];
                let v = buf[start + k + half] * roots[k];
                buf[start + k] = u + v;
                buf[start + k + half] = u - v;
            }
        }
        len <<= 1;
    }
}

fn bluestein<T: Scalar>(input: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let n = input.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { T::one() } else { -T::one() };
    // chirp[k] = exp(sign * i*pi*k^2/n); k^2 mod 2n keeps the angle small.
    let chirp: Vec<Complex<T>> = (0..n)
        .map(|k| {
            let k2 = (k * k) % (2 * n);
            let theta = sign * T::PI() * from_usize::<T>(k2) / from_usize::<T>(n);
            Complex::new(theta.cos(), theta.sin())
        })
        .collect();
    let mut a = vec![Complex::new(T::zero(), T::zero()); m];
    for k in 0..n {
        a[k] = input[k] * chirp[k];
    }
    let mut b = vec![Complex::new(T::zero(), T::zero()); m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        b[k] = chirp[k].conj();
        b[m - k] = chirp[k].conj();
    }
    radix2_in_place(&mut a, false);
    radix2_in_place(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= *y;
    }
    radix2_in_place(&mut a, true);
    let scale = T::one() / from_usize::<T>(m);
    (0..n).map(|k| a[k] * scale * chirp[k]).collect()
}

/// Unnormalized forward DFT: `X_k = sum_n x_n exp(-2 pi i k n / N)`.
pub fn fft<T: Scalar>(input: &[Complex<T>]) -> Vec<Complex<T>> {
    transform(input, false)
}

/// Inverse DFT including the `1/N` factor.
pub fn ifft<T: Scalar>(input: &[Complex<T>]) -> Vec<Complex<T>> {
    let n = input.len();
    let mut out = transform(input, true);
    let scale = T::one() / from_usize::<T>(n.max(1));
    for x in &mut out {
        *x *= scale;
    }
    out
}

fn transform<T: Scalar>(input: &[Complex<T>], inverse: bool) -> Vec<Complex<T>> {
    let n = input.len();
    if n <= 1 {
        return input.to_vec();
    }
    if n.is_power_of_two() {
        let mut buf = input.to_vec();
        radix2_in_place(&mut buf, inverse);
        buf
    } else {
        bluestein(input, inverse)
    }
}

/// Number of non-redundant bins of a length-`n` real transform.
pub fn rfft_bins(n: usize) -> usize {
    n / 2 + 1
}

/// Real-input forward transform, returning real and imaginary planes of the
/// first `n/2 + 1` bins.
pub fn rfft<T: Scalar>(x: &[T]) -> (Vec<T>, Vec<T>) {
    let buf: Vec<Complex<T>> = x.iter().map(|&v| Complex::new(v, T::zero())).collect();
    let spec = fft(&buf);
    let bins = rfft_bins(x.len());
    (
        spec[..bins].iter().map(|c| c.re).collect(),
        spec[..bins].iter().map(|c| c.im).collect(),
    )
}

/// Inverse of [`rfft`] for output length `n`. The spectrum is extended by
/// Hermitian symmetry; imaginary parts of the DC and (even `n`) Nyquist bins
/// are ignored.
pub fn irfft<T: Scalar>(re: &[T], im: &[T], n: usize) -> Vec<T> {
    let bins = rfft_bins(n);
    debug_assert!(re.len() == bins && im.len() == bins);
    let zero = Complex::new(T::zero(), T::zero());
    let mut full = vec![zero; n];
    for k in 0..bins.min(n) {
        full[k] = Complex::new(re[k], im[k]);
    }
    full[0].im = T::zero();
    if n.is_multiple_of(2) && n > 0 {
        full[n / 2].im = T::zero();
    }
    for k in bins..n {
        full[k] = full[n - k].conj();
    }
    ifft(&full).into_iter().map(|c| c.re).collect()
}

/// Adjoint of [`rfft`]: maps cotangents on the real/imaginary planes back to
/// the length-`n` input.
pub fn rfft_adjoint<T: Scalar>(g_re: &[T], g_im: &[T], n: usize) -> Vec<T> {
    // dx_t = Re( sum_k (g_re_k + i g_im_k) exp(+2 pi i k t / n) ), which is n * ifft
    // of the zero-padded half spectrum.
    let zero = Complex::new(T::zero(), T::zero());
    let mut spec = vec![zero; n];
    for k in 0..g_re.len().min(n) {
        spec[k] = Complex::new(g_re[k], g_im[k]);
    }
    transform(&spec, true).into_iter().map(|c| c.re).collect()
}

/// Adjoint of [`irfft`]: maps an output cotangent of length `n` to cotangents
/// on the real and imaginary planes.
pub fn irfft_adjoint<T: Scalar>(g: &[T], n: usize) -> (Vec<T>, Vec<T>) {
    let bins = rfft_bins(n);
    let buf: Vec<Complex<T>> = g.iter().map(|&v| Complex::new(v, T::zero())).collect();
    let spec = fft(&buf);
    let inv_n = T::one() / from_usize::<T>(n);
    let two = lit::<T>(2.0);
    let mut re = Vec::with_capacity(bins);
    let mut im = Vec::with_capacity(bins);
    for (k, c) in spec.iter().take(bins).enumerate() {
        let edge = k == 0 || (n.is_multiple_of(2) && k == n / 2);
        let w = if edge { inv_n } else { two * inv_n };
        re.push(c.re * w);
        im.push(if edge { T::zero() } else { c.im * w });
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(N^2) direct DFT, independent of the fast paths above.
    fn direct_dft(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..n)
            .map(|k| {
                let mut re = 0.0;
                let mut im = 0.0;
                for (t, &v) in x.iter().enumerate() {
                    let th = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
                    re += v * th.cos();
                    im += v * th.sin();
                }
                (re, im)
            })
            .collect()
    }

    #[test]
    fn constant_vector_has_only_dc() {
        let (re, im) = rfft(&[2.5f64; 4]);
        assert!((re[0] - 10.0).abs() < 1e-12);
        for k in 1..3 {
            assert!(re[k].abs() < 1e-12 && im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_hits_a_single_bin() {
        let n = 16;
        let k0 = 3;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * std::f64::consts::PI * (k0 * t) as f64 / n as f64).cos())
            .collect();
        let (re, im) = rfft(&x);
        for k in 0..re.len() {
            let mag = (re[k] * re[k] + im[k] * im[k]).sqrt();
            if k == k0 {
                assert!((mag - n as f64 / 2.0).abs() < 1e-9);
            } else {
                assert!(mag < 1e-9, "bin {k} = {mag}");
            }
        }
    }

    #[test]
    fn matches_direct_dft_for_all_lengths_up_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=64 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (re, im) = rfft(&x);
            let oracle = direct_dft(&x);
            for k in 0..re.len() {
                assert!((re[k] - oracle[k].0).abs() < 1e-9, "n={n} k={k}");
                assert!((im[k] - oracle[k].1).abs() < 1e-9, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn round_trip_recovers_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1usize, 2, 5, 8, 12, 31, 64] {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let (re, im) = rfft(&x);
            let back = irfft(&re, &im, n);
            let err = x
                .iter()
                .zip(&back)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        // <rfft(x), g> == <x, rfft_adjoint(g)> and likewise for irfft.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [4usize, 7, 10, 16] {
            let bins = rfft_bins(n);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gr: Vec<f64> = (0..bins).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gi: Vec<f64> = (0..bins).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (re, im) = rfft(&x);
            let lhs: f64 = re.iter().zip(&gr).map(|(a, b)| a * b).sum::<f64>()
                + im.iter().zip(&gi).map(|(a, b)| a * b).sum::<f64>();
            let adj = rfft_adjoint(&gr, &gi, n);
            let rhs: f64 = x.iter().zip(&adj).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10);

            let y = irfft(&gr, &gi, n);
            let lhs2: f64 = y.iter().zip(&x).map(|(a, b)| a * b).sum();
            let (ar, ai) = irfft_adjoint(&x, n);
            let rhs2: f64 = gr.iter().zip(&ar).map(|(a, b)| a * b).sum::<f64>()
                + gi.iter().zip(&ai).map(|(a, b)| a * b).sum::<f64>();
            assert!((lhs2 - rhs2).abs() < 1e-10, "n={n}");
        }
    }

    #[test]
    fn single_precision_round_trip() {
        let x: Vec<f32> = (0..12).map(|i| (i as f32 * 0.37).sin()).collect();
        let (re, im) = rfft(&x);
        let back = irfft(&re, &im, 12);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

//! Discrete Fourier transforms for 2-D real images.
//!
//! Power-of-two lengths run through an iterative radix-2 kernel; every other
//! length falls back to Bluestein's chirp-z algorithm on a padded
//! power-of-two convolution, so arbitrary image sizes are supported. The
//! forward transform is unnormalized; `ifft2d` carries the 1/(H*W) factor so
//! the round trip is the identity.

use std::f64::consts::PI;

use std::ops::{Add, Mul, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex {
    pub re: f64,
    pub im: f64,
}

impl Complex {
    pub const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Complex { re, im }
    }

    /// e^(i*theta)
    pub fn cis(theta: f64) -> Self {
        Complex {
            re: theta.cos(),
            im: theta.sin(),
        }
    }

    pub fn conj(self) -> Self {
        Complex {
            re: self.re,
            im: -self.im,
        }
    }

    pub fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    pub fn abs(self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn scale(self, k: f64) -> Self {
        Complex {
            re: self.re * k,
            im: self.im * k,
        }
    }
}

impl Add for Complex {
    type Output = Complex;
    fn add(self, rhs: Complex) -> Complex {
        Complex::new(self.re + rhs.re, self.im + rhs.im)
    }
}

impl Sub for Complex {
    type Output = Complex;
    fn sub(self, rhs: Complex) -> Complex {
        Complex::new(self.re - rhs.re, self.im - rhs.im)
    }
}

impl Mul for Complex {
    type Output = Complex;
    fn mul(self, rhs: Complex) -> Complex {
        Complex::new(
            self.re * rhs.re - self.im * rhs.im,
            self.re * rhs.im + self.im * rhs.re,
        )
    }
}

/// In-place iterative radix-2 Cooley–Tukey; `n` must be a power of two.
fn fft_pow2(buf: &mut [Complex], inverse: bool) {
    let n = buf.len();
    debug_assert!(n.is_power_of_two());
    if n <= 1 {
        return;
    }
    // bit-reversal permutation
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
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * PI / len as f64;
        let wlen = Complex::cis(ang);
        let mut i = 0;
        while i < n {
            let mut w = Complex::new(1.0, 0.0);
            for k in 0..len / 2 {
                let u = buf[i + k];
                let v = buf[i + k + len / 2] * w;
                buf[i + k] = u + v;
                buf[i + k + len / 2] = u - v;
                w = w * wlen;
            }
            i += len;
        }
        len <<= 1;
    }
}

/// Bluestein's algorithm: an n-point DFT as a 2m-point convolution with a
/// chirp, m the next power of two >= 2n-1. The chirp angle uses k^2 mod 2n
/// so the argument stays small and precise for large k.
fn fft_bluestein(input: &[Complex], inverse: bool) -> Vec<Complex> {
    let n = input.len();
    let m = (2 * n - 1).next_power_of_two();
    let sign = if inverse { 1.0 } else { -1.0 };

    // chirp[k] = e^(sign * i * pi * k^2 / n)
    let chirp: Vec<Complex> = (0..n)
        .map(|k| {
            let k2 = ((k as u64 * k as u64) % (2 * n as u64)) as f64;
            Complex::cis(sign * PI * k2 / n as f64)
        })
        .collect();

    let mut a = vec![Complex::ZERO; m];
    for k in 0..n {
        a[k] = input[k] * chirp[k];
    }
    let mut b = vec![Complex::ZERO; m];
    b[0] = chirp[0].conj();
    for k in 1..n {
        let c = chirp[k].conj();
        b[k] = c;
        b[m - k] = c;
    }
    fft_pow2(&mut a, false);
    fft_pow2(&mut b, false);
    for (x, y) in a.iter_mut().zip(&b) {
        *x = *x * *y;
    }
    fft_pow2(&mut a, true);
    let scale = 1.0 / m as f64;
    (0..n).map(|k| (a[k] * chirp[k]).scale(scale)).collect()
}

/// 1-D DFT of arbitrary length. Unnormalized in both directions; callers
/// divide by n once for a round trip.
fn fft_1d(buf: &mut Vec<Complex>, inverse: bool) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    if n.is_power_of_two() {
        fft_pow2(buf, inverse);
    } else {
        *buf = fft_bluestein(buf, inverse);
    }
}

fn fft2d_complex(data: &mut [Complex], h: usize, w: usize, inverse: bool) {
    // rows
    let mut row = Vec::with_capacity(w);
    for r in 0..h {
        row.clear();
        row.extend_from_slice(&data[r * w..(r + 1) * w]);
        fft_1d(&mut row, inverse);
        data[r * w..(r + 1) * w].copy_from_slice(&row);
    }
    // columns
    let mut col = Vec::with_capacity(h);
    for c in 0..w {
        col.clear();
        col.extend((0..h).map(|r| data[r * w + c]));
        fft_1d(&mut col, inverse);
        for (r, v) in col.iter().enumerate() {
            data[r * w + c] = *v;
        }
    }
}

/// Unnormalized forward 2-D DFT of a real image stored row-major (h rows of
/// w). Output bin (fr, fc) lives at index fr*w + fc.
pub fn fft2d(image: &[f64], h: usize, w: usize) -> Vec<Complex> {
    assert!(h >= 1 && w >= 1, "fft2d requires dimensions >= 1");
    assert_eq!(image.len(), h * w, "fft2d: data length vs dimensions");
    let mut data: Vec<Complex> = image.iter().map(|&x| Complex::new(x, 0.0)).collect();
    fft2d_complex(&mut data, h, w, false);
    data
}

/// Inverse 2-D DFT including the 1/(h*w) normalization, so
/// `ifft2d(fft2d(x)) == x` up to rounding.
pub fn ifft2d(freq: &[Complex], h: usize, w: usize) -> Vec<Complex> {
    assert!(h >= 1 && w >= 1, "ifft2d requires dimensions >= 1");
    assert_eq!(freq.len(), h * w, "ifft2d: data length vs dimensions");
    let mut data = freq.to_vec();
    fft2d_complex(&mut data, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    for v in &mut data {
        *v = v.scale(scale);
    }
    data
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_image(h: usize, w: usize, rng: &mut Rng) -> Vec<f64> {
        (0..h * w).map(|_| rng.uniform(-1.0, 1.0)).collect()
    }

    /// Textbook O(n^2) DFT, the independent oracle.
    fn dft2d_oracle(image: &[f64], h: usize, w: usize) -> Vec<Complex> {
        let mut out = vec![Complex::ZERO; h * w];
        for fr in 0..h {
            for fc in 0..w {
                let mut acc = Complex::ZERO;
                for r in 0..h {
                    for c in 0..w {
                        let ang = -2.0 * PI
                            * (fr as f64 * r as f64 / h as f64 + fc as f64 * c as f64 / w as f64);
                        acc = acc + Complex::cis(ang).scale(image[r * w + c]);
                    }
                }
                out[fr * w + fc] = acc;
            }
        }
        out
    }

    #[test]
    fn constant_image_has_dc_only_spectrum() {
        let c = 3.25;
        let (h, w) = (5, 8);
        let image = vec![c; h * w];
        let freq = fft2d(&image, h, w);
        assert!((freq[0].re - c * (h * w) as f64).abs() < 1e-9);
        assert!(freq[0].im.abs() < 1e-9);
        for bin in freq.iter().skip(1) {
            assert!(bin.abs() < 1e-9, "non-DC bin {bin:?}");
        }
    }

    #[test]
    fn round_trip_is_identity_on_random_8x8() {
        let mut rng = Rng::seed_from_u64(33);
        let image = random_image(8, 8, &mut rng);
        let freq = fft2d(&image, 8, 8);
        let back = ifft2d(&freq, 8, 8);
        for (x, y) in image.iter().zip(&back) {
            assert!((x - y.re).abs() < 1e-9);
            assert!(y.im.abs() < 1e-9);
        }
    }

    #[test]
    fn round_trip_on_awkward_sizes() {
        let mut rng = Rng::seed_from_u64(34);
        for &(h, w) in &[(6, 10), (7, 7), (1, 13), (12, 5), (3, 1)] {
            let image = random_image(h, w, &mut rng);
            let freq = fft2d(&image, h, w);
            let back = ifft2d(&freq, h, w);
            for (x, y) in image.iter().zip(&back) {
                assert!((x - y.re).abs() < 1e-9, "size {h}x{w}");
                assert!(y.im.abs() < 1e-9, "size {h}x{w}");
            }
        }
    }

    #[test]
    fn matches_direct_dft_oracle() {
        let mut rng = Rng::seed_from_u64(35);
        for &(h, w) in &[(4, 4), (5, 6), (7, 3)] {
            let image = random_image(h, w, &mut rng);
            let fast = fft2d(&image, h, w);
            let slow = dft2d_oracle(&image, h, w);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((*a - *b).abs() < 1e-8, "size {h}x{w}: {a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn parseval_energy_identity() {
        let mut rng = Rng::seed_from_u64(36);
        for &(h, w) in &[(8, 8), (6, 9)] {
            let image = random_image(h, w, &mut rng);
            let freq = fft2d(&image, h, w);
            let spatial: f64 = image.iter().map(|x| x * x).sum();
            let spectral: f64 =
                freq.iter().map(|z| z.norm_sqr()).sum::<f64>() / (h * w) as f64;
            let rel = (spatial - spectral).abs() / spatial.abs();
            assert!(rel < 1e-9, "size {h}x{w}: rel {rel}");
        }
    }

    #[test]
    fn transform_is_pure() {
        let mut rng = Rng::seed_from_u64(37);
        let image = random_image(9, 5, &mut rng);
        let a = fft2d(&image, 9, 5);
        let b = fft2d(&image, 9, 5);
        assert_eq!(a, b);
    }
}

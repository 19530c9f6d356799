//! Mixed-radix complex FFT for the sizes the matcher needs.
//!
//! Recursive decimation in time over the prime factors of `n`; radices 2 and
//! 3 cover the desk-scale map sizes (48 = 2⁴·3), other primes fall back to a
//! direct butterfly.

use alloc::vec;
use alloc::vec::Vec;

use num_complex::Complex64;

use crate::math::{self, TAU};

/// Smallest `m ≥ n` whose prime factors are all 2, 3 or 5.
pub fn good_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

fn factorize(mut n: usize) -> Vec<usize> {
    let mut out = Vec::new();
    // Radix-4 stages are not special-cased; order is small primes first.
    let mut p = 2;
    while n > 1 {
        while n.is_multiple_of(p) {
            out.push(p);
            n /= p;
        }
        p += 1;
        if p * p > n && n > 1 {
            out.push(n);
            break;
        }
    }
    out
}

/// One-dimensional transform plan of length `n`.
#[derive(Debug, Clone)]
pub struct FftPlan {
    n: usize,
    factors: Vec<usize>,
    /// `exp(-2πi k / n)` for `k in 0..n`.
    twiddles: Vec<Complex64>,
}

impl FftPlan {
    pub fn new(n: usize) -> Self {
        assert!(n > 0, "FFT length must be positive");
        let twiddles = (0..n)
            .map(|k| {
                let a = -TAU * k as f64 / n as f64;
                Complex64::new(math::cos(a), math::sin(a))
            })
            .collect();
        Self {
            n,
            factors: factorize(n),
            twiddles,
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Unnormalized transform of `data` in place; `inverse` flips the sign
    /// of the exponent. `scratch` must hold `n` values.
    pub fn process(&self, data: &mut [Complex64], scratch: &mut [Complex64], inverse: bool) {
        debug_assert_eq!(data.len(), self.n);
        scratch[..self.n].copy_from_slice(data);
        self.recurse(data, &scratch[..self.n], 1, &self.factors, 1, inverse);
    }

    fn twiddle(&self, idx: usize, inverse: bool) -> Complex64 {
        debug_assert!(idx < self.n);
        let w = self.twiddles[idx];
        if inverse {
            w.conj()
        } else {
            w
        }
    }

    fn recurse(
        &self,
        out: &mut [Complex64],
        input: &[Complex64],
        stride: usize,
        factors: &[usize],
        tw_stride: usize,
        inverse: bool,
    ) {
        let n = out.len();
        if n == 1 {
            out[0] = input[0];
            return;
        }
        let p = factors[0];
        let m = n / p;
        for q in 0..p {
            self.recurse(
                &mut out[q * m..(q + 1) * m],
                &input[q * stride..],
                stride * p,
                &factors[1..],
                tw_stride * p,
                inverse,
            );
        }
        // Butterflies: X[k + q'm] = Σ_q W_n^{qk} W_p^{qq'} Y_q[k].
        let root = self.n / p;
        let mut tmp = [Complex64::new(0.0, 0.0); 8];
        let mut big;
        let buf: &mut [Complex64] = if p <= tmp.len() {
            &mut tmp[..p]
        } else {
            big = vec![Complex64::new(0.0, 0.0); p];
            &mut big[..]
        };
        for k in 0..m {
            for (q, b) in buf.iter_mut().enumerate() {
                *b = out[q * m + k] * self.twiddle(q * k * tw_stride, inverse);
            }
            match p {
                2 => {
                    let (a, b) = (buf[0], buf[1]);
                    out[k] = a + b;
                    out[k + m] = a - b;
                }
                3 => {
                    let w1 = self.twiddle(root, inverse);
                    let w2 = self.twiddle(2 * root, inverse);
                    let (a, b, c) = (buf[0], buf[1], buf[2]);
                    out[k] = a + b + c;
                    out[k + m] = a + b * w1 + c * w2;
                    out[k + 2 * m] = a + b * w2 + c * w1;
                }
                _ => {
                    for qq in 0..p {
                        let mut acc = Complex64::new(0.0, 0.0);
                        for (q, &b) in buf.iter().enumerate() {
                            acc += b * self.twiddle((q * qq % p) * root, inverse);
                        }
                        out[k + qq * m] = acc;
                    }
                }
            }
        }
    }
}

/// Square two-dimensional transform on row-major `n × n` buffers.
#[derive(Debug, Clone)]
pub struct Fft2 {
    plan: FftPlan,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        Self {
            plan: FftPlan::new(n),
        }
    }

    pub fn size(&self) -> usize {
        self.plan.len()
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    /// Inverse transform including the `1 / n²` normalization.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, true);
        let scale = 1.0 / (self.size() * self.size()) as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.size();
        self.pass_rows(data, 0..n, inverse);
        self.pass_columns(data, inverse);
    }

    fn pass_rows(&self, data: &mut [Complex64], rows: impl Iterator<Item = usize>, inverse: bool) {
        let n = self.size();
        assert_eq!(data.len(), n * n);
        let mut scratch = vec![Complex64::new(0.0, 0.0); n];
        for r in rows {
            self.plan.process(&mut data[r * n..(r + 1) * n], &mut scratch, inverse);
        }
    }

    fn pass_columns(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.size();
        assert_eq!(data.len(), n * n);
        let mut scratch = vec![Complex64::new(0.0, 0.0); n];
        let mut col = vec![Complex64::new(0.0, 0.0); n];
        for c in 0..n {
            for r in 0..n {
                col[r] = data[r * n + c];
            }
            self.plan.process(&mut col, &mut scratch, inverse);
            for r in 0..n {
                data[r * n + c] = col[r];
            }
        }
    }

    /// Normalized inverse transform that is only correct on `rows`; other
    /// rows are left half-transformed.
    pub fn inverse_rows(&self, data: &mut [Complex64], rows: &[usize]) {
        let n = self.size();
        self.pass_columns(data, true);
        self.pass_rows(data, rows.iter().copied(), true);
        let scale = 1.0 / (n * n) as f64;
        for &r in rows {
            data[r * n..(r + 1) * n].iter_mut().for_each(|v| *v *= scale);
        }
    }

    /// Transforms of every channel of a real `h × w` block (row-major,
    /// channels interleaved), each zero-padded into the top-left corner.
    ///
    /// Channels go through the transform in pairs, one as the real and one
    /// as the imaginary part, and are separated by conjugate symmetry. Rows
    /// past `h` are zero, so their row transforms are skipped.
    pub fn forward_real_channels(&self, block: &[f64], h: usize, w: usize, channels: usize) -> Vec<Vec<Complex64>> {
        let n = self.size();
        let zero = Complex64::new(0.0, 0.0);
        let mut out = Vec::with_capacity(channels);
        let mut ch = 0;
        while ch < channels {
            let pair = ch + 1 < channels;
            let mut buf = vec![zero; n * n];
            for r in 0..h {
                for c in 0..w {
                    let i = (r * w + c) * channels + ch;
                    buf[r * n + c] = Complex64::new(block[i], if pair { block[i + 1] } else { 0.0 });
                }
            }
            self.pass_rows(&mut buf, 0..h.min(n), false);
            self.pass_columns(&mut buf, false);
            if !pair {
                out.push(buf);
                break;
            }
            let mut a = vec![zero; n * n];
            let mut b = vec![zero; n * n];
            for k1 in 0..n {
                for k2 in 0..n {
                    let x = buf[k1 * n + k2];
                    let y = buf[((n - k1) % n) * n + (n - k2) % n].conj();
                    a[k1 * n + k2] = (x + y) * 0.5;
                    b[k1 * n + k2] = (x - y) * Complex64::new(0.0, -0.5);
                }
            }
            out.push(a);
            out.push(b);
            ch += 2;
        }
        out
    }

    /// Transform of a real `h × w` block (row-major, `channels` interleaved,
    /// channel `ch` selected) zero-padded into the top-left corner.
    pub fn forward_real_block(
        &self,
        block: &[f64],
        h: usize,
        w: usize,
        channels: usize,
        ch: usize,
    ) -> Vec<Complex64> {
        let n = self.size();
        let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
        for r in 0..h {
            for c in 0..w {
                buf[r * n + c] = Complex64::new(block[(r * w + c) * channels + ch], 0.0);
            }
        }
        self.forward(&mut buf);
        buf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_dft(x: &[Complex64], inverse: bool) -> Vec<Complex64> {
        let n = x.len();
        let sign = if inverse { 1.0 } else { -1.0 };
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let a = sign * TAU * (j * k) as f64 / n as f64;
                        v * Complex64::new(math::cos(a), math::sin(a))
                    })
                    .sum()
            })
            .collect()
    }

    fn signal(n: usize) -> Vec<Complex64> {
        (0..n)
            .map(|i| Complex64::new(math::sin(i as f64 * 1.3) + 0.1 * i as f64, math::cos(i as f64 * 0.7)))
            .collect()
    }

    #[test]
    fn matches_naive_dft_for_mixed_sizes() {
        for n in [1, 2, 3, 4, 5, 6, 7, 12, 16, 18, 45, 48, 49, 64] {
            let x = signal(n);
            let plan = FftPlan::new(n);
            for inverse in [false, true] {
                let mut y = x.clone();
                let mut scratch = vec![Complex64::new(0.0, 0.0); n];
                plan.process(&mut y, &mut scratch, inverse);
                let want = naive_dft(&x, inverse);
                for (a, b) in y.iter().zip(&want) {
                    assert!((a - b).norm() < 1e-9 * n as f64, "n={n}");
                }
            }
        }
    }

    #[test]
    fn two_dim_round_trip() {
        let n = 12;
        let f = Fft2::new(n);
        let x: Vec<Complex64> = signal(n * n);
        let mut y = x.clone();
        f.forward(&mut y);
        f.inverse(&mut y);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn good_sizes() {
        assert_eq!(good_size(48), 48);
        assert_eq!(good_size(7), 8);
        assert_eq!(good_size(49), 50);
        assert_eq!(good_size(1), 1);
        assert_eq!(good_size(6), 6);
    }

    #[test]
    fn packed_channels_match_single_transforms() {
        let f = Fft2::new(12);
        for channels in [1, 2, 3] {
            let block: Vec<f64> = (0..5 * 7 * channels).map(|i| math::sin(i as f64 * 0.37) + 0.2).collect();
            let packed = f.forward_real_channels(&block, 5, 7, channels);
            assert_eq!(packed.len(), channels);
            for (ch, plane) in packed.iter().enumerate() {
                let single = f.forward_real_block(&block, 5, 7, channels, ch);
                for (a, b) in plane.iter().zip(&single) {
                    assert!((a - b).norm() < 1e-10, "channel {ch}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn inverse_on_selected_rows() {
        let f = Fft2::new(10);
        let data: Vec<Complex64> = (0..100).map(|i| Complex64::new(math::cos(i as f64), math::sin(i as f64 * 0.3))).collect();
        let mut full = data.clone();
        f.inverse(&mut full);
        let mut part = data;
        f.inverse_rows(&mut part, &[2, 3, 7]);
        for r in [2, 3, 7] {
            for c in 0..10 {
                assert!((full[r * 10 + c] - part[r * 10 + c]).norm() < 1e-12);
            }
        }
    }
}

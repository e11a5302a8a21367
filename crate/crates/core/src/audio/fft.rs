use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::math;

/// In-place iterative radix-2 FFT. `re.len()` must be a power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    assert_eq!(n, im.len());
    assert!(n.is_power_of_two(), "fft length {n} is not a power of two");
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let step = -2.0 * PI / len as f64;
        for k in 0..half {
            let (wr, wi) = (math::cos(step * k as f64), math::sin(step * k as f64));
            let mut start = 0;
            while start < n {
                let (a, b) = (start + k, start + k + half);
                let tr = re[b] * wr - im[b] * wi;
                let ti = re[b] * wi + im[b] * wr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                start += len;
            }
        }
        len <<= 1;
    }
}

/// Direct O(n²) DFT of a real signal; returns `(re, im)` for every bin.
pub fn dft_naive(x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = x.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        for (t, &v) in x.iter().enumerate() {
            // reduce the phase index first so the angle stays small
            let angle = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
            re[k] += v * math::cos(angle);
            im[k] += v * math::sin(angle);
        }
    }
    (re, im)
}

/// One-sided magnitude spectrum of a real frame of length `n`.
pub(crate) fn magnitude_spectrum(frame: &[f64]) -> Vec<f64> {
    let n = frame.len();
    let bins = n / 2 + 1;
    if n.is_power_of_two() {
        let mut re = frame.to_vec();
        let mut im = vec![0.0; n];
        fft_in_place(&mut re, &mut im);
        (0..bins).map(|k| math::hypot(re[k], im[k])).collect()
    } else {
        let (re, im) = dft_naive(frame);
        (0..bins).map(|k| math::hypot(re[k], im[k])).collect()
    }
}

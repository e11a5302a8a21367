use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use super::fft::magnitude_spectrum;
use super::Waveform;
use crate::{math, Error, Result, Tensor};

/// Periodic Hann window of length `n`.
pub fn hann_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * math::cos(2.0 * PI * i as f64 / n as f64))
        .collect()
}

/// Magnitude STFT, shape `[T, fft_size/2 + 1]` with
/// `T = 1 + (len - frame_len) / hop`. Frames are Hann-windowed and zero-padded
/// on the right to `fft_size`; no centering padding is applied.
pub fn stft_magnitude(w: &Waveform, frame_len: usize, hop: usize, fft_size: usize) -> Result<Tensor> {
    if frame_len == 0 || frame_len > fft_size {
        return Err(Error::Config(alloc::format!(
            "frame_len {frame_len} must be in 1..={fft_size}"
        )));
    }
    if hop == 0 {
        return Err(Error::Config("hop must be at least 1".into()));
    }
    let x = w.samples();
    if x.len() < frame_len {
        return Err(Error::SignalTooShort {
            len: x.len(),
            frame_len,
        });
    }
    let frames = 1 + (x.len() - frame_len) / hop;
    let bins = fft_size / 2 + 1;
    let window = hann_window(frame_len);
    let mut out = Vec::with_capacity(frames * bins);
    let mut buf = vec![0.0; fft_size];
    for t in 0..frames {
        let start = t * hop;
        buf.iter_mut().for_each(|b| *b = 0.0);
        for i in 0..frame_len {
            buf[i] = x[start + i] * window[i];
        }
        out.extend(magnitude_spectrum(&buf));
    }
    Tensor::new(&[frames, bins], out)
}

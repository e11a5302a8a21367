use alloc::vec;

use super::{stft_magnitude, FrontendConfig, Waveform};
use crate::{math, Error, Result, Tensor};

/// HTK mel scale: `2595·log10(1 + f/700)`.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * math::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (math::pow(10.0, mel / 2595.0) - 1.0)
}

/// Triangular filters with centers equally spaced on the mel scale between
/// `f_min` and `f_max`; shape `[bins, fft_size/2 + 1]`, unnormalized peaks of 1.
pub fn mel_filterbank(bins: usize, fft_size: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Result<Tensor> {
    if bins == 0 {
        return Err(Error::Config("mel bin count must be at least 1".into()));
    }
    if fft_size < 2 {
        return Err(Error::Config("fft_size must be at least 2".into()));
    }
    if !(f_min >= 0.0 && f_min < f_max) {
        return Err(Error::Config(alloc::format!(
            "need 0 <= f_min < f_max, got {f_min} and {f_max}"
        )));
    }
    let n_freq = fft_size / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: alloc::vec::Vec<f64> = (0..bins + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (bins + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / fft_size as f64;
    let mut fb = vec![0.0; bins * n_freq];
    for m in 0..bins {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let row = &mut fb[m * n_freq..(m + 1) * n_freq];
        for (k, w) in row.iter_mut().enumerate() {
            let f = k as f64 * bin_hz;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            *w = up.min(down).max(0.0);
        }
        if row.iter().all(|&w| w == 0.0) {
            return Err(Error::TooManyMelBins {
                bins,
                fft_size,
                filter: m,
            });
        }
    }
    Tensor::new(&[bins, n_freq], fb)
}

/// Log-compressed mel spectrogram, `[T, M]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Tensor,
    pub frame_len: usize,
    pub hop: usize,
}

impl MelSpectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn num_bins(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn get(&self, t: usize, m: usize) -> f64 {
        self.frames.data()[t * self.num_bins() + m]
    }
}

/// `ln(1 + filterbank · |STFT|)` per frame.
pub fn mel_spectrogram(w: &Waveform, cfg: &FrontendConfig) -> Result<MelSpectrogram> {
    let fb = mel_filterbank(cfg.mel_bins, cfg.fft_size, w.sample_rate(), cfg.f_min, cfg.f_max_for(w.sample_rate()))?;
    mel_spectrogram_with(w, cfg, &fb)
}

/// As [`mel_spectrogram`] with a precomputed filterbank.
pub fn mel_spectrogram_with(w: &Waveform, cfg: &FrontendConfig, fb: &Tensor) -> Result<MelSpectrogram> {
    let mag = stft_magnitude(w, cfg.frame_len, cfg.hop, cfg.fft_size)?;
    let (frames, n_freq) = (mag.shape()[0], mag.shape()[1]);
    let (bins, fb_freq) = (fb.shape()[0], fb.shape()[1]);
    if fb_freq != n_freq {
        return Err(Error::shape("mel_spectrogram", fb.shape(), mag.shape()));
    }
    let mut out = vec![0.0; frames * bins];
    for t in 0..frames {
        let spec = &mag.data()[t * n_freq..(t + 1) * n_freq];
        for m in 0..bins {
            let row = &fb.data()[m * n_freq..(m + 1) * n_freq];
            let e: f64 = row.iter().zip(spec).map(|(a, b)| a * b).sum();
            out[t * bins + m] = math::ln1p(e);
        }
    }
    Ok(MelSpectrogram {
        frames: Tensor::new(&[frames, bins], out)?,
        frame_len: cfg.frame_len,
        hop: cfg.hop,
    })
}

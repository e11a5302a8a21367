//! Audio frontend: waveform → STFT magnitude → log-mel spectrogram → patches.

mod fft;
mod mel;
mod patch;
mod stft;

pub use fft::{dft_naive, fft_in_place};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_spectrogram_with, mel_to_hz, MelSpectrogram};
pub use patch::{patch_count, patchify, PatchGrid};
pub use stft::{hann_window, stft_magnitude};

use alloc::vec::Vec;

use crate::{Error, Result};

/// Mono PCM samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty { op: "Waveform" });
        }
        if sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(x) = samples.iter().find(|x| !x.is_finite() || x.abs() > 1.0) {
            return Err(Error::InvalidTensor(alloc::format!(
                "waveform sample {x} outside [-1, 1]"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Spectrogram and patch geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct FrontendConfig {
    pub sample_rate: u32,
    /// Samples per analysis frame (25 ms at 16 kHz).
    pub frame_len: usize,
    /// Samples between frame starts (10 ms at 16 kHz).
    pub hop: usize,
    pub fft_size: usize,
    pub mel_bins: usize,
    pub f_min: f64,
    /// Defaults to the Nyquist frequency.
    pub f_max: Option<f64>,
    pub patch_time: usize,
    pub patch_freq: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            frame_len: 400,
            hop: 160,
            fft_size: 512,
            mel_bins: 80,
            f_min: 0.0,
            f_max: None,
            patch_time: 4,
            patch_freq: 16,
        }
    }
}

impl FrontendConfig {
    pub fn f_max(&self) -> f64 {
        self.f_max_for(self.sample_rate)
    }

    /// Upper filter edge for audio recorded at `sample_rate`.
    pub fn f_max_for(&self, sample_rate: u32) -> f64 {
        self.f_max.unwrap_or(sample_rate as f64 / 2.0)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_time * self.patch_freq
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop == 0 {
            return bad("hop must be at least 1");
        }
        if self.frame_len == 0 || self.frame_len > self.fft_size {
            return bad("frame_len must be in 1..=fft_size");
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be at least 1");
        }
        if self.patch_time == 0 || self.patch_freq == 0 {
            return bad("patch sizes must be at least 1");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max() && self.f_max() <= self.sample_rate as f64 / 2.0) {
            return bad("need 0 <= f_min < f_max <= sample_rate / 2");
        }
        Ok(())
    }
}

use alloc::vec;

use super::MelSpectrogram;
use crate::{Error, Result, Tensor};

/// `ceil(T / patch_time) · ceil(M / patch_freq)`.
pub fn patch_count(frames: usize, bins: usize, patch_time: usize, patch_freq: usize) -> usize {
    frames.div_ceil(patch_time) * bins.div_ceil(patch_freq)
}

/// Spectrogram cut into flattened patches, one row per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    /// `[P, patch_time·patch_freq]`
    pub patches: Tensor,
    pub time_patches: usize,
    pub freq_patches: usize,
    pub patch_time: usize,
    pub patch_freq: usize,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.time_patches * self.freq_patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_time * self.patch_freq
    }
}

/// Zero-pad the spectrogram to whole patches and flatten each patch
/// row-major (time rows, frequency columns). Patches are ordered time-major.
pub fn patchify(mel: &MelSpectrogram, patch_time: usize, patch_freq: usize) -> Result<PatchGrid> {
    if patch_time == 0 || patch_freq == 0 {
        return Err(Error::Config("patch sizes must be at least 1".into()));
    }
    let (t_len, m_len) = (mel.num_frames(), mel.num_bins());
    let (tp, fp) = (t_len.div_ceil(patch_time), m_len.div_ceil(patch_freq));
    let dim = patch_time * patch_freq;
    let mut out = vec![0.0; tp * fp * dim];
    for pt in 0..tp {
        for pf in 0..fp {
            let base = (pt * fp + pf) * dim;
            for dt in 0..patch_time {
                let t = pt * patch_time + dt;
                if t >= t_len {
                    break;
                }
                for df in 0..patch_freq {
                    let m = pf * patch_freq + df;
                    if m >= m_len {
                        break;
                    }
                    out[base + dt * patch_freq + df] = mel.get(t, m);
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::new(&[tp * fp, dim], out)?,
        time_patches: tp,
        freq_patches: fp,
        patch_time,
        patch_freq,
    })
}

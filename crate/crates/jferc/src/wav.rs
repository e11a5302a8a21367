//! RIFF/WAVE reading and writing.
//!
//! Accepted encodings are 16-bit PCM and 32-bit IEEE float, mono or stereo.
//! Stereo is averaged down to mono.

use std::fs;
use std::path::Path;

use jferc_core::audio::Waveform;

#[derive(Debug, thiserror::Error)]
pub enum WavError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a RIFF/WAVE file")]
    NotWave,
    #[error("chunk '{chunk}': {detail}")]
    Chunk { chunk: String, detail: String },
    #[error("missing '{0}' chunk")]
    MissingChunk(&'static str),
    #[error(transparent)]
    Core(#[from] jferc_core::Error),
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

/// Sample encoding used by [`write_wav`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Pcm16,
    Float32,
}

#[derive(Debug, Clone, Copy)]
struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

pub fn read_wav(path: &Path) -> Result<Waveform, WavError> {
    let bytes = fs::read(path).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_wav(&bytes)
}

pub fn parse_wav(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::NotWave);
    }
    let mut pos = 12;
    let mut format: Option<Format> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body_start = pos + 8;
        let body_end = body_start.saturating_add(len).min(bytes.len());
        let body = &bytes[body_start..body_end];
        let name = String::from_utf8_lossy(id).into_owned();
        match id {
            b"fmt " => format = Some(parse_format(&name, body)?),
            b"data" => {
                let fmt = format.ok_or(WavError::MissingChunk("fmt "))?;
                return decode_samples(&name, fmt, body);
            }
            _ => {}
        }
        // Chunks are word aligned.
        pos = body_start.saturating_add(len + (len & 1));
    }
    Err(WavError::MissingChunk(if format.is_none() { "fmt " } else { "data" }))
}

fn parse_format(chunk: &str, body: &[u8]) -> Result<Format, WavError> {
    let bad = |detail: String| WavError::Chunk {
        chunk: chunk.to_string(),
        detail,
    };
    if body.len() < 16 {
        return Err(bad(format!("{} bytes, need at least 16", body.len())));
    }
    let u16_at = |i: usize| u16::from_le_bytes([body[i], body[i + 1]]);
    let mut tag = u16_at(0);
    let channels = u16_at(2);
    let sample_rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
    let bits = u16_at(14);
    if tag == FORMAT_EXTENSIBLE {
        // The sub-format GUID starts with the plain format tag.
        if body.len() < 26 {
            return Err(bad("truncated extensible format".into()));
        }
        tag = u16_at(24);
    }
    let supported = matches!((tag, bits), (FORMAT_PCM, 16) | (FORMAT_FLOAT, 32));
    if !supported {
        let kind = match tag {
            FORMAT_PCM => "PCM",
            FORMAT_FLOAT => "IEEE float",
            _ => "format tag",
        };
        return Err(bad(format!(
            "unsupported encoding ({kind} {tag:#06x}, {bits}-bit); expected 16-bit PCM or 32-bit float"
        )));
    }
    if !(1..=2).contains(&channels) {
        return Err(bad(format!("{channels} channels; expected mono or stereo")));
    }
    if sample_rate == 0 {
        return Err(bad("sample rate 0".into()));
    }
    Ok(Format {
        tag,
        channels,
        sample_rate,
        bits,
    })
}

fn decode_samples(chunk: &str, fmt: Format, body: &[u8]) -> Result<Waveform, WavError> {
    let width = (fmt.bits / 8) as usize;
    let frame = width * fmt.channels as usize;
    if !body.len().is_multiple_of(frame) {
        log::warn!("'{chunk}' chunk has {} trailing bytes; ignored", body.len() % frame);
    }
    let decode = |b: &[u8]| -> f64 {
        if fmt.tag == FORMAT_PCM {
            i16::from_le_bytes([b[0], b[1]]) as f64 / 32768.0
        } else {
            f32::from_le_bytes(b.try_into().unwrap()) as f64
        }
    };
    let samples: Vec<f64> = body
        .chunks_exact(frame)
        .map(|f| {
            if fmt.channels == 1 {
                decode(f)
            } else {
                0.5 * (decode(&f[..width]) + decode(&f[width..]))
            }
        })
        .collect();
    if fmt.channels == 2 {
        log::warn!("stereo input averaged to mono");
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(WavError::Chunk {
            chunk: chunk.to_string(),
            detail: "non-finite sample".into(),
        });
    }
    Ok(Waveform::new(samples, fmt.sample_rate)?)
}

/// Mono WAV bytes.
pub fn encode_wav(samples: &[f64], sample_rate: u32, encoding: Encoding) -> Vec<u8> {
    let (tag, bits) = match encoding {
        Encoding::Pcm16 => (FORMAT_PCM, 16u16),
        Encoding::Float32 => (FORMAT_FLOAT, 32u16),
    };
    let width = bits as u32 / 8;
    let data_len = samples.len() as u32 * width;
    let mut out = Vec::with_capacity(44 + data_len as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * width).to_le_bytes());
    out.extend_from_slice(&(width as u16).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        match encoding {
            Encoding::Pcm16 => {
                let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            Encoding::Float32 => out.extend_from_slice(&(s as f32).to_le_bytes()),
        }
    }
    out
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32, encoding: Encoding) -> Result<(), WavError> {
    fs::write(path, encode_wav(samples, sample_rate, encoding)).map_err(|source| WavError::Io {
        path: path.display().to_string(),
        source,
    })
}

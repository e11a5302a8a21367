//! Synthetic emotion corpus.
//!
//! Each class leaves a trace in both modalities, and each modality on its own
//! confuses a different pair of classes:
//!
//! * audio: the carrier tone is set by `class / 2`, so classes 2k and 2k+1
//!   sound alike. A secondary tone is more likely for odd classes, a weak
//!   parity cue.
//! * text: words come from the class's own list, from the list of its text
//!   partner `(class + C/2) mod C`, and from fillers shared by all classes.
//!   Own words are only slightly more frequent than partner words.
//!
//! With four classes audio separates {0,1} from {2,3} and text separates
//! {0,2} from {1,3}, so only the combination pins down the label. Each
//! modality is, independently, rendered for a uniformly random class with
//! probability `corruption`, which keeps even the fused task short of
//! perfect.

use std::f64::consts::PI;
use std::path::Path;

use anyhow::{bail, Context, Result};
use jferc_core::audio::Waveform;
use jferc_core::rng::SeededRng;
use serde::{Deserialize, Serialize};

use crate::manifest::{AudioSource, UtteranceRecord};
use crate::wav::{write_wav, Encoding};

/// Recipe for one synthetic waveform; rendering is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthAudio {
    pub sample_rate: u32,
    pub duration: f64,
    /// `(frequency Hz, amplitude)` pairs.
    pub tones: Vec<(f64, f64)>,
    /// Amplitude of the amplitude-modulated noise component.
    pub am_noise: f64,
    pub am_rate: f64,
    pub am_depth: f64,
    /// White noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl SynthAudio {
    pub fn render(&self) -> Result<Waveform> {
        if !(self.duration > 0.0 && self.duration.is_finite()) || self.sample_rate == 0 {
            bail!("synthetic audio needs a positive duration and sample rate");
        }
        let n = (self.duration * self.sample_rate as f64).round() as usize;
        let sr = self.sample_rate as f64;
        let mut rng = SeededRng::new(self.seed);
        let mut samples: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / sr;
                let tones: f64 = self.tones.iter().map(|&(f, a)| a * (2.0 * PI * f * t).sin()).sum();
                let envelope = (1.0 + self.am_depth * (2.0 * PI * self.am_rate * t).sin()) / (1.0 + self.am_depth);
                let am = self.am_noise * envelope * rng.normal();
                tones + am + self.noise * rng.normal()
            })
            .collect();
        let peak = samples.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        if peak > 0.99 {
            samples.iter_mut().for_each(|x| *x *= 0.99 / peak);
        }
        Ok(Waveform::new(samples, self.sample_rate)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOptions {
    pub sample_rate: u32,
    /// Utterance durations are drawn uniformly from this range, in seconds.
    pub duration: (f64, f64),
    pub speakers: usize,
    /// Per-modality probability of rendering a random class instead.
    pub corruption: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            duration: (0.22, 0.28),
            speakers: 8,
            corruption: 0.2,
        }
    }
}

const CARRIERS: [f64; 4] = [300.0, 1200.0, 2800.0, 5000.0];

const FILLERS: [&str; 10] = ["i", "you", "it", "the", "so", "really", "just", "that", "is", "well"];

const WORDS: [[&str; 4]; 8] = [
    ["okay", "fine", "sure", "alright"],
    ["great", "wonderful", "glad", "yay"],
    ["sorry", "miss", "lost", "tired"],
    ["hate", "stop", "furious", "unfair"],
    ["wow", "unexpected", "suddenly", "whoa"],
    ["afraid", "scared", "worried", "nervous"],
    ["gross", "awful", "disgusting", "yuck"],
    ["excited", "thrilled", "eager", "pumped"],
];

fn class_words(c: usize) -> Vec<String> {
    match WORDS.get(c) {
        Some(ws) => ws.iter().map(|w| w.to_string()).collect(),
        None => (0..4).map(|k| format!("w{c}x{k}")).collect(),
    }
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() < 2 {
        bail!("need at least 2 class weights, got {}", weights.len());
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        bail!("class weights must be finite and nonnegative, got {weights:?}");
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        bail!("class weights must sum to 1, got {sum}");
    }
    if n < weights.len() {
        bail!("n = {n} is smaller than the {} classes", weights.len());
    }
    Ok(())
}

/// One guaranteed utterance per class, the remaining `n - C` labels drawn
/// from `weights`, then shuffled.
pub fn sample_labels(n: usize, weights: &[f64], rng: &mut SeededRng) -> Result<Vec<usize>> {
    check_weights(weights, n)?;
    let mut labels: Vec<usize> = (0..weights.len()).collect();
    labels.extend((weights.len()..n).map(|_| rng.categorical(weights)));
    rng.shuffle(&mut labels);
    Ok(labels)
}

fn utterance_text(class: usize, classes: usize, rng: &mut SeededRng) -> String {
    let partner = (class + classes / 2) % classes;
    let own = class_words(class);
    let other = class_words(partner);
    let len = 4 + rng.below(5);
    let mut words = Vec::with_capacity(len + 1);
    for _ in 0..len {
        let u = rng.uniform();
        let pool: Vec<&str> = if u < 0.34 {
            own.iter().map(String::as_str).collect()
        } else if u < 0.6 {
            other.iter().map(String::as_str).collect()
        } else {
            FILLERS.to_vec()
        };
        words.push(pool[rng.below(pool.len())].to_string());
    }
    let mut s = words.join(" ");
    s.push(['.', '!', '?'][rng.below(3)]);
    s
}

fn utterance_audio(class: usize, opts: &SynthOptions, rng: &mut SeededRng) -> SynthAudio {
    let carrier = CARRIERS[(class / 2) % CARRIERS.len()] * rng.range(0.96, 1.04);
    let mut tones = vec![(carrier, rng.range(0.3, 0.6))];
    let odd = class % 2 == 1;
    if rng.uniform() < if odd { 0.7 } else { 0.3 } {
        tones.push((carrier * 1.5, rng.range(0.15, 0.3)));
    }
    SynthAudio {
        sample_rate: opts.sample_rate,
        duration: rng.range(opts.duration.0, opts.duration.1),
        tones,
        am_noise: rng.range(0.05, 0.15),
        am_rate: if odd { 8.0 } else { 4.0 } + rng.range(-3.0, 3.0),
        am_depth: 0.5,
        noise: rng.range(0.02, 0.08),
        seed: rng.next_u64(),
    }
}

/// Records with inline audio recipes, labelled with `classes[label]`.
pub fn synth_dataset(n: usize, weights: &[f64], classes: &[String], seed: u64, opts: &SynthOptions) -> Result<Vec<UtteranceRecord>> {
    if classes.len() != weights.len() {
        bail!("{} class weights for {} classes", weights.len(), classes.len());
    }
    if !(0.0..=1.0).contains(&opts.corruption) {
        bail!("corruption must lie in [0, 1], got {}", opts.corruption);
    }
    let root = SeededRng::new(seed);
    let labels = sample_labels(n, weights, &mut root.split(0))?;
    let speakers = opts.speakers.max(1);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let mut rng = root.split(1 + i as u64);
            let c = classes.len();
            let rendered = |rng: &mut SeededRng| if rng.uniform() < opts.corruption { rng.below(c) } else { label };
            let (text_class, audio_class) = (rendered(&mut rng), rendered(&mut rng));
            let text = utterance_text(text_class, c, &mut rng);
            let audio = utterance_audio(audio_class, opts, &mut rng);
            UtteranceRecord {
                id: format!("utt{i:05}"),
                text: Some(text),
                embedding_ref: None,
                audio: AudioSource::Synth(audio),
                label: classes[label].clone(),
                speaker: format!("spk{}", rng.below(speakers)),
                split: None,
            }
        })
        .collect())
}

/// Render every inline recipe to `base/subdir/<id>.wav` (32-bit float) and
/// point the record at that file, relative to `base`.
pub fn materialize_audio(records: &mut [UtteranceRecord], base: &Path, subdir: &str) -> Result<()> {
    let dir = base.join(subdir);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for r in records {
        if let AudioSource::Synth(spec) = &r.audio {
            let w = spec.render()?;
            let name = format!("{}.wav", r.id);
            write_wav(&dir.join(&name), w.samples(), w.sample_rate(), Encoding::Float32)?;
            r.audio = AudioSource::Path(format!("{subdir}/{name}"));
        }
    }
    Ok(())
}

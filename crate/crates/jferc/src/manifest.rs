//! JSONL utterance manifests.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::synth::SynthAudio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A WAV file path (relative to the manifest) or a waveform recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AudioSource {
    Path(String),
    Synth(SynthAudio),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtteranceRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// `file#name` into an embedding container, relative to the manifest;
    /// `name` defaults to the record id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<String>,
    pub audio: AudioSource,
    pub label: String,
    #[serde(default)]
    pub speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

impl UtteranceRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            bail!("record with empty id");
        }
        match (&self.text, &self.embedding_ref) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => bail!("record {}: exactly one of text and embedding_ref must be present", self.id),
        }
    }

    /// `(file, tensor name)` of the embedding reference.
    pub fn embedding_target(&self) -> Option<(&str, &str)> {
        self.embedding_ref.as_deref().map(|r| match r.split_once('#') {
            Some((file, name)) => (file, name),
            None => (r, self.id.as_str()),
        })
    }
}

pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<UtteranceRecord>> {
    let mut out: Vec<UtteranceRecord> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: UtteranceRecord =
            serde_json::from_str(line).with_context(|| format!("{origin}:{}: bad record", n + 1))?;
        rec.validate().with_context(|| format!("{origin}:{}", n + 1))?;
        if !seen.insert(rec.id.clone()) {
            bail!("{origin}:{}: duplicate id {:?}", n + 1, rec.id);
        }
        out.push(rec);
    }
    if out.is_empty() {
        bail!("{origin}: manifest has no records");
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn write_manifest(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n")?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

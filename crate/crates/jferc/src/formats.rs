//! On-disk containers: parameter checkpoints, precomputed text embeddings and
//! the vocabulary file.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use jferc_core::text::Vocab;
use jferc_core::{checkpoint, ParamStore, Tensor};

pub fn save_checkpoint(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, checkpoint::encode_store(store)).with_context(|| format!("writing {}", path.display()))
}

pub fn load_checkpoint(path: &Path, store: &mut ParamStore) -> Result<()> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    checkpoint::load_into(store, &bytes).with_context(|| format!("loading {}", path.display()))
}

/// Named tensors in the checkpoint layout, one per utterance id.
pub fn save_embeddings(path: &Path, entries: &BTreeMap<String, Tensor>) -> Result<()> {
    let bytes = checkpoint::encode(entries.iter().map(|(k, v)| (k.as_str(), v)));
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

pub fn load_embeddings(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (name, t) in checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))? {
        if t.rank() != 2 {
            bail!("{}: embedding {name:?} has rank {}, expected [S, dim]", path.display(), t.rank());
        }
        if out.insert(name.clone(), t).is_some() {
            bail!("{}: duplicate embedding {name:?}", path.display());
        }
    }
    Ok(out)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut s = String::new();
    for (tok, id) in vocab.iter() {
        s.push_str(tok);
        s.push('\t');
        s.push_str(&id.to_string());
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (tok, id) = line
            .rsplit_once('\t')
            .with_context(|| format!("{}:{}: expected token<TAB>id", path.display(), n + 1))?;
        let id: u32 = id
            .parse()
            .with_context(|| format!("{}:{}: bad id {id:?}", path.display(), n + 1))?;
        pairs.push((tok.to_string(), id));
    }
    Vocab::from_pairs(pairs).with_context(|| format!("parsing {}", path.display()))
}

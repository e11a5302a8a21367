//! Flat binary tensor container.
//!
//! Layout, all integers little-endian `u64`, all values little-endian `f64`:
//!
//! ```text
//! "JFERC1"
//! repeated until end of input:
//!     name_len, name (UTF-8), rank, dims[rank], data[product(dims)]
//! ```
//!
//! The same container holds model checkpoints and precomputed per-utterance
//! text embeddings (one tensor named by utterance id).

use alloc::string::String;
use alloc::vec::Vec;

use crate::{Error, ParamStore, Result, Tensor};

pub const MAGIC: &[u8; 6] = b"JFERC1";

pub fn encode<'a, I>(entries: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut out = Vec::from(&MAGIC[..]);
    for (name, t) in entries {
        push_u64(&mut out, name.len() as u64);
        out.extend_from_slice(name.as_bytes());
        push_u64(&mut out, t.rank() as u64);
        for &d in t.shape() {
            push_u64(&mut out, d as u64);
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn encode_store(store: &ParamStore) -> Vec<u8> {
    encode(store.iter())
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic string, expected JFERC1".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.len_field("name length")?;
        let name = core::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .into();
        let rank = r.len_field("rank")?;
        if rank == 0 {
            return Err(Error::Format(alloc::format!("tensor {name} has rank 0")));
        }
        let mut dims = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            dims.push(r.len_field("dimension")?);
        }
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(alloc::format!("tensor {name} dimensions overflow")))?;
        let raw = r.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
            "data",
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Tensor::new(&dims, data).map_err(|e| Error::Format(alloc::format!("tensor {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

/// Decode `bytes` and copy every tensor into the same-named parameter.
pub fn load_into(store: &mut ParamStore, bytes: &[u8]) -> Result<()> {
    let entries = decode(bytes)?;
    store.load(entries.iter().map(|(n, t)| (n.as_str(), t)))
}

fn push_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format(alloc::format!(
                "truncated {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn len_field(&mut self, what: &str) -> Result<usize> {
        let raw = self.take(8, what)?;
        let v = u64::from_le_bytes(raw.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(alloc::format!("{what} {v} too large")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(&[2], vec![1.5, -0.25]).unwrap();
        let bytes = encode([("ab", &t)]);
        let mut want = Vec::from(&b"JFERC1"[..]);
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u64.to_le_bytes());
        want.extend_from_slice(&1.5f64.to_le_bytes());
        want.extend_from_slice(&(-0.25f64).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corrupted_magic_rejected() {
        let t = Tensor::scalar(1.0);
        let mut bytes = encode([("x", &t)]);
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_rejected() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let bytes = encode([("x", &t)]);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
    }

    #[test]
    fn empty_container_is_valid() {
        assert!(decode(MAGIC).unwrap().is_empty());
    }
}

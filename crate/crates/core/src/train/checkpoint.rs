//! `MNAC1` tensor-entry files, used for checkpoints and feature caches.
//!
//! Layout: magic, u32 entry count, then per entry a u16 name length, the UTF-8
//! name, a u8 rank, u32 extents and f32 data, all little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"MNAC1";

pub type Entry = (String, Tensor<f32>);

pub fn encode_entries(entries: &[Entry]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let len = u16::try_from(name.len()).map_err(|_| Error::Contract(format!("entry name too long: {name}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Contract(format!("rank too large: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.at)));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_entries(bytes: &[u8], path: &Path) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, at: 0, path };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::format(path, "not an MNAC1 file"));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format(path, "entry name is not UTF-8"))?
            .to_string();
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after last entry"));
    }
    Ok(out)
}

pub fn write_entries(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = encode_entries(entries)?;
    // write-then-rename so readers never see a partial file
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_entries(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_entries(&bytes, path)
}

const MODEL_PREFIX: &str = "meta.model:";
const FINGERPRINT_PREFIX: &str = "meta.fingerprint:";
const EPOCHS: &str = "meta.epochs_run";
const BEST_LOSS: &str = "meta.best_val_loss";

/// Trained parameters plus identity and training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_id: String,
    /// Hash of everything that determined the training run; used to decide reuse.
    pub fingerprint: String,
    pub entries: Vec<Entry>,
    pub epochs_run: usize,
    pub best_val_loss: f32,
}

impl Checkpoint {
    pub fn from_params(
        model_id: impl Into<String>,
        fingerprint: impl Into<String>,
        params: &ParamStore<f32>,
        epochs_run: usize,
        best_val_loss: f32,
    ) -> Self {
        Checkpoint {
            model_id: model_id.into(),
            fingerprint: fingerprint.into(),
            entries: params.entries(),
            epochs_run,
            best_val_loss,
        }
    }

    pub fn to_entries(&self) -> Vec<Entry> {
        let mut out = vec![
            (format!("{MODEL_PREFIX}{}", self.model_id), Tensor::zeros(vec![1])),
            (format!("{FINGERPRINT_PREFIX}{}", self.fingerprint), Tensor::zeros(vec![1])),
            (EPOCHS.to_string(), Tensor::scalar(self.epochs_run as f32)),
            (BEST_LOSS.to_string(), Tensor::scalar(self.best_val_loss)),
        ];
        out.extend(self.entries.iter().cloned());
        out
    }

    pub fn from_entries(entries: Vec<Entry>, path: &Path) -> Result<Self> {
        let mut model_id = None;
        let mut fingerprint = String::new();
        let mut epochs_run = None;
        let mut best_val_loss = None;
        let mut params = Vec::new();
        for (name, t) in entries {
            if let Some(id) = name.strip_prefix(MODEL_PREFIX) {
                model_id = Some(id.to_string());
            } else if let Some(fp) = name.strip_prefix(FINGERPRINT_PREFIX) {
                fingerprint = fp.to_string();
            } else if name == EPOCHS {
                epochs_run = t.item().map(|x| x as usize);
            } else if name == BEST_LOSS {
                best_val_loss = t.item();
            } else {
                params.push((name, t));
            }
        }
        let missing = |what: &str| Error::format(path, format!("checkpoint lacks {what}"));
        Ok(Checkpoint {
            model_id: model_id.ok_or_else(|| missing("a model id"))?,
            fingerprint,
            entries: params,
            epochs_run: epochs_run.ok_or_else(|| missing("epochs_run"))?,
            best_val_loss: best_val_loss.ok_or_else(|| missing("best_val_loss"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_entries(path, &self.to_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_entries(read_entries(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entry_layout_is_bit_exact() {
        let entries = vec![("ab".to_string(), Tensor::new(vec![2], vec![1.5f32, -0.0]).unwrap())];
        let bytes = encode_entries(&entries).unwrap();
        let mut expected = b"MNAC1".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u16.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(1);
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.5f32.to_le_bytes());
        expected.extend_from_slice(&(-0.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        let back = decode_entries(&bytes, Path::new("x")).unwrap();
        assert_eq!(back[0].1.data()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_truncation_and_trailing_bytes() {
        let entries = vec![("w".to_string(), Tensor::ones(vec![2, 3]))];
        let bytes = encode_entries(&entries).unwrap();
        let p = Path::new("x");
        assert!(decode_entries(&bytes[..bytes.len() - 2], p).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_entries(&long, p).is_err());
        assert!(decode_entries(b"MNAV1\0\0\0\0", p).is_err());
    }

    #[test]
    fn checkpoint_metadata_round_trip() {
        let ck = Checkpoint {
            model_id: "backbone_mri_p00".into(),
            fingerprint: "00ff".into(),
            entries: vec![("w".into(), Tensor::new(vec![1, 2], vec![0.25, 3.0]).unwrap())],
            epochs_run: 37,
            best_val_loss: 0.125,
        };
        let back = Checkpoint::from_entries(ck.to_entries(), Path::new("x")).unwrap();
        assert_eq!(back, ck);
    }
}

//! On-disk per-model feature cache: one `MNAC1` file per stage model, one entry per sample key.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::checkpoint::{read_entries, write_entries, Entry};
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::tensor::Tensor;

const FINGERPRINT_PREFIX: &str = "meta.fingerprint:";

#[derive(Clone, Debug)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(FeatureCache { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, handle: &ModelHandle) -> PathBuf {
        self.root.join(format!("{}.features.mnac", handle.name()))
    }

    /// Stores one feature vector per sample key, tagged with the producing run's fingerprint.
    pub fn write(&self, handle: &ModelHandle, fingerprint: &str, features: &[(String, Tensor<f32>)]) -> Result<()> {
        let mut entries: Vec<Entry> = vec![(format!("{FINGERPRINT_PREFIX}{fingerprint}"), Tensor::zeros(vec![1]))];
        entries.extend(features.iter().cloned());
        write_entries(&self.path(handle), &entries)
    }

    /// `(fingerprint, features by key)`; a missing file names the stage that should have produced it.
    pub fn read(&self, handle: &ModelHandle) -> Result<(String, BTreeMap<String, Tensor<f32>>)> {
        let path = self.path(handle);
        if !path.exists() {
            return Err(Error::Missing {
                what: format!("stage {} feature cache", handle.stage()),
                detail: format!("{} (run stage {} first)", path.display(), handle.stage()),
            });
        }
        let mut fingerprint = String::new();
        let mut out = BTreeMap::new();
        for (name, t) in read_entries(&path)? {
            match name.strip_prefix(FINGERPRINT_PREFIX) {
                Some(fp) => fingerprint = fp.to_string(),
                None => {
                    out.insert(name, t);
                }
            }
        }
        Ok((fingerprint, out))
    }

    pub fn fingerprint(&self, handle: &ModelHandle) -> Option<String> {
        self.read(handle).ok().map(|(fp, _)| fp)
    }

    /// Looks up every key, failing on the first absent one.
    pub fn require(
        features: &BTreeMap<String, Tensor<f32>>,
        handle: &ModelHandle,
        keys: &[String],
    ) -> Result<Vec<Tensor<f32>>> {
        keys.iter()
            .map(|k| {
                features.get(k).cloned().ok_or_else(|| Error::Missing {
                    what: format!("stage {} feature cache entry", handle.stage()),
                    detail: format!("{} has no features for {k}", handle.name()),
                })
            })
            .collect()
    }
}

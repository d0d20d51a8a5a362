//! Tab-separated manifest: `subject_id, modality, path, label, split`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::codec::read_volume;
use super::{Modality, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Validation(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub subject_id: String,
    pub modality: Modality,
    pub path: PathBuf,
    pub label: u8,
    pub split: Split,
}

/// One subject's image pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subject {
    pub id: String,
    pub label: u8,
    pub split: Split,
    pub mri: PathBuf,
    pub pet: PathBuf,
}

impl Subject {
    pub fn path(&self, m: Modality) -> &Path {
        match m {
            Modality::Mri => &self.mri,
            Modality::Pet => &self.pet,
        }
    }

    pub fn load(&self, m: Modality) -> Result<Volume> {
        read_volume(self.path(m), m, &self.id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Parses manifest text; relative paths are resolved against `base`.
    pub fn parse(text: &str, source: &Path, base: &Path) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: String| Error::format(source, format!("line {}: {msg}", lineno + 1));
            let fields: Vec<&str> = line.split('\t').collect();
            let [id, modality, path, label, split] = fields[..] else {
                return Err(bad(format!("expected 5 fields, got {}", fields.len())));
            };
            let label = match label {
                "0" => 0,
                "1" => 1,
                _ => return Err(bad(format!("label must be 0 or 1, got {label:?}"))),
            };
            let path = Path::new(path);
            rows.push(ManifestRow {
                subject_id: id.to_string(),
                modality: modality.parse().map_err(|e: Error| bad(e.to_string()))?,
                path: if path.is_absolute() { path.to_path_buf() } else { base.join(path) },
                label,
                split: split.parse().map_err(|e: Error| bad(e.to_string()))?,
            });
        }
        let m = Manifest { rows };
        m.subjects()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Manifest::parse(&text, path, base)
    }

    /// Writes rows with paths relative to the manifest directory where possible.
    pub fn write(&self, path: &Path) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new("."));
        let mut s = String::from("# subject_id\tmodality\tpath\tlabel\tsplit\n");
        for r in &self.rows {
            let p = r.path.strip_prefix(base).unwrap_or(&r.path);
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                r.subject_id,
                r.modality,
                p.display(),
                r.label,
                r.split
            ));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Subjects sorted by id, checking one MRI and one PET row each with consistent label and split.
    pub fn subjects(&self) -> Result<Vec<Subject>> {
        type Partial = (u8, Split, Option<PathBuf>, Option<PathBuf>);
        let mut by_id: BTreeMap<&str, Partial> = BTreeMap::new();
        for r in &self.rows {
            let e = by_id
                .entry(&r.subject_id)
                .or_insert((r.label, r.split, None, None));
            if e.0 != r.label || e.1 != r.split {
                return Err(Error::Validation(format!(
                    "subject {} has inconsistent label or split",
                    r.subject_id
                )));
            }
            let slot = match r.modality {
                Modality::Mri => &mut e.2,
                Modality::Pet => &mut e.3,
            };
            if slot.replace(r.path.clone()).is_some() {
                return Err(Error::Validation(format!(
                    "subject {} has more than one {} row",
                    r.subject_id, r.modality
                )));
            }
        }
        by_id
            .into_iter()
            .map(|(id, (label, split, mri, pet))| match (mri, pet) {
                (Some(mri), Some(pet)) => Ok(Subject {
                    id: id.to_string(),
                    label,
                    split,
                    mri,
                    pet,
                }),
                _ => Err(Error::Validation(format!("subject {id} lacks an MRI/PET pair"))),
            })
            .collect()
    }

    pub fn split(&self, split: Split) -> Result<Vec<Subject>> {
        Ok(self.subjects()?.into_iter().filter(|s| s.split == split).collect())
    }
}

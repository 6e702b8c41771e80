//! Dataset manifests and on-disk dataset directories.
//!
//! A dataset directory holds one SKL1 file per sequence, `manifest.jsonl`
//! (one `{id, file, label, subject, view}` record per line) and an optional
//! `splits.json` mapping protocol names to train/test id lists.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::sequence::{load_sequence, write_sequence, SkeletonSequence};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const SPLITS_FILE: &str = "splits.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub file: String,
    pub label: usize,
    pub subject: u32,
    pub view: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::invalid("manifest", format!("duplicate id {}", e.id)));
            }
        }
        for (name, split) in &self.splits {
            for id in split.train.iter().chain(&split.test) {
                if !seen.contains(id.as_str()) {
                    return Err(Error::invalid(
                        "splits",
                        format!("protocol {name} references unknown id {id}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label + 1).max().unwrap_or(0)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<ManifestEntry>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect()
    }
}

/// Sequences with their manifest, in manifest order.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<SkeletonSequence>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.manifest.entries.iter().map(|e| e.label).collect()
    }

    /// Restricts to the train or test side of a split protocol. An unknown
    /// protocol name is an error; `None` keeps everything.
    pub fn subset(&self, protocol: Option<&str>, test_side: bool) -> Result<Dataset> {
        let Some(name) = protocol else {
            return Ok(self.clone());
        };
        let split = self
            .manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::invalid("split", format!("unknown protocol {name}")))?;
        let ids = if test_side { &split.test } else { &split.train };
        let index: BTreeMap<&str, usize> = self
            .manifest
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect();
        let mut entries = Vec::with_capacity(ids.len());
        let mut sequences = Vec::with_capacity(ids.len());
        for id in ids {
            let &i = index
                .get(id.as_str())
                .ok_or_else(|| Error::invalid("split", format!("unknown id {id}")))?;
            entries.push(self.manifest.entries[i].clone());
            sequences.push(self.sequences[i].clone());
        }
        Ok(Dataset {
            manifest: DatasetManifest {
                entries,
                splits: BTreeMap::new(),
            },
            sequences,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (entry, seq) in self.manifest.entries.iter().zip(&self.sequences) {
            write_sequence(dir.join(&entry.file), seq)?;
        }
        let path = dir.join(MANIFEST_FILE);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(self.manifest.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(&path, e))?;
        if !self.manifest.splits.is_empty() {
            let path = dir.join(SPLITS_FILE);
            let text = serde_json::to_string_pretty(&self.manifest.splits)?;
            fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Dataset> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let entries = DatasetManifest::from_jsonl(&text)?;
        let splits_path = dir.join(SPLITS_FILE);
        let splits = if splits_path.exists() {
            let text = fs::read_to_string(&splits_path).map_err(|e| Error::io(&splits_path, e))?;
            serde_json::from_str(&text)?
        } else {
            BTreeMap::new()
        };
        let manifest = DatasetManifest { entries, splits };
        manifest.validate()?;
        let sequences = manifest
            .entries
            .iter()
            .map(|e| load_sequence(dir.join(&e.file)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, sequences })
    }
}

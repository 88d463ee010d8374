//! Append-only, hash-verified feature store.
//!
//! Each feature set is three files named after its tag (`task2-gallery`):
//! a JSON manifest, the `f64` vector payload and an `identity,camera` label
//! column file. The manifest is written last, so a set exists exactly when
//! its manifest does.

use std::path::{Path, PathBuf};

use bcreid_core::eval::{DatasetTag, FeatureRow, FeatureSet, Split};
use serde::{Deserialize, Serialize};

use crate::dataset_io::{f64_from_bytes, int, read_blob};
use crate::error::{read_string, write_atomic, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TagManifest {
    task: String,
    split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SetManifest {
    extractor_version: String,
    dataset_tag: TagManifest,
    rows: String,
    dim: String,
    hash: String,
    vectors: String,
    labels: String,
}

/// A feature store rooted at one directory.
#[derive(Debug, Clone)]
pub struct FeatureStore {
    dir: PathBuf,
}

impl FeatureStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn manifest_path(&self, tag: DatasetTag) -> PathBuf {
        self.dir.join(format!("{}.json", tag.key()))
    }

    pub fn contains(&self, tag: DatasetTag) -> bool {
        self.manifest_path(tag).exists()
    }

    /// Adds a new set. A tag that already exists is never overwritten.
    pub fn append(&self, fs: &FeatureSet) -> Result<u64> {
        let mpath = self.manifest_path(fs.tag);
        if mpath.exists() {
            return Err(bcreid_core::Error::Protocol(format!(
                "feature set {} already exists; stored features are never recomputed",
                fs.tag.key()
            ))
            .into());
        }
        let key = fs.tag.key();
        let vectors = format!("{key}.f64");
        let labels = format!("{key}.labels.csv");
        write_atomic(&self.dir.join(&vectors), &fs.vector_bytes())?;
        write_atomic(&self.dir.join(&labels), fs.label_text().as_bytes())?;
        let hash = fs.content_hash();
        let m = SetManifest {
            extractor_version: fs.extractor_version.to_string(),
            dataset_tag: TagManifest { task: fs.tag.task.to_string(), split: fs.tag.split.name().into() },
            rows: fs.rows.len().to_string(),
            dim: fs.dim.to_string(),
            hash: format!("{hash:016x}"),
            vectors,
            labels,
        };
        write_atomic(&mpath, &serde_json::to_vec_pretty(&m).expect("manifest serializes"))?;
        Ok(hash)
    }

    /// Loads a set and verifies its content hash.
    pub fn load(&self, tag: DatasetTag) -> Result<FeatureSet> {
        let mpath = self.manifest_path(tag);
        if !mpath.exists() {
            return Err(bcreid_core::Error::Protocol(format!("feature set {} is missing", tag.key())).into());
        }
        let m: SetManifest =
            serde_json::from_str(&read_string(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
        let stored_tag = DatasetTag {
            task: int(&mpath, "dataset_tag.task", &m.dataset_tag.task)?,
            split: Split::parse(&m.dataset_tag.split)
                .ok_or_else(|| Error::format(&mpath, format!("unknown split {:?}", m.dataset_tag.split)))?,
        };
        if stored_tag != tag {
            return Err(Error::format(&mpath, format!("manifest describes {}", stored_tag.key())));
        }
        let rows: usize = int(&mpath, "rows", &m.rows)?;
        let dim: usize = int(&mpath, "dim", &m.dim)?;
        let expected = u64::from_str_radix(&m.hash, 16).map_err(|_| Error::format(&mpath, "hash is not hex"))?;
        let vpath = self.dir.join(&m.vectors);
        let values = f64_from_bytes(&vpath, &read_blob(&vpath)?, rows * dim)?;
        let lpath = self.dir.join(&m.labels);
        let text = String::from_utf8(read_blob(&lpath)?).map_err(|_| Error::format(&lpath, "labels are not UTF-8"))?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != rows {
            return Err(Error::format(&lpath, format!("expected {rows} label rows, found {}", lines.len())));
        }
        let mut out = Vec::with_capacity(rows);
        for (line, v) in lines.iter().zip(values.chunks_exact(dim.max(1))) {
            let (id, cam) = line.split_once(',').ok_or_else(|| Error::format(&lpath, format!("bad label row {line:?}")))?;
            out.push(FeatureRow { identity: int(&lpath, "identity", id)?, camera: int(&lpath, "camera", cam)?, vector: v.to_vec() });
        }
        let version = int(&mpath, "extractor_version", &m.extractor_version)?;
        // Hash first: a tampered payload must surface as an integrity error.
        let fs = FeatureSet { extractor_version: version, tag, dim, rows: out };
        let actual = fs.content_hash();
        if actual != expected {
            return Err(Error::Integrity {
                path: vpath,
                msg: format!("content hash {actual:016x} does not match recorded {expected:016x}"),
            });
        }
        Ok(FeatureSet::new(version, tag, dim, fs.rows)?)
    }

    /// Recorded hash of a stored set, read from its manifest.
    pub fn recorded_hash(&self, tag: DatasetTag) -> Result<u64> {
        let mpath = self.manifest_path(tag);
        let m: SetManifest =
            serde_json::from_str(&read_string(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
        u64::from_str_radix(&m.hash, 16).map_err(|_| Error::format(&mpath, "hash is not hex"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(task: usize) -> FeatureSet {
        let rows = (0..4)
            .map(|i| {
                let a = i as f64 * 0.3;
                FeatureRow { identity: 10 + i / 2, camera: i as usize % 2, vector: vec![a.cos(), a.sin()] }
            })
            .collect::<Vec<_>>();
        FeatureSet::new(task, DatasetTag::gallery(task), 2, rows).unwrap()
    }

    #[test]
    fn append_load_round_trip_and_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path());
        let fs = set(1);
        let h = store.append(&fs).unwrap();
        let back = store.load(DatasetTag::gallery(1)).unwrap();
        assert_eq!(back, fs);
        assert_eq!(back.content_hash(), h);
        let err = store.append(&fs).unwrap_err();
        assert!(err.is_protocol(), "{err}");
        assert!(store.load(DatasetTag::gallery(2)).unwrap_err().is_protocol());
    }

    #[test]
    fn byte_flip_is_an_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::open(dir.path());
        store.append(&set(1)).unwrap();
        let p = dir.path().join("task1-gallery.f64");
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[3] ^= 0x10;
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(store.load(DatasetTag::gallery(1)), Err(Error::Integrity { .. })));
    }
}

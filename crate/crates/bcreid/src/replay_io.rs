//! Replay store persistence: `replay/manifest.json` and `replay/store.bin`.
//!
//! The blob holds, task after task in ascending order, every entry's image
//! followed by every entry's stored feature, little-endian `f64`. The
//! manifest carries labels, counts and per-task digests.

use std::path::Path;

use bcreid_core::hash::fnv1a;
use bcreid_core::model::FEATURE_DIM;
use bcreid_core::synth::{CHANNELS, HEIGHT, WIDTH};
use bcreid_core::trainer::{ReplayEntry, ReplayStore};
use bcreid_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::dataset_io::{f64_bytes, f64_from_bytes, int, read_blob};
use crate::error::{read_string, write_atomic, Error, Result};

const FORMAT: &str = "bcreid-replay/1";
const IMAGE_LEN: usize = CHANNELS * HEIGHT * WIDTH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskManifest {
    task: String,
    count: String,
    identities: Vec<String>,
    digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreManifest {
    format: String,
    image_shape: Vec<String>,
    feature_dim: String,
    blob: String,
    blob_hash: String,
    tasks: Vec<TaskManifest>,
}

pub fn save_replay(store: &ReplayStore, dir: &Path) -> Result<()> {
    let mut blob = Vec::new();
    let mut tasks = Vec::new();
    for t in store.task_indices() {
        let entries = store.entries(t).expect("listed task");
        for e in entries {
            blob.extend(f64_bytes(e.image.data()));
        }
        for e in entries {
            blob.extend(f64_bytes(&e.feature));
        }
        tasks.push(TaskManifest {
            task: t.to_string(),
            count: entries.len().to_string(),
            identities: entries.iter().map(|e| e.identity.to_string()).collect(),
            digest: format!("{:016x}", store.task_digest(t).expect("listed task")),
        });
    }
    let m = StoreManifest {
        format: FORMAT.into(),
        image_shape: [CHANNELS, HEIGHT, WIDTH].iter().map(ToString::to_string).collect(),
        feature_dim: FEATURE_DIM.to_string(),
        blob: "store.bin".into(),
        blob_hash: format!("{:016x}", fnv1a(&blob)),
        tasks,
    };
    write_atomic(&dir.join("store.bin"), &blob)?;
    write_atomic(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&m).expect("manifest serializes"))
}

pub fn load_replay(dir: &Path) -> Result<ReplayStore> {
    let mpath = dir.join("manifest.json");
    let m: StoreManifest =
        serde_json::from_str(&read_string(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format != FORMAT {
        return Err(Error::format(&mpath, format!("unsupported format {:?}", m.format)));
    }
    let bpath = dir.join(&m.blob);
    let blob = read_blob(&bpath)?;
    if format!("{:016x}", fnv1a(&blob)) != m.blob_hash {
        return Err(Error::Integrity { path: bpath, msg: "replay blob hash mismatch".into() });
    }
    let mut store = ReplayStore::new();
    let mut pos = 0usize;
    for tm in &m.tasks {
        let task: usize = int(&mpath, "task", &tm.task)?;
        let n: usize = int(&mpath, "count", &tm.count)?;
        if tm.identities.len() != n {
            return Err(Error::format(&mpath, format!("task {task}: identity list length differs from count")));
        }
        let need = n * (IMAGE_LEN + FEATURE_DIM) * 8;
        if blob.len() < pos + need {
            return Err(Error::format(&bpath, "replay blob is truncated"));
        }
        let images = f64_from_bytes(&bpath, &blob[pos..pos + n * IMAGE_LEN * 8], n * IMAGE_LEN)?;
        pos += n * IMAGE_LEN * 8;
        let feats = f64_from_bytes(&bpath, &blob[pos..pos + n * FEATURE_DIM * 8], n * FEATURE_DIM)?;
        pos += n * FEATURE_DIM * 8;
        let mut entries = Vec::with_capacity(n);
        for (i, id) in tm.identities.iter().enumerate() {
            entries.push(ReplayEntry {
                image: Tensor::new(&[CHANNELS, HEIGHT, WIDTH], images[i * IMAGE_LEN..(i + 1) * IMAGE_LEN].to_vec())?,
                identity: int(&mpath, "identities", id)?,
                task,
                feature: feats[i * FEATURE_DIM..(i + 1) * FEATURE_DIM].to_vec(),
            });
        }
        store.insert_task(task, entries)?;
        if format!("{:016x}", store.task_digest(task).expect("just inserted")) != tm.digest {
            return Err(Error::Integrity { path: mpath.clone(), msg: format!("task {task} digest mismatch") });
        }
    }
    if pos != blob.len() {
        return Err(Error::format(&bpath, "trailing bytes in replay blob"));
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut store = ReplayStore::new();
        for t in 1..=2usize {
            let entries = (0..3)
                .map(|i| ReplayEntry {
                    image: Tensor::from_fn(&[CHANNELS, HEIGHT, WIDTH], |k| (k * (i + t)) as f64 * 1e-3),
                    identity: (t * 10 + i) as u64,
                    task: t,
                    feature: (0..FEATURE_DIM).map(|k| if k == i { 1.0 } else { 0.0 }).collect(),
                })
                .collect();
            store.insert_task(t, entries).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        save_replay(&store, dir.path()).unwrap();
        assert_eq!(load_replay(dir.path()).unwrap(), store);
        let p = dir.path().join("store.bin");
        let mut b = std::fs::read(&p).unwrap();
        b[100] ^= 4;
        std::fs::write(&p, b).unwrap();
        assert!(matches!(load_replay(dir.path()), Err(Error::Integrity { .. })));
    }
}

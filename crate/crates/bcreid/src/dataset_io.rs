//! On-disk dataset format.
//!
//! A task directory holds `manifest.json` plus one raw blob per split
//! (`train.f64`, `query.f64`, `gallery.f64`): little-endian `f64` images,
//! row-major, image after image. Integers in the manifest are decimal
//! strings so they survive any JSON reader unchanged.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use bcreid_core::synth::{BenchmarkConfig, DomainSpec, Sample, TaskDataset, CHANNELS, HEIGHT, WIDTH};
use bcreid_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{read, read_string, write_atomic, Error, Result};

const DATASET_FORMAT: &str = "bcreid-dataset/1";
const BENCHMARK_FORMAT: &str = "bcreid-benchmark/1";
const IMAGE_LEN: usize = CHANNELS * HEIGHT * WIDTH;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DomainManifest {
    index: String,
    color_matrix: Vec<f64>,
    color_offset: Vec<f64>,
    texture_frequency: f64,
    noise_sigma: f64,
    camera_count: String,
    camera_gain: Vec<f64>,
    camera_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitManifest {
    file: String,
    count: String,
    identities: Vec<String>,
    cameras: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    format: String,
    dtype: String,
    endianness: String,
    layout: String,
    image_shape: Vec<String>,
    domain: DomainManifest,
    splits: BTreeMap<String, SplitManifest>,
}

pub(crate) fn int<T: FromStr>(path: &Path, field: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::format(path, format!("field {field}: {s:?} is not a decimal integer")))
}

pub(crate) fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f64_from_bytes(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<f64>> {
    if bytes.len() != expected * 8 {
        return Err(Error::format(path, format!("expected {} bytes, found {}", expected * 8, bytes.len())));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect())
}

/// Reads a blob referenced by a manifest; a missing file is a format error
/// of the manifest's dataset.
pub(crate) fn read_blob(path: &Path) -> Result<Vec<u8>> {
    match std::fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::format(path, "tensor file is missing")),
        Err(e) => Err(Error::io(path, e)),
    }
}

const SPLITS: [&str; 3] = ["train", "query", "gallery"];

fn split<'a>(ds: &'a TaskDataset, name: &str) -> &'a [Sample] {
    match name {
        "train" => &ds.train,
        "query" => &ds.query,
        _ => &ds.gallery,
    }
}

fn manifest_of(ds: &TaskDataset) -> DatasetManifest {
    let d = &ds.domain;
    let splits = SPLITS
        .iter()
        .map(|&name| {
            let s = split(ds, name);
            let m = SplitManifest {
                file: format!("{name}.f64"),
                count: s.len().to_string(),
                identities: s.iter().map(|x| x.identity.to_string()).collect(),
                cameras: s.iter().map(|x| x.camera.to_string()).collect(),
            };
            (name.to_string(), m)
        })
        .collect();
    DatasetManifest {
        format: DATASET_FORMAT.into(),
        dtype: "f64".into(),
        endianness: "little".into(),
        layout: "row-major, image-major".into(),
        image_shape: [CHANNELS, HEIGHT, WIDTH].iter().map(ToString::to_string).collect(),
        domain: DomainManifest {
            index: d.index.to_string(),
            color_matrix: d.color_matrix.to_vec(),
            color_offset: d.color_offset.to_vec(),
            texture_frequency: d.texture_frequency,
            noise_sigma: d.noise_sigma,
            camera_count: d.camera_count.to_string(),
            camera_gain: d.camera_gain.clone(),
            camera_bias: d.camera_bias.clone(),
        },
        splits,
    }
}

/// Writes one task's dataset into `dir`.
pub fn save_dataset(ds: &TaskDataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for name in SPLITS {
        let mut bytes = Vec::with_capacity(split(ds, name).len() * IMAGE_LEN * 8);
        for s in split(ds, name) {
            bytes.extend(f64_bytes(s.image.data()));
        }
        write_atomic(&dir.join(format!("{name}.f64")), &bytes)?;
    }
    let json = serde_json::to_vec_pretty(&manifest_of(ds)).expect("manifest serializes");
    write_atomic(&dir.join("manifest.json"), &json)
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<TaskDataset> {
    let mpath = dir.join("manifest.json");
    let text = match std::fs::read_to_string(&mpath) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::format(&mpath, "manifest is missing")),
        Err(e) => return Err(Error::io(&mpath, e)),
    };
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format != DATASET_FORMAT || m.dtype != "f64" || m.endianness != "little" {
        return Err(Error::format(&mpath, "unsupported format, dtype or endianness"));
    }
    let shape: Vec<usize> = m.image_shape.iter().map(|s| int(&mpath, "image_shape", s)).collect::<Result<_>>()?;
    if shape != [CHANNELS, HEIGHT, WIDTH] {
        return Err(Error::format(&mpath, format!("image shape {shape:?} is not {:?}", [CHANNELS, HEIGHT, WIDTH])));
    }
    let d = &m.domain;
    let arr = |v: &[f64], n: usize, what: &str| -> Result<Vec<f64>> {
        if v.len() != n {
            return Err(Error::format(&mpath, format!("{what} needs {n} values, found {}", v.len())));
        }
        Ok(v.to_vec())
    };
    let camera_count: usize = int(&mpath, "camera_count", &d.camera_count)?;
    let domain = DomainSpec {
        index: int(&mpath, "domain.index", &d.index)?,
        color_matrix: arr(&d.color_matrix, 9, "color_matrix")?.try_into().expect("length checked"),
        color_offset: arr(&d.color_offset, 3, "color_offset")?.try_into().expect("length checked"),
        texture_frequency: d.texture_frequency,
        noise_sigma: d.noise_sigma,
        camera_count,
        camera_gain: arr(&d.camera_gain, camera_count, "camera_gain")?,
        camera_bias: arr(&d.camera_bias, camera_count, "camera_bias")?,
    };
    let mut out = TaskDataset { domain, train: Vec::new(), query: Vec::new(), gallery: Vec::new() };
    for name in SPLITS {
        let sm = m.splits.get(name).ok_or_else(|| Error::format(&mpath, format!("split {name} is missing")))?;
        let count: usize = int(&mpath, "count", &sm.count)?;
        if sm.identities.len() != count || sm.cameras.len() != count {
            return Err(Error::format(&mpath, format!("split {name}: label columns do not have {count} rows")));
        }
        let bpath = dir.join(&sm.file);
        let values = f64_from_bytes(&bpath, &read_blob(&bpath)?, count * IMAGE_LEN)?;
        let mut samples = Vec::with_capacity(count);
        for (i, img) in values.chunks_exact(IMAGE_LEN).enumerate() {
            samples.push(Sample {
                image: Tensor::new(&[CHANNELS, HEIGHT, WIDTH], img.to_vec())?,
                identity: int(&mpath, "identities", &sm.identities[i])?,
                camera: int(&mpath, "cameras", &sm.cameras[i])?,
            });
        }
        match name {
            "train" => out.train = samples,
            "query" => out.query = samples,
            _ => out.gallery = samples,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BenchmarkManifest {
    format: String,
    seed: String,
    tasks: String,
    ids_per_domain_train: String,
    ids_per_domain_eval: String,
    images_per_id: String,
    camera_count: String,
    noise_sigma: f64,
    offset_gap: f64,
    task_dirs: Vec<String>,
}

/// A generated benchmark with the settings it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub seed: u64,
    pub suite: Vec<TaskDataset>,
}

pub fn task_dir_name(t: usize) -> String {
    format!("task_{t}")
}

/// Writes `benchmark.json` and one `task_{t}` directory per task.
pub fn save_benchmark(b: &Benchmark, dir: &Path) -> Result<()> {
    for ds in &b.suite {
        save_dataset(ds, &dir.join(task_dir_name(ds.index())))?;
    }
    let c = &b.config;
    let m = BenchmarkManifest {
        format: BENCHMARK_FORMAT.into(),
        seed: b.seed.to_string(),
        tasks: c.tasks.to_string(),
        ids_per_domain_train: c.ids_per_domain_train.to_string(),
        ids_per_domain_eval: c.ids_per_domain_eval.to_string(),
        images_per_id: c.images_per_id.to_string(),
        camera_count: c.camera_count.to_string(),
        noise_sigma: c.noise_sigma,
        offset_gap: c.offset_gap,
        task_dirs: b.suite.iter().map(|d| task_dir_name(d.index())).collect(),
    };
    write_atomic(&dir.join("benchmark.json"), &serde_json::to_vec_pretty(&m).expect("manifest serializes"))
}

pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let mpath = dir.join("benchmark.json");
    if !mpath.exists() {
        return Err(Error::Config(format!("no benchmark found at {} (run gen-data first)", dir.display())));
    }
    let m: BenchmarkManifest =
        serde_json::from_str(&read_string(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format != BENCHMARK_FORMAT {
        return Err(Error::format(&mpath, format!("unsupported format {:?}", m.format)));
    }
    let config = BenchmarkConfig {
        tasks: int(&mpath, "tasks", &m.tasks)?,
        ids_per_domain_train: int(&mpath, "ids_per_domain_train", &m.ids_per_domain_train)?,
        ids_per_domain_eval: int(&mpath, "ids_per_domain_eval", &m.ids_per_domain_eval)?,
        images_per_id: int(&mpath, "images_per_id", &m.images_per_id)?,
        camera_count: int(&mpath, "camera_count", &m.camera_count)?,
        noise_sigma: m.noise_sigma,
        offset_gap: m.offset_gap,
    };
    let suite = m.task_dirs.iter().map(|d| load_dataset(&dir.join(d))).collect::<Result<Vec<_>>>()?;
    if suite.len() != config.tasks {
        return Err(Error::format(&mpath, "task directory count does not match the task count"));
    }
    Ok(Benchmark { config, seed: int(&mpath, "seed", &m.seed)?, suite })
}

/// FNV-1a over every file of the benchmark in a fixed order; identifies the
/// data a run was trained on.
pub fn benchmark_digest(dir: &Path) -> Result<u64> {
    let mut h = bcreid_core::hash::Fnv1a::new();
    h.update(&read(&dir.join("benchmark.json"))?);
    let b: BenchmarkManifest = serde_json::from_slice(&read(&dir.join("benchmark.json"))?)
        .map_err(|e| Error::format(&dir.join("benchmark.json"), e.to_string()))?;
    for d in &b.task_dirs {
        for f in ["manifest.json", "train.f64", "query.f64", "gallery.f64"] {
            h.update(&read(&dir.join(d).join(f))?);
        }
    }
    Ok(h.finish())
}

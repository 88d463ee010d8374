//! Feature sets, ranking and retrieval metrics.
//!
//! Similarity is the dot product of unit vectors. Gallery rows sharing both
//! identity and camera with the query are dropped before ranking. Ties in
//! similarity are broken by ascending gallery row index.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use crate::error::{bail, Result};
use crate::hash::Fnv1a;
use crate::model::{self, ModelParams, FEATURE_DIM};
use crate::synth::Sample;

/// Which split of which task a feature set holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Query,
    Gallery,
    Replay,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Query => "query",
            Self::Gallery => "gallery",
            Self::Replay => "replay",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "query" => Some(Self::Query),
            "gallery" => Some(Self::Gallery),
            "replay" => Some(Self::Replay),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DatasetTag {
    pub task: usize,
    pub split: Split,
}

impl DatasetTag {
    pub fn gallery(task: usize) -> Self {
        Self { task, split: Split::Gallery }
    }

    /// Stable textual form, e.g. `task2-gallery`.
    pub fn key(&self) -> String {
        format!("task{}-{}", self.task, self.split.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub identity: u64,
    pub camera: usize,
    pub vector: Vec<f64>,
}

/// Features of one split, produced by one model version.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    /// Task index of the model that produced the vectors.
    pub extractor_version: usize,
    pub tag: DatasetTag,
    pub dim: usize,
    pub rows: Vec<FeatureRow>,
}

impl FeatureSet {
    pub fn new(extractor_version: usize, tag: DatasetTag, dim: usize, rows: Vec<FeatureRow>) -> Result<Self> {
        if rows.is_empty() {
            bail!(Dimension, "feature set {} has no rows", tag.key());
        }
        for (i, r) in rows.iter().enumerate() {
            if r.vector.len() != dim {
                bail!(Dimension, "row {} has width {}, expected {}", i, r.vector.len(), dim);
            }
            let n = libm::sqrt(r.vector.iter().fold(0.0, |a, v| a + v * v));
            if !((n - 1.0).abs() <= 1e-9) {
                bail!(Degenerate, "row {} of {} is not unit norm ({})", i, tag.key(), n);
            }
        }
        Ok(Self { extractor_version, tag, dim, rows })
    }

    /// Little-endian `f64` vectors, row-major.
    pub fn vector_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows.len() * self.dim * 8);
        for r in &self.rows {
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// One `identity,camera` line per row.
    pub fn label_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            writeln!(s, "{},{}", r.identity, r.camera).expect("write to string");
        }
        s
    }

    /// FNV-1a over the vector bytes followed by the label text.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&self.vector_bytes());
        h.update(self.label_text().as_bytes());
        h.finish()
    }
}

/// Embeds samples with the inference path of `params`, rows in input order.
pub fn extract_features(params: &ModelParams, samples: &[Sample], tag: DatasetTag) -> Result<FeatureSet> {
    let images = model::stack_images(samples.iter().map(|s| &s.image))?;
    let feats = model::embed(params, &images)?;
    let rows = samples
        .iter()
        .zip(feats.data().chunks_exact(FEATURE_DIM))
        .map(|(s, v)| FeatureRow { identity: s.identity, camera: s.camera, vector: v.to_vec() })
        .collect();
    FeatureSet::new(params.task_index, tag, FEATURE_DIM, rows)
}

/// Gallery rows ordered by similarity to one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    /// Gallery row indices after exclusion, best first.
    pub order: Vec<usize>,
    pub similarities: Vec<f64>,
    pub matches: Vec<bool>,
}

impl RankedList {
    pub fn match_count(&self) -> usize {
        self.matches.iter().filter(|&&m| m).count()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Ranks the gallery for one query. An empty list signals that every
/// gallery row was excluded.
pub fn rank(query: &FeatureRow, gallery: &[FeatureRow]) -> RankedList {
    let mut scored: Vec<(usize, f64)> = gallery
        .iter()
        .enumerate()
        .filter(|(_, g)| !(g.identity == query.identity && g.camera == query.camera))
        .map(|(i, g)| (i, dot(&query.vector, &g.vector)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    RankedList {
        matches: scored.iter().map(|&(i, _)| gallery[i].identity == query.identity).collect(),
        similarities: scored.iter().map(|&(_, s)| s).collect(),
        order: scored.into_iter().map(|(i, _)| i).collect(),
    }
}

/// `(1/#matches) · Σ_{k: match at rank k} precision@k`; `None` without matches.
pub fn average_precision(rl: &RankedList) -> Option<f64> {
    let total = rl.match_count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &m) in rl.matches.iter().enumerate() {
        if m {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// mAP and Rank-1 over a query set, with the count of queries left out for
/// lacking any valid match.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrievalMetrics {
    pub map: f64,
    pub rank1: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

/// Ranks every query against the gallery and aggregates in query order.
pub fn evaluate(queries: &[FeatureRow], gallery: &[FeatureRow]) -> Result<RetrievalMetrics> {
    if gallery.is_empty() || queries.is_empty() {
        bail!(Protocol, "evaluation needs at least one query and one gallery row");
    }
    let (mut ap_sum, mut r1_sum, mut evaluated, mut excluded) = (0.0, 0.0, 0usize, 0usize);
    for q in queries {
        let rl = rank(q, gallery);
        match average_precision(&rl) {
            Some(ap) => {
                ap_sum += ap;
                r1_sum += if rl.matches[0] { 1.0 } else { 0.0 };
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    if evaluated == 0 {
        bail!(Degenerate, "no query has a valid match in the gallery");
    }
    Ok(RetrievalMetrics { map: ap_sum / evaluated as f64, rank1: r1_sum / evaluated as f64, evaluated, excluded })
}

/// Per-dataset metrics plus their unweighted mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<(String, RetrievalMetrics)>,
}

impl MetricsTable {
    /// Arithmetic means of the mAP and Rank-1 columns.
    pub fn average(&self) -> (f64, f64) {
        let n = self.rows.len() as f64;
        let map = self.rows.iter().fold(0.0, |a, (_, m)| a + m.map) / n;
        let r1 = self.rows.iter().fold(0.0, |a, (_, m)| a + m.rank1) / n;
        (map, r1)
    }

    /// CSV with header `dataset,mAP,rank1`, one row per dataset and a final
    /// `Average` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("dataset,mAP,rank1\n");
        for (name, m) in &self.rows {
            writeln!(s, "{},{:.6},{:.6}", name, m.map, m.rank1).expect("write to string");
        }
        let (map, r1) = self.average();
        writeln!(s, "Average,{:.6},{:.6}", map, r1).expect("write to string");
        s
    }
}

//! The per-task retrieval model.
//!
//! A three-layer convolutional encoder produces a `B×32×20×8` map. Two
//! channel-attention encoders turn the map into per-sample channel masks:
//! `m_old` (inherited from the previous task) and `m_new`. The global branch
//! pools the map under the consolidated mask into the retrieval feature; two
//! part branches pool five horizontal slabs under `m_old` and `m_new` and feed
//! the frozen old part head and the trainable new part head.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::hash::Fnv1a;
use crate::synth::{CHANNELS, HEIGHT, WIDTH};
use crate::tensor::Tensor;

pub const FEATURE_DIM: usize = 32;
pub const ATTN_HIDDEN: usize = 8;
pub const PARTS: usize = 5;
pub const GEM_P: f64 = 3.0;
pub const GEM_EPS: f64 = 1e-6;
pub const MAP_HEIGHT: usize = 20;
pub const MAP_WIDTH: usize = 8;
const CONV_SHAPES: [[usize; 4]; 3] = [[16, 3, 3, 3], [32, 16, 3, 3], [FEATURE_DIM, 32, 3, 3]];
const CONV_STRIDES: [usize; 3] = [1, 2, 1];

/// How the old and new attention masks are combined for the global branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consolidation {
    /// Elementwise product.
    Multiply,
    /// Elementwise mean.
    Average,
}

impl Consolidation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Multiply => "multiply",
            Self::Average => "average",
        }
    }
}

/// Parameters of one channel-attention encoder:
/// `sigmoid(relu(gap(map) · w1) · w2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w1: Tensor,
    pub w2: Tensor,
}

/// Every trainable value of the task-`t` model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv: [Tensor; 3],
    pub attn_new: AttentionParams,
    pub attn_old: AttentionParams,
    /// `32×Z_t`.
    pub id_head: Tensor,
    /// `32×N`.
    pub part_head: Tensor,
    /// 1-based index of the task these parameters were trained for.
    pub task_index: usize,
    /// Mask used by the global branch; `None` pools the raw map.
    pub attention: Option<Consolidation>,
}

/// Part head of the previous task. Never updated.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenOldHead {
    pub part_head: Tensor,
}

impl FrozenOldHead {
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&self.part_head.to_le_bytes());
        h.finish()
    }
}

fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        std * z
    })
}

fn fresh_id_head(identities: usize, rng: &mut impl Rng) -> Tensor {
    gaussian(&[FEATURE_DIM, identities], 0.05, rng)
}

fn fresh_attention(rng: &mut impl Rng) -> AttentionParams {
    AttentionParams {
        w1: gaussian(&[FEATURE_DIM, ATTN_HIDDEN], libm::sqrt(2.0 / FEATURE_DIM as f64), rng),
        w2: gaussian(&[ATTN_HIDDEN, FEATURE_DIM], 0.05, rng),
    }
}

/// Names of the parameter tensors, in the order of [`ModelParams::tensors`].
pub const PARAM_NAMES: [&str; 9] = [
    "conv1",
    "conv2",
    "conv3",
    "attn_new.w1",
    "attn_new.w2",
    "attn_old.w1",
    "attn_old.w2",
    "id_head",
    "part_head",
];

impl ModelParams {
    /// Randomly initialized task-1 model for `identities` training classes.
    pub fn init(identities: usize, attention: Option<Consolidation>, rng: &mut impl Rng) -> Result<Self> {
        if identities < 2 {
            bail!(Config, "identity head needs at least 2 classes, got {}", identities);
        }
        let conv = CONV_SHAPES.map(|s| {
            let fan_in = (s[1] * s[2] * s[3]) as f64;
            gaussian(&s, libm::sqrt(2.0 / fan_in), rng)
        });
        let attn_new = fresh_attention(rng);
        let attn_old = attn_new.clone();
        Ok(Self {
            conv,
            attn_new,
            attn_old,
            id_head: fresh_id_head(identities, rng),
            part_head: gaussian(&[FEATURE_DIM, PARTS], 0.05, rng),
            task_index: 1,
            attention,
        })
    }

    /// Moves to the next task: freezes the current part head, copies the
    /// new attention encoder into the old one and replaces the identity head.
    pub fn advance(&mut self, identities: usize, rng: &mut impl Rng) -> Result<FrozenOldHead> {
        if identities < 2 {
            bail!(Config, "identity head needs at least 2 classes, got {}", identities);
        }
        let frozen = FrozenOldHead { part_head: self.part_head.clone() };
        self.attn_old = self.attn_new.clone();
        self.id_head = fresh_id_head(identities, rng);
        self.task_index += 1;
        Ok(frozen)
    }

    pub fn identities(&self) -> usize {
        self.id_head.shape()[1]
    }

    pub fn has_old_branch(&self) -> bool {
        self.task_index >= 2
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.conv[0],
            &self.conv[1],
            &self.conv[2],
            &self.attn_new.w1,
            &self.attn_new.w2,
            &self.attn_old.w1,
            &self.attn_old.w2,
            &self.id_head,
            &self.part_head,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        let [c0, c1, c2] = &mut self.conv;
        [
            c0,
            c1,
            c2,
            &mut self.attn_new.w1,
            &mut self.attn_new.w2,
            &mut self.attn_old.w1,
            &mut self.attn_old.w2,
            &mut self.id_head,
            &mut self.part_head,
        ]
    }

    /// Rebuilds parameters from tensors listed in [`PARAM_NAMES`] order.
    pub fn from_tensors(task_index: usize, attention: Option<Consolidation>, t: Vec<Tensor>) -> Result<Self> {
        let Ok([c0, c1, c2, an1, an2, ao1, ao2, id_head, part_head]) = <[Tensor; 9]>::try_from(t) else {
            bail!(Dimension, "expected {} parameter tensors", PARAM_NAMES.len());
        };
        for (i, c) in [&c0, &c1, &c2].into_iter().enumerate() {
            if c.shape() != CONV_SHAPES[i] {
                bail!(Dimension, "conv{} has shape {:?}, expected {:?}", i + 1, c.shape(), CONV_SHAPES[i]);
            }
        }
        for (name, w, s) in [
            ("attn_new.w1", &an1, [FEATURE_DIM, ATTN_HIDDEN]),
            ("attn_new.w2", &an2, [ATTN_HIDDEN, FEATURE_DIM]),
            ("attn_old.w1", &ao1, [FEATURE_DIM, ATTN_HIDDEN]),
            ("attn_old.w2", &ao2, [ATTN_HIDDEN, FEATURE_DIM]),
            ("part_head", &part_head, [FEATURE_DIM, PARTS]),
        ] {
            if w.shape() != s {
                bail!(Dimension, "{} has shape {:?}, expected {:?}", name, w.shape(), s);
            }
        }
        if id_head.rank() != 2 || id_head.shape()[0] != FEATURE_DIM || id_head.shape()[1] < 2 {
            bail!(Dimension, "id_head has shape {:?}, expected 32×Z with Z ≥ 2", id_head.shape());
        }
        if task_index == 0 {
            bail!(Config, "task index is 1-based");
        }
        Ok(Self {
            conv: [c0, c1, c2],
            attn_new: AttentionParams { w1: an1, w2: an2 },
            attn_old: AttentionParams { w1: ao1, w2: ao2 },
            id_head,
            part_head,
            task_index,
            attention,
        })
    }

    /// Digest over task index, attention mode and all tensors.
    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::new();
        h.update(&(self.task_index as u64).to_le_bytes());
        h.update(&[attention_code(self.attention)]);
        for t in self.tensors() {
            h.update(&t.to_le_bytes());
        }
        h.finish()
    }

    /// Registers every parameter in `g`; trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let mut add = |t: &Tensor| if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) };
        let v = self.tensors().map(&mut add);
        ParamVars {
            conv: [v[0], v[1], v[2]],
            attn_new: [v[3], v[4]],
            attn_old: [v[5], v[6]],
            id_head: v[7],
            part_head: v[8],
        }
    }
}

/// Stable one-byte code for the attention mode, used in digests and files.
pub fn attention_code(a: Option<Consolidation>) -> u8 {
    match a {
        None => 0,
        Some(Consolidation::Multiply) => 1,
        Some(Consolidation::Average) => 2,
    }
}

pub fn attention_from_code(code: u8) -> Option<Option<Consolidation>> {
    match code {
        0 => Some(None),
        1 => Some(Some(Consolidation::Multiply)),
        2 => Some(Some(Consolidation::Average)),
        _ => None,
    }
}

/// Graph handles of a bound [`ModelParams`].
#[derive(Debug, Clone, Copy)]
pub struct ParamVars {
    pub conv: [Var; 3],
    pub attn_new: [Var; 2],
    pub attn_old: [Var; 2],
    pub id_head: Var,
    pub part_head: Var,
}

impl ParamVars {
    /// Handles in [`PARAM_NAMES`] order.
    pub fn all(&self) -> [Var; 9] {
        [
            self.conv[0],
            self.conv[1],
            self.conv[2],
            self.attn_new[0],
            self.attn_new[1],
            self.attn_old[0],
            self.attn_old[1],
            self.id_head,
            self.part_head,
        ]
    }
}

/// Stacks `3×40×16` images into one `B×3×40×16` tensor.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut b = 0;
    for img in images {
        if img.shape() != [CHANNELS, HEIGHT, WIDTH] {
            bail!(Dimension, "image shape {:?}, expected {:?}", img.shape(), [CHANNELS, HEIGHT, WIDTH]);
        }
        data.extend_from_slice(img.data());
        b += 1;
    }
    if b == 0 {
        bail!(Dimension, "empty image batch");
    }
    Tensor::new(&[b, CHANNELS, HEIGHT, WIDTH], data)
}

/// Convolutional encoder: `B×3×40×16 → B×32×20×8`.
pub fn encoder_forward(g: &mut Graph, conv: &[Var; 3], batch: Var) -> Result<Var> {
    let s = g.value(batch).shape();
    if s.len() != 4 || s[1..] != [CHANNELS, HEIGHT, WIDTH] {
        bail!(Dimension, "encoder input shape {:?}, expected B×{}×{}×{}", s, CHANNELS, HEIGHT, WIDTH);
    }
    let mut x = batch;
    for (k, stride) in conv.iter().zip(CONV_STRIDES) {
        let y = g.conv2d(x, *k, stride, 1)?;
        x = g.relu(y)?;
    }
    Ok(x)
}

/// Channel attention `sigmoid(relu(gap(map)·w1)·w2)`: `B×C×H×W → B×C`.
pub fn attention_mask(g: &mut Graph, attn: &[Var; 2], map: Var) -> Result<Var> {
    let gap = g.spatial_mean(map)?;
    let h = g.matmul(gap, attn[0])?;
    let h = g.relu(h)?;
    let z = g.matmul(h, attn[1])?;
    g.sigmoid(z)
}

/// Combines two masks of identical shape on the graph.
pub fn consolidate(g: &mut Graph, m_old: Var, m_new: Var, mode: Consolidation) -> Result<Var> {
    if g.value(m_old).shape() != g.value(m_new).shape() {
        bail!(Dimension, "mask shapes {:?} and {:?} differ", g.value(m_old).shape(), g.value(m_new).shape());
    }
    match mode {
        Consolidation::Multiply => g.mul(m_old, m_new),
        Consolidation::Average => {
            let s = g.add(m_old, m_new)?;
            g.scale(s, 0.5)
        }
    }
}

/// Plain-value version of [`consolidate`].
pub fn consolidate_masks(m_old: &[f64], m_new: &[f64], mode: Consolidation) -> Result<Vec<f64>> {
    if m_old.len() != m_new.len() {
        bail!(Dimension, "mask lengths {} and {} differ", m_old.len(), m_new.len());
    }
    Ok(m_old
        .iter()
        .zip(m_new)
        .map(|(&a, &b)| match mode {
            Consolidation::Multiply => a * b,
            Consolidation::Average => (a + b) * 0.5,
        })
        .collect())
}

fn apply_mask(g: &mut Graph, map: Var, mask: Option<Var>) -> Result<Var> {
    match mask {
        Some(m) => g.channel_mask(map, m),
        None => Ok(map),
    }
}

/// Global branch: GeM over the masked map. Returns `(raw, normalized)`,
/// both `B×32`.
pub fn global_feature(g: &mut Graph, map: Var, mask: Option<Var>) -> Result<(Var, Var)> {
    let masked = apply_mask(g, map, mask)?;
    let raw = g.gem_pool(masked, GEM_P, GEM_EPS)?;
    let normalized = g.l2_normalize(raw)?;
    Ok((raw, normalized))
}

/// Part branch: GeM over `parts` horizontal slabs of the masked map,
/// `B×parts×32`, slab 0 at the top.
pub fn part_features(g: &mut Graph, map: Var, mask: Option<Var>, parts: usize) -> Result<Var> {
    let masked = apply_mask(g, map, mask)?;
    g.gem_pool_parts(masked, parts, GEM_P, GEM_EPS)
}

/// Identity logits `feat · head`: `B×32 · 32×Z → B×Z`.
pub fn classify_identity(g: &mut Graph, head: Var, feat: Var) -> Result<Var> {
    g.matmul(feat, head)
}

/// Part logits for `B×N×32` part features: `(B·N)×N`, row `b·N + n` belongs
/// to part `n` of sample `b`.
pub fn classify_parts(g: &mut Graph, head: Var, parts: Var) -> Result<Var> {
    let s = g.value(parts).shape().to_vec();
    let hs = g.value(head).shape().to_vec();
    if s.len() != 3 || hs.len() != 2 || s[2] != hs[0] || s[1] != hs[1] {
        bail!(Dimension, "part features {:?} do not fit part head {:?}", s, hs);
    }
    let flat = g.reshape(parts, &[s[0] * s[1], s[2]])?;
    g.matmul(flat, head)
}

/// Which branches [`forward`] builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchConfig {
    pub parts: bool,
    pub attention: Option<Consolidation>,
    /// Whether the inherited attention encoder takes part (tasks after the first).
    pub old_branch: bool,
}

/// Graph handles produced by one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub map: Var,
    pub m_new: Option<Var>,
    pub m_old: Option<Var>,
    pub global_mask: Option<Var>,
    pub raw: Var,
    pub normalized: Var,
    pub id_logits: Var,
    pub new_part_logits: Option<Var>,
    /// Part features entering the frozen head, and its logits.
    pub old_parts: Option<Var>,
    pub old_part_logits: Option<Var>,
}

/// Full training forward pass.
///
/// With attention on, the global branch pools under the consolidated mask
/// (or `m_new` alone while there is no old branch), the new part branch
/// under `m_new` and the old part branch under `m_old`. With attention off,
/// every branch pools the raw map. The old part branch exists only when
/// `frozen` is given and parts are on.
pub fn forward(
    g: &mut Graph,
    p: &ParamVars,
    frozen: Option<Var>,
    images: Var,
    cfg: BranchConfig,
) -> Result<ForwardOut> {
    let map = encoder_forward(g, &p.conv, images)?;
    let (m_new, m_old, global_mask) = match cfg.attention {
        None => (None, None, None),
        Some(mode) => {
            let m_new = attention_mask(g, &p.attn_new, map)?;
            match cfg.old_branch {
                true => {
                    let m_old = attention_mask(g, &p.attn_old, map)?;
                    let m = consolidate(g, m_old, m_new, mode)?;
                    (Some(m_new), Some(m_old), Some(m))
                }
                false => (Some(m_new), None, Some(m_new)),
            }
        }
    };
    let (raw, normalized) = global_feature(g, map, global_mask)?;
    let id_logits = classify_identity(g, p.id_head, raw)?;
    let (mut new_part_logits, mut old_parts, mut old_part_logits) = (None, None, None);
    if cfg.parts {
        let np = part_features(g, map, m_new, PARTS)?;
        new_part_logits = Some(classify_parts(g, p.part_head, np)?);
        if let Some(head) = frozen {
            let op = part_features(g, map, m_old, PARTS)?;
            old_part_logits = Some(classify_parts(g, head, op)?);
            old_parts = Some(op);
        }
    }
    Ok(ForwardOut { map, m_new, m_old, global_mask, raw, normalized, id_logits, new_part_logits, old_parts, old_part_logits })
}

const INFERENCE_CHUNK: usize = 64;

/// Inference path: normalized global features `B×32` for a `B×3×40×16`
/// batch. Heads are not used.
pub fn embed(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let s = images.shape();
    if s.len() != 4 || s[1..] != [CHANNELS, HEIGHT, WIDTH] {
        bail!(Dimension, "image batch shape {:?}, expected B×{}×{}×{}", s, CHANNELS, HEIGHT, WIDTH);
    }
    let per_image = CHANNELS * HEIGHT * WIDTH;
    let mut out = Vec::with_capacity(s[0] * FEATURE_DIM);
    for chunk in images.data().chunks(INFERENCE_CHUNK * per_image) {
        let b = chunk.len() / per_image;
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[b, CHANNELS, HEIGHT, WIDTH], chunk.to_vec())?);
        let pv = params.bind(&mut g, false);
        let map = encoder_forward(&mut g, &pv.conv, x)?;
        let mask = match params.attention {
            None => None,
            Some(mode) => {
                let m_new = attention_mask(&mut g, &pv.attn_new, map)?;
                if params.has_old_branch() {
                    let m_old = attention_mask(&mut g, &pv.attn_old, map)?;
                    Some(consolidate(&mut g, m_old, m_new, mode)?)
                } else {
                    Some(m_new)
                }
            }
        };
        let (_, normalized) = global_feature(&mut g, map, mask)?;
        out.extend_from_slice(g.value(normalized).data());
    }
    Tensor::new(&[s[0], FEATURE_DIM], out)
}

/// Per-sample attention masks `(m_old, m_new)` of the inference path, for
/// diagnostics.
pub fn masks(params: &ModelParams, images: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let x = g.constant(images.clone());
    let pv = params.bind(&mut g, false);
    let map = encoder_forward(&mut g, &pv.conv, x)?;
    let m_old = attention_mask(&mut g, &pv.attn_old, map)?;
    let m_new = attention_mask(&mut g, &pv.attn_new, map)?;
    Ok((g.value(m_old).clone(), g.value(m_new).clone()))
}

/// Zero-filled batch, handy for shape checks.
pub fn zero_batch(b: usize) -> Tensor {
    Tensor::zeros(&[b, CHANNELS, HEIGHT, WIDTH])
}

//! Sequential task training with replay and a frozen old part head.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Error, Result};
use crate::graph::Graph;
use crate::hash::Fnv1a;
use crate::losses::{self, LossTerms, LossWeights, ReplayBank};
use crate::model::{self, BranchConfig, Consolidation, FrozenOldHead, ModelParams, FEATURE_DIM};
use crate::synth::{Sample, TaskDataset};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    /// Identities per mini-batch.
    pub p: usize,
    /// Instances per identity.
    pub k: usize,
    pub replay_batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub replay_ids_per_task: usize,
    pub replay_images_per_id: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: 20,
            p: 8,
            k: 4,
            replay_batch: 16,
            lr: 0.05,
            momentum: 0.9,
            replay_ids_per_task: 50,
            replay_images_per_id: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.p * self.k < 4 || self.p < 2 {
            bail!(Config, "PK sampler needs K >= 2, P >= 2 and P*K >= 4 (got P={}, K={})", self.p, self.k);
        }
        if self.epochs_per_task == 0 || self.replay_batch == 0 {
            bail!(Config, "epochs_per_task and replay_batch must be positive");
        }
        if self.replay_ids_per_task == 0 || self.replay_images_per_id == 0 {
            bail!(Config, "replay capacity must be positive");
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "need lr > 0 and momentum in [0, 1)");
        }
        Ok(())
    }

    /// Mini-batches per epoch: enough to visit the training split once.
    pub fn steps_per_epoch(&self, train_len: usize) -> usize {
        train_len.div_ceil(self.p * self.k).max(1)
    }
}

/// Which components of the objective and model are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub cmcl: bool,
    pub pcl: bool,
    /// Attention masks and their consolidation; `None` disables both.
    pub attention: Option<Consolidation>,
    /// Cosine similarity in the compatibility loss (raw dot products if off).
    pub normalize_cmcl: bool,
}

impl Ablation {
    pub const FINETUNE: Self = Self { cmcl: false, pcl: false, attention: None, normalize_cmcl: true };
    pub const PROPOSED: Self =
        Self { cmcl: true, pcl: true, attention: Some(Consolidation::Multiply), normalize_cmcl: true };
}

/// One retained replay image with the feature its task's model gave it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub image: Tensor,
    pub identity: u64,
    pub task: usize,
    /// Normalized global feature, fixed at insertion.
    pub feature: Vec<f64>,
}

/// Replay entries grouped by origin task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReplayStore {
    tasks: BTreeMap<usize, Vec<ReplayEntry>>,
}

impl ReplayStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tasks.values().map(Vec::len).sum()
    }

    pub fn task_indices(&self) -> Vec<usize> {
        self.tasks.keys().copied().collect()
    }

    pub fn entries(&self, task: usize) -> Option<&[ReplayEntry]> {
        self.tasks.get(&task).map(Vec::as_slice)
    }

    /// Adds a task's entries. Tasks are insert-once.
    pub fn insert_task(&mut self, task: usize, entries: Vec<ReplayEntry>) -> Result<()> {
        if self.tasks.contains_key(&task) {
            bail!(Protocol, "replay entries for task {} already exist", task);
        }
        if entries.is_empty() {
            bail!(Protocol, "refusing to store an empty replay set for task {}", task);
        }
        for e in &entries {
            if e.task != task || e.feature.len() != FEATURE_DIM {
                bail!(Dimension, "replay entry does not belong to task {} or has the wrong width", task);
            }
        }
        self.tasks.insert(task, entries);
        Ok(())
    }

    pub fn contains_identity(&self, id: u64) -> bool {
        self.tasks.values().flatten().any(|e| e.identity == id)
    }

    /// Digest of one task's stored features and labels.
    pub fn task_digest(&self, task: usize) -> Option<u64> {
        let entries = self.tasks.get(&task)?;
        let mut h = Fnv1a::new();
        for e in entries {
            h.update(&e.identity.to_le_bytes());
            for v in &e.feature {
                h.update(&v.to_le_bytes());
            }
        }
        Some(h.finish())
    }

    /// All stored features (row-major) and identities, oldest task first.
    pub fn bank(&self) -> (Vec<f64>, Vec<u64>) {
        let mut feats = Vec::with_capacity(self.len() * FEATURE_DIM);
        let mut ids = Vec::with_capacity(self.len());
        for e in self.tasks.values().flatten() {
            feats.extend_from_slice(&e.feature);
            ids.push(e.identity);
        }
        (feats, ids)
    }
}

/// Training-split indices grouped by identity, in first-appearance order.
pub fn group_by_identity(samples: &[Sample]) -> Vec<(u64, Vec<usize>)> {
    let mut groups: Vec<(u64, Vec<usize>)> = Vec::new();
    let mut pos: BTreeMap<u64, usize> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        match pos.get(&s.identity) {
            Some(&g) => groups[g].1.push(i),
            None => {
                pos.insert(s.identity, groups.len());
                groups.push((s.identity, vec![i]));
            }
        }
    }
    groups
}

/// P identities × K instances, as indices into the sample list.
///
/// Identities are drawn without replacement; instances without replacement
/// when the identity has at least K images, with replacement otherwise.
pub fn sample_pk_batch(groups: &[(u64, Vec<usize>)], p: usize, k: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if groups.len() < p {
        bail!(BatchComposition, "need {} identities for a PK batch, dataset has {}", p, groups.len());
    }
    let mut out = Vec::with_capacity(p * k);
    for gi in index::sample(rng, groups.len(), p) {
        let (id, members) = &groups[gi];
        if members.len() < 2 {
            bail!(BatchComposition, "identity {} has {} image(s); a positive pair needs 2", id, members.len());
        }
        if members.len() >= k {
            out.extend(index::sample(rng, members.len(), k).into_iter().map(|j| members[j]));
        } else {
            out.extend((0..k).map(|_| members[rng.random_range(0..members.len())]));
        }
    }
    Ok(out)
}

/// Replay mini-batch as `(task, entry index)` pairs. Tasks take turns in
/// ascending order; within a task entries are drawn uniformly with
/// replacement.
pub fn sample_replay_batch(store: &ReplayStore, size: usize, rng: &mut impl Rng) -> Result<Vec<(usize, usize)>> {
    if store.is_empty() {
        bail!(Protocol, "cannot sample from an empty replay store");
    }
    let tasks: Vec<(usize, usize)> = store.tasks.iter().map(|(&t, e)| (t, e.len())).collect();
    Ok((0..size)
        .map(|i| {
            let (t, n) = tasks[i % tasks.len()];
            (t, rng.random_range(0..n))
        })
        .collect())
}

/// Selects replay exemplars from a finished task and stores them with
/// features from that task's model. Earlier tasks are left untouched.
pub fn update_replay_store(
    store: &mut ReplayStore,
    params: &ModelParams,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    let groups = group_by_identity(&dataset.train);
    let chosen = index::sample(rng, groups.len(), cfg.replay_ids_per_task.min(groups.len()));
    let mut picks: Vec<usize> = Vec::new();
    for gi in chosen {
        let members = &groups[gi].1;
        let n = cfg.replay_images_per_id.min(members.len());
        picks.extend(index::sample(rng, members.len(), n).into_iter().map(|j| members[j]));
    }
    let images = model::stack_images(picks.iter().map(|&i| &dataset.train[i].image))?;
    let feats = model::embed(params, &images)?;
    let entries = picks
        .iter()
        .zip(feats.data().chunks_exact(FEATURE_DIM))
        .map(|(&i, f)| ReplayEntry {
            image: dataset.train[i].image.clone(),
            identity: dataset.train[i].identity,
            task: dataset.index(),
            feature: f.to_vec(),
        })
        .collect();
    store.insert_task(dataset.index(), entries)
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub params: Option<ModelParams>,
    pub frozen: Option<FrozenOldHead>,
    pub replay: ReplayStore,
    /// Index of the last completed task (0 before the first).
    pub task: usize,
    pub rng: ChaCha8Rng,
}

impl TrainerState {
    pub fn new(seed: u64) -> Self {
        Self { params: None, frozen: None, replay: ReplayStore::new(), task: 0, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

/// Loss values and diagnostics of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub task: usize,
    pub epoch: usize,
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub tri: f64,
    pub cmcl: Option<f64>,
    pub pcl: Option<f64>,
    /// L2 norm of the loss gradient at the frozen head's input features.
    pub frozen_input_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskReport {
    pub task: usize,
    pub steps: usize,
    pub steps_per_epoch: usize,
    /// Total loss of every step, in order.
    pub losses: Vec<f64>,
    pub frozen_digest_before: Option<u64>,
    pub frozen_digest_after: Option<u64>,
    pub max_frozen_input_grad_norm: Option<f64>,
}

impl TaskReport {
    /// Mean total loss of each epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        self.losses.chunks(self.steps_per_epoch).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
    }
}

/// Momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Momentum {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Momentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self { lr, momentum, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            bail!(Dimension, "{} parameters but {} gradients", params.len(), grads.len());
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.len() != g.len() || v.len() != g.len() {
                bail!(Dimension, "gradient length {} does not match parameter length {}", g.len(), p.len());
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(*g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Local class index of every identity in first-appearance order.
fn class_index(groups: &[(u64, Vec<usize>)]) -> BTreeMap<u64, usize> {
    groups.iter().enumerate().map(|(c, (id, _))| (*id, c)).collect()
}

/// Trains the model on the next task of the sequence.
///
/// Sets up the task first: the initial model on task 1; afterwards the
/// current part head is frozen, the old attention encoder copied from the
/// new one and a fresh identity head created. Each step draws a PK batch,
/// plus a replay batch for the compatibility loss from task 2 on, and takes
/// one momentum-SGD step on every trainable parameter.
pub fn train_task(
    state: &mut TrainerState,
    dataset: &TaskDataset,
    cfg: &TrainConfig,
    ablation: &Ablation,
    weights: &LossWeights,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<TaskReport> {
    cfg.validate()?;
    weights.validate()?;
    let t = dataset.index();
    if t != state.task + 1 {
        bail!(Protocol, "expected task {}, got task {}", state.task + 1, t);
    }
    if weights.parts != model::PARTS {
        bail!(Config, "the model has {} parts, weights ask for {}", model::PARTS, weights.parts);
    }
    let groups = group_by_identity(&dataset.train);
    if let Some((id, _)) = groups.iter().find(|(id, _)| state.replay.contains_identity(*id)) {
        bail!(Protocol, "training identity {} of task {} also appears in the replay store", id, t);
    }
    let classes = class_index(&groups);
    match state.params.as_mut() {
        None => state.params = Some(ModelParams::init(groups.len(), ablation.attention, &mut state.rng)?),
        Some(p) => {
            if p.attention != ablation.attention {
                bail!(Config, "attention mode cannot change between tasks");
            }
            state.frozen = Some(p.advance(groups.len(), &mut state.rng)?);
        }
    }
    let use_cmcl = ablation.cmcl && t >= 2;
    if use_cmcl && state.replay.is_empty() {
        bail!(Protocol, "task {} needs replay data for the compatibility loss", t);
    }
    let (bank_feats, bank_ids) = state.replay.bank();
    let frozen_before = state.frozen.as_ref().map(FrozenOldHead::digest);
    let steps_per_epoch = cfg.steps_per_epoch(dataset.train.len());
    let mut opt = Momentum::new(cfg.lr, cfg.momentum);
    let mut losses = Vec::with_capacity(cfg.epochs_per_task * steps_per_epoch);
    let mut max_frozen_grad: Option<f64> = None;
    let batch_len = cfg.p * cfg.k;
    let branches = BranchConfig { parts: ablation.pcl, attention: ablation.attention, old_branch: t >= 2 };

    for epoch in 0..cfg.epochs_per_task {
        for s in 0..steps_per_epoch {
            let step = epoch * steps_per_epoch + s;
            let at = |e: Error| e.context(format!("task {t} step {step}"));
            let picks = sample_pk_batch(&groups, cfg.p, cfg.k, &mut state.rng).map_err(at)?;
            let labels: Vec<usize> = picks.iter().map(|&i| classes[&dataset.train[i].identity]).collect();
            let replay = if use_cmcl {
                sample_replay_batch(&state.replay, cfg.replay_batch, &mut state.rng).map_err(at)?
            } else {
                Vec::new()
            };
            let params = state.params.as_mut().expect("initialized above");
            let replay_entries: Vec<&ReplayEntry> =
                replay.iter().map(|&(task, i)| &state.replay.entries(task).expect("sampled task")[i]).collect();
            let images = model::stack_images(
                picks.iter().map(|&i| &dataset.train[i].image).chain(replay_entries.iter().map(|e| &e.image)),
            )?;

            let mut g = Graph::new();
            let pv = params.bind(&mut g, true);
            let frozen = state.frozen.as_ref().filter(|_| ablation.pcl).map(|f| g.constant(f.part_head.clone()));
            let x = g.constant(images);
            let out = model::forward(&mut g, &pv, frozen, x, branches).map_err(at)?;
            let total_rows = batch_len + replay_entries.len();
            let (raw, norm, id_logits) = if total_rows > batch_len {
                (
                    g.slice_rows(out.raw, 0, batch_len)?,
                    g.slice_rows(out.normalized, 0, batch_len)?,
                    g.slice_rows(out.id_logits, 0, batch_len)?,
                )
            } else {
                (out.raw, out.normalized, out.id_logits)
            };
            let ce = losses::loss_ce(&mut g, id_logits, &labels).map_err(at)?;
            let tri = losses::loss_triplet(&mut g, raw, &labels, weights.margin).map_err(at)?;
            let cmcl = if use_cmcl {
                let (feats, cur) = if ablation.normalize_cmcl { (out.normalized, norm) } else { (out.raw, raw) };
                let anchors = g.slice_rows(feats, batch_len, total_rows)?;
                let anchor_ids: Vec<u64> = replay_entries.iter().map(|e| e.identity).collect();
                let bank = ReplayBank { features: &bank_feats, identities: &bank_ids };
                Some(losses::loss_cmcl(&mut g, anchors, &anchor_ids, bank, cur, weights.tau).map_err(at)?)
            } else {
                None
            };
            let pcl = match out.new_part_logits {
                Some(new) => {
                    let rows = batch_len * model::PARTS;
                    let trim = |g: &mut Graph, v| if total_rows > batch_len { g.slice_rows(v, 0, rows) } else { Ok(v) };
                    let new = trim(&mut g, new)?;
                    let old = match out.old_part_logits {
                        Some(o) => Some(trim(&mut g, o)?),
                        None => None,
                    };
                    Some(losses::loss_pcl(&mut g, new, old, model::PARTS).map_err(at)?)
                }
                None => None,
            };
            if let Some(op) = out.old_parts {
                g.retain_grad(op);
            }
            let terms = LossTerms { ce, tri, cmcl, pcl };
            let total = losses::loss_total(&mut g, &terms, weights, t).map_err(at)?;
            g.backward(total).map_err(at)?;

            let frozen_input_grad_norm = out.old_parts.and_then(|op| g.grad(op)).map(|gr| {
                libm::sqrt(gr.iter().fold(0.0, |a, v| a + v * v))
            });
            if let Some(n) = frozen_input_grad_norm {
                max_frozen_grad = Some(max_frozen_grad.map_or(n, |m: f64| m.max(n)));
            }
            let grads: Vec<&[f64]> = pv.all().iter().map(|&v| g.grad(v).expect("trainable leaf")).collect();
            if grads.iter().any(|gr| gr.iter().any(|v| !v.is_finite())) {
                return Err(at(Error::Numeric("non-finite gradient".into())));
            }
            opt.step(&mut params.tensors_mut(), &grads)?;
            if params.tensors().iter().any(|p| !p.is_finite()) {
                return Err(at(Error::Numeric("non-finite parameter after update".into())));
            }
            let report = StepReport {
                task: t,
                epoch,
                step,
                total: g.value(total).item(),
                ce: g.value(ce).item(),
                tri: g.value(tri).item(),
                cmcl: cmcl.map(|v| g.value(v).item()),
                pcl: pcl.map(|v| g.value(v).item()),
                frozen_input_grad_norm,
            };
            losses.push(report.total);
            observer(&report);
        }
    }
    state.task = t;
    Ok(TaskReport {
        task: t,
        steps: losses.len(),
        steps_per_epoch,
        losses,
        frozen_digest_before: frozen_before,
        frozen_digest_after: state.frozen.as_ref().map(FrozenOldHead::digest),
        max_frozen_input_grad_norm: max_frozen_grad,
    })
}

/// Joint-training baseline: one model trained on the union of every task's
/// training split with a single identity head and the base loss only.
pub fn train_joint(
    suite: &[TaskDataset],
    cfg: &TrainConfig,
    weights: &LossWeights,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<(ModelParams, TaskReport)> {
    let Some(first) = suite.first() else { bail!(Config, "empty suite") };
    let mut merged = TaskDataset { domain: first.domain.clone(), train: Vec::new(), query: Vec::new(), gallery: Vec::new() };
    merged.domain.index = 1;
    for ds in suite {
        merged.train.extend(ds.train.iter().cloned());
    }
    let mut state = TrainerState::new(cfg.seed);
    let report = train_task(&mut state, &merged, cfg, &Ablation::FINETUNE, weights, observer)?;
    Ok((state.params.expect("trained"), report))
}

//! Training objectives built on the autodiff graph.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Loss weights and hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_tri: f64,
    pub lambda_cmcl: f64,
    pub lambda_pcl: f64,
    pub margin: f64,
    pub tau: f64,
    pub parts: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_ce: 1.0, lambda_tri: 1.0, lambda_cmcl: 0.1, lambda_pcl: 1.0, margin: 0.3, tau: 0.5, parts: 5 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda_ce, self.lambda_tri, self.lambda_cmcl, self.lambda_pcl, self.margin];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            bail!(Config, "loss weights and margin must be finite and non-negative");
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            bail!(Config, "temperature must be positive, got {}", self.tau);
        }
        if self.parts < 2 {
            bail!(Config, "part count must be at least 2, got {}", self.parts);
        }
        Ok(())
    }
}

/// Identity cross-entropy over `B×Z` logits.
pub fn loss_ce(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Batch-hard mining over a row-major `B×B` distance matrix.
///
/// For each anchor returns `(hardest positive, hardest negative)`: the
/// farthest other sample with the same label and the nearest sample with a
/// different label. Ties go to the lowest index.
pub fn mine_hard(dist: &[f64], labels: &[usize]) -> Result<Vec<(usize, usize)>> {
    let b = labels.len();
    if dist.len() != b * b {
        bail!(Dimension, "distance matrix has {} entries for {} labels", dist.len(), b);
    }
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let row = &dist[i * b..(i + 1) * b];
        let mut pos: Option<usize> = None;
        let mut neg: Option<usize> = None;
        for j in 0..b {
            if j == i {
                continue;
            }
            if labels[j] == labels[i] {
                if pos.is_none_or(|p| row[j] > row[p]) {
                    pos = Some(j);
                }
            } else if neg.is_none_or(|n| row[j] < row[n]) {
                neg = Some(j);
            }
        }
        match (pos, neg) {
            (Some(p), Some(n)) => out.push((p, n)),
            (None, _) => bail!(BatchComposition, "anchor {} has no positive in the batch", i),
            (_, None) => bail!(BatchComposition, "anchor {} has no negative in the batch", i),
        }
    }
    Ok(out)
}

/// Batch-hard triplet loss on raw `B×D` features with Euclidean distance:
/// mean over anchors of `max(d(a,p) − d(a,n) + margin, 0)`.
pub fn loss_triplet(g: &mut Graph, feats: Var, labels: &[usize], margin: f64) -> Result<Var> {
    let shape = g.value(feats).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        bail!(Dimension, "triplet features {:?} do not match {} labels", shape, labels.len());
    }
    let b = labels.len();
    let d = g.pairwise_distance(feats)?;
    let mined = mine_hard(g.value(d).data(), labels)?;
    let pos_idx: Vec<usize> = mined.iter().enumerate().map(|(i, &(p, _))| i * b + p).collect();
    let neg_idx: Vec<usize> = mined.iter().enumerate().map(|(i, &(_, n))| i * b + n).collect();
    let dp = g.gather(d, &pos_idx)?;
    let dn = g.gather(d, &neg_idx)?;
    let diff = g.sub(dp, dn)?;
    let shifted = g.add_scalar(diff, margin)?;
    let hinge = g.relu(shifted)?;
    g.mean(hinge)
}

/// `lambda_ce·ce + lambda_tri·tri`.
pub fn loss_base(g: &mut Graph, ce: Var, tri: Var, w: &LossWeights) -> Result<Var> {
    let a = g.scale(ce, w.lambda_ce)?;
    let b = g.scale(tri, w.lambda_tri)?;
    g.add(a, b)
}

/// Stored replay features with their identities; the candidate pool of the
/// compatibility loss.
#[derive(Debug, Clone, Copy)]
pub struct ReplayBank<'a> {
    /// Row-major `M×D`.
    pub features: &'a [f64],
    pub identities: &'a [u64],
}

/// Cross-model compatibility loss.
///
/// Each anchor (a replay image embedded by the current model) is contrasted
/// against every stored bank feature and every current-batch feature. The
/// positives are the bank features sharing the anchor's identity; batch
/// features are always negatives. Similarities are plain dot products divided
/// by `tau`, so callers pass normalized features for cosine similarity.
pub fn loss_cmcl(
    g: &mut Graph,
    anchors: Var,
    anchor_ids: &[u64],
    bank: ReplayBank<'_>,
    batch: Var,
    tau: f64,
) -> Result<Var> {
    if bank.identities.is_empty() {
        bail!(Protocol, "compatibility loss needs a non-empty replay bank");
    }
    if !(tau > 0.0) {
        bail!(Config, "temperature must be positive, got {}", tau);
    }
    let a_shape = g.value(anchors).shape().to_vec();
    let b_shape = g.value(batch).shape().to_vec();
    if a_shape.len() != 2 || a_shape[0] != anchor_ids.len() {
        bail!(Dimension, "anchor features {:?} do not match {} identities", a_shape, anchor_ids.len());
    }
    let dim = a_shape[1];
    if b_shape.len() != 2 || b_shape[1] != dim || bank.features.len() != bank.identities.len() * dim {
        bail!(Dimension, "bank, batch and anchor feature widths disagree");
    }
    let m = bank.identities.len();
    let bank_var = g.constant(Tensor::new(&[m, dim], bank.features.to_vec())?);
    let cands = g.concat_rows(bank_var, batch)?;
    let cands_t = g.transpose(cands)?;
    let sims = g.matmul(anchors, cands_t)?;
    let logits = g.scale(sims, 1.0 / tau)?;
    let cols = m + b_shape[0];
    let mut positive = Vec::with_capacity(anchor_ids.len() * cols);
    for &id in anchor_ids {
        positive.extend(bank.identities.iter().map(|&b| b == id));
        positive.extend(core::iter::repeat_n(false, b_shape[0]));
    }
    g.contrastive_nll(logits, &positive)
}

/// Part classification loss over `(B·N)×N` logits, row `b·N + n` targeting
/// part `n`. With the frozen old head's logits present the result is the
/// mean of the two heads' terms.
pub fn loss_pcl(g: &mut Graph, new_logits: Var, old_logits: Option<Var>, parts: usize) -> Result<Var> {
    let s = g.value(new_logits).shape().to_vec();
    if s.len() != 2 || s[1] != parts || s[0] % parts != 0 {
        bail!(Dimension, "part logits {:?} do not fit {} parts", s, parts);
    }
    let labels: Vec<usize> = (0..s[0]).map(|r| r % parts).collect();
    let new = g.cross_entropy(new_logits, &labels)?;
    let Some(old_logits) = old_logits else { return Ok(new) };
    if g.value(old_logits).shape() != s.as_slice() {
        bail!(Dimension, "old part logits {:?} differ from new {:?}", g.value(old_logits).shape(), s);
    }
    let old = g.cross_entropy(old_logits, &labels)?;
    let sum = g.add(new, old)?;
    g.scale(sum, 0.5)
}

/// The scalar terms feeding the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub ce: Var,
    pub tri: Var,
    pub cmcl: Option<Var>,
    pub pcl: Option<Var>,
}

/// `L_base + lambda_cmcl·L_cmcl + lambda_pcl·L_pcl`; the compatibility term
/// is dropped on the first task.
pub fn loss_total(g: &mut Graph, terms: &LossTerms, w: &LossWeights, task: usize) -> Result<Var> {
    let mut total = loss_base(g, terms.ce, terms.tri, w)?;
    if let (Some(c), true) = (terms.cmcl, task >= 2) {
        let c = g.scale(c, w.lambda_cmcl)?;
        total = g.add(total, c)?;
    }
    if let Some(p) = terms.pcl {
        let p = g.scale(p, w.lambda_pcl)?;
        total = g.add(total, p)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| r.random_range(lo..hi))
    }

    fn scalar(g: &Graph, v: Var) -> f64 {
        g.value(v).item()
    }

    #[test]
    fn ce_uniform_is_log_z() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[3, 751]));
        let v = loss_ce(&mut g, l, &[0, 5, 750]).unwrap();
        assert!((scalar(&g, v) - libm::log(751.0)).abs() < 1e-9);
        let bad = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(loss_ce(&mut g, bad, &[4]), Err(crate::Error::Label(_))));
    }

    #[test]
    fn ce_matches_direct_formula() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let logits = uniform(&[4, 6], -3.0, 3.0, &mut r);
        let labels = [1, 0, 5, 3];
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let v = loss_ce(&mut g, l, &labels).unwrap();
        let v = scalar(&g, v);
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &logits.data()[i * 6..(i + 1) * 6];
            let z: f64 = row.iter().map(|&x| libm::exp(x)).sum();
            expect -= libm::log(libm::exp(row[y]) / z);
        }
        assert!((v - expect / 4.0).abs() < 1e-12);
    }

    #[test]
    fn triplet_closed_forms() {
        let mut g = Graph::new();
        let f = g.constant(Tensor::full(&[4, 32], 0.25));
        let v = loss_triplet(&mut g, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert!((scalar(&g, v) - 0.3).abs() < 1e-12);

        let mut data = vec![0.0; 4 * 32];
        data[2 * 32] = 3.0;
        data[3 * 32] = 3.0;
        let f = g.constant(Tensor::new(&[4, 32], data).unwrap());
        let v = loss_triplet(&mut g, f, &[0, 0, 1, 1], 0.3).unwrap();
        assert_eq!(scalar(&g, v), 0.0);
    }

    #[test]
    fn mining_reports_infeasible_anchors() {
        let d = vec![0.0; 9];
        assert!(matches!(mine_hard(&d, &[0, 0, 1]), Err(crate::Error::BatchComposition(_))));
        assert!(matches!(mine_hard(&d[..4], &[0, 0]), Err(crate::Error::BatchComposition(_))));
    }

    #[test]
    fn mining_breaks_ties_toward_lower_index() {
        // All distances equal: first same-label and first other-label index.
        let d = vec![1.0; 16];
        let mined = mine_hard(&d, &[0, 1, 0, 1]).unwrap();
        assert_eq!(mined, vec![(2, 1), (3, 0), (0, 1), (1, 0)]);
    }

    #[test]
    fn base_is_weighted_sum() {
        let mut g = Graph::new();
        let ce = g.constant(Tensor::scalar(0.5));
        let tri = g.constant(Tensor::scalar(0.2));
        let w = LossWeights::default();
        let v = loss_base(&mut g, ce, tri, &w).unwrap();
        assert!((scalar(&g, v) - 0.7).abs() < 1e-15);
        let w0 = LossWeights { lambda_tri: 0.0, ..w };
        let v = loss_base(&mut g, ce, tri, &w0).unwrap();
        assert_eq!(scalar(&g, v), 0.5);
    }

    #[test]
    fn cmcl_symmetric_case_is_ln3() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let batch = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let bank = ReplayBank { features: &[1.0, 0.0, 1.0, 0.0], identities: &[7, 8] };
        let v = loss_cmcl(&mut g, a, &[7], bank, batch, 0.5).unwrap();
        assert!((scalar(&g, v) - libm::log(3.0)).abs() < 1e-9);
    }

    #[test]
    fn cmcl_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
        let batch = g.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
        let empty = ReplayBank { features: &[], identities: &[] };
        assert!(matches!(loss_cmcl(&mut g, a, &[7], empty, batch, 0.5), Err(crate::Error::Protocol(_))));
        let bank = ReplayBank { features: &[1.0, 0.0], identities: &[8] };
        assert!(matches!(loss_cmcl(&mut g, a, &[7], bank, batch, 0.5), Err(crate::Error::BankIntegrity(_))));
    }

    #[test]
    fn pcl_uniform_is_ln_parts_and_averages_heads() {
        let mut g = Graph::new();
        let new = g.constant(Tensor::zeros(&[10, 5]));
        let v = loss_pcl(&mut g, new, None, 5).unwrap();
        assert!((scalar(&g, v) - libm::log(5.0)).abs() < 1e-9);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let old_t = uniform(&[10, 5], -2.0, 2.0, &mut r);
        let old = g.constant(old_t);
        let both = loss_pcl(&mut g, new, Some(old), 5).unwrap();
        let only_old = loss_pcl(&mut g, old, None, 5).unwrap();
        let expect = 0.5 * (libm::log(5.0) + scalar(&g, only_old));
        assert!((scalar(&g, both) - expect).abs() < 1e-12);
        let wrong = g.constant(Tensor::zeros(&[10, 4]));
        assert!(loss_pcl(&mut g, wrong, None, 5).is_err());
    }

    #[test]
    fn total_drops_cmcl_on_first_task() {
        let mut g = Graph::new();
        let c = |g: &mut Graph, v: f64| g.constant(Tensor::scalar(v));
        let terms = LossTerms { ce: c(&mut g, 1.0), tri: c(&mut g, 2.0), cmcl: Some(c(&mut g, 4.0)), pcl: Some(c(&mut g, 8.0)) };
        let w = LossWeights::default();
        let t1 = loss_total(&mut g, &terms, &w, 1).unwrap();
        assert!((scalar(&g, t1) - 11.0).abs() < 1e-12);
        let t2 = loss_total(&mut g, &terms, &w, 2).unwrap();
        assert!((scalar(&g, t2) - 11.4).abs() < 1e-12);
        let ce_only = LossWeights { lambda_tri: 0.0, lambda_cmcl: 0.0, lambda_pcl: 0.0, ..w };
        let t = loss_total(&mut g, &terms, &ce_only, 2).unwrap();
        assert_eq!(scalar(&g, t), 1.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let err = grad_check(|g, v| loss_ce(g, v[0], &[2, 0, 1, 3]), &[uniform(&[4, 6], -2.0, 2.0, &mut r)], 1e-5).unwrap();
        assert!(err < 1e-6, "ce {}", err);

        let feats = uniform(&[6, 5], -1.0, 1.0, &mut r);
        let err = grad_check(|g, v| loss_triplet(g, v[0], &[0, 0, 1, 1, 2, 2], 5.0), &[feats], 1e-5).unwrap();
        assert!(err < 1e-4, "triplet {}", err);

        let bank: Vec<f64> = uniform(&[4, 3], -1.0, 1.0, &mut r).into_data();
        let ids = [1u64, 2, 1, 3];
        let err = grad_check(
            |g, v| {
                let a = g.l2_normalize(v[0])?;
                let b = g.l2_normalize(v[1])?;
                loss_cmcl(g, a, &[1, 3], ReplayBank { features: &bank, identities: &ids }, b, 0.5)
            },
            &[uniform(&[2, 3], -1.0, 1.0, &mut r), uniform(&[3, 3], -1.0, 1.0, &mut r)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "cmcl {}", err);
    }

    #[test]
    fn frozen_head_receives_no_gradient_but_passes_one() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let feats = g.leaf(uniform(&[2 * 5, 8], 0.0, 1.0, &mut r));
        let new_head = g.leaf(uniform(&[8, 5], -1.0, 1.0, &mut r));
        let old_head = g.constant(uniform(&[8, 5], -1.0, 1.0, &mut r));
        let nl = g.matmul(feats, new_head).unwrap();
        let ol = g.matmul(feats, old_head).unwrap();
        let l = loss_pcl(&mut g, nl, Some(ol), 5).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(old_head).is_none());
        assert!(g.grad(feats).unwrap().iter().any(|&v| v != 0.0));
    }
}

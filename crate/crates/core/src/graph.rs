//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records every op executed through it, in execution order, so
//! the record is topologically sorted by construction. [`Graph::backward`]
//! walks it once in reverse and leaves `∂loss/∂leaf` on every leaf created
//! with [`Graph::leaf`]. Leaves created with [`Graph::constant`] never
//! receive a gradient, which is how frozen parameters are expressed.
//!
//! Ops are coarse-grained (whole-batch convolution, pooling, fused loss
//! kernels) because the graph is rebuilt for every training step.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, batch: usize, out_c: usize, cols: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { a: Var, rows: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    SliceRows { a: Var, start: usize, row_len: usize },
    ConcatRows(Var, Var),
    Gather { src: Var, indices: Vec<usize> },
    ChannelMask { map: Var, mask: Var, channels: usize, spatial: usize },
    SpatialMean { map: Var, spatial: usize },
    GemPool { map: Var, dims: [usize; 4], parts: usize, p: f64, eps: f64 },
    L2Normalize { a: Var, dim: usize, norms: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    ContrastiveNll { logits: Var, cols: usize, positive: Vec<bool>, p_all: Vec<f64>, p_pos: Vec<f64> },
    PairwiseDistance { a: Var, rows: usize, dim: usize },
}

/// Ordered record of executed ops with their saved activations.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    needs_grad: Vec<bool>,
    is_leaf: Vec<bool>,
    retained: Vec<bool>,
    ops: Vec<Op>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// A trainable input: receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true, true)
    }

    /// A non-trainable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Keeps the gradient of an intermediate value after backward so it can
    /// be inspected with [`Graph::grad`].
    pub fn retain_grad(&mut self, v: Var) {
        self.retained[v.0] = true;
    }

    /// Gradient accumulated on a leaf (or retained value) by the last
    /// backward pass.
    ///
    /// Returns `None` for constants and before backward has run. A trainable
    /// leaf the loss does not depend on gets an all-zero gradient.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        if !(self.is_leaf[v.0] || self.retained[v.0]) || !self.needs_grad[v.0] {
            return None;
        }
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v).map(|g| Tensor::new(self.values[v.0].shape(), g.to_vec()).expect("grad shape"))
    }

    fn push_raw(&mut self, t: Tensor, op: Op, needs_grad: bool, is_leaf: bool) -> Var {
        let id = self.values.len();
        self.values.push(t);
        self.grads.push(None);
        self.needs_grad.push(needs_grad);
        self.is_leaf.push(is_leaf);
        self.retained.push(false);
        self.ops.push(op);
        Var(id)
    }

    fn push(&mut self, t: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !t.is_finite() {
            bail!(Numeric, "non-finite value produced by {}", op_name(&op));
        }
        let needs = inputs.iter().any(|v| self.needs_grad[v.0]);
        Ok(self.push_raw(t, op, needs, false))
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            bail!(State, "graph was consumed by a previous backward pass");
        }
        Ok(())
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.values[v.0].data()
    }

    // ----------------------------------------------------------------- ops

    /// 2-D convolution without bias.
    ///
    /// `input` is `B×C×H×W` (or a single `C×H×W` image), `kernel` is
    /// `O×C×k×k` with odd `k`. Output extents are
    /// `floor((H + 2·pad − k)/stride) + 1`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        self.live()?;
        let ishape = self.shape(input).to_vec();
        let kshape = self.shape(kernel).to_vec();
        let (batch, c, h, w, single) = match ishape.as_slice() {
            [b, c, h, w] => (*b, *c, *h, *w, false),
            [c, h, w] => (1, *c, *h, *w, true),
            _ => bail!(Dimension, "conv2d input must be B×C×H×W or C×H×W, got {:?}", ishape),
        };
        let [out_c, kc, kh, kw] = kshape[..] else {
            bail!(Dimension, "conv2d kernel must be O×C×k×k, got {:?}", kshape);
        };
        if kc != c {
            bail!(Dimension, "kernel expects {} input channels, input has {}", kc, c);
        }
        if kh != kw || kh % 2 == 0 {
            bail!(Dimension, "kernel must be square with odd extent, got {}×{}", kh, kw);
        }
        if stride == 0 {
            bail!(Dimension, "stride must be at least 1");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            bail!(Dimension, "padded input {}×{} smaller than kernel {}", h + 2 * pad, w + 2 * pad, kh);
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            ksize: kh,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let keep_cols = self.needs_grad[kernel.0];
        let (rows, ncol) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; batch * out_c * ncol];
        let mut saved = if keep_cols { vec![0.0; batch * rows * ncol] } else { Vec::new() };
        let mut scratch = vec![0.0; rows * ncol];
        {
            let x = self.data(input);
            let k = self.data(kernel);
            for b in 0..batch {
                let cols = if keep_cols { &mut saved[b * rows * ncol..(b + 1) * rows * ncol] } else { &mut scratch[..] };
                kernels::im2col(&geom, &x[b * geom.image_len()..(b + 1) * geom.image_len()], cols);
                kernels::gemm_nn(out_c, rows, ncol, k, cols, &mut out[b * out_c * ncol..(b + 1) * out_c * ncol]);
            }
        }
        let oshape = if single {
            vec![out_c, geom.out_h, geom.out_w]
        } else {
            vec![batch, out_c, geom.out_h, geom.out_w]
        };
        let t = Tensor::new(&oshape, out)?;
        self.push(t, Op::Conv2d { input, kernel, geom, batch, out_c, cols: saved }, &[input, kernel])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let data = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Relu(a), &[a])
    }

    ///
    /// Outputs are kept strictly inside `(0, 1)` even where the exact value
    /// rounds to 0 or 1.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let data = self.data(a).iter().map(|&x| sigmoid(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Sigmoid(a), &[a])
    }

    /// `[M×K] · [K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (m, k) = as_matrix(self.shape(a), "matmul lhs")?;
        let (k2, n) = as_matrix(self.shape(b), "matmul rhs")?;
        if k != k2 {
            bail!(Dimension, "matmul inner extents differ: {} vs {}", k, k2);
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(m, k, n, self.data(a), self.data(b), &mut out);
        let t = Tensor::new(&[m, n], out)?;
        self.push(t, Op::Matmul { a, b, m, k, n }, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let (rows, cols) = as_matrix(self.shape(a), "transpose")?;
        let t = Tensor::new(&[cols, rows], kernels::transpose(rows, cols, self.data(a)))?;
        self.push(t, Op::Transpose { a, rows, cols }, &[a])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            bail!(Dimension, "{}: shapes {:?} and {:?} differ", what, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        self.same_shape(a, b, "add")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        self.same_shape(a, b, "sub")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        self.same_shape(a, b, "mul")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.live()?;
        let data = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.live()?;
        let data = self.data(a).iter().map(|x| x + s).collect();
        let t = Tensor::new(self.shape(a), data)?;
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let s = self.data(a).iter().fold(0.0, |acc, x| acc + x);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let n = self.values[a.0].len() as f64;
        let s = self.data(a).iter().fold(0.0, |acc, x| acc + x);
        self.push(Tensor::scalar(s / n), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.live()?;
        let t = self.values[a.0].clone().reshape(shape)?;
        self.push(t, Op::Reshape(a), &[a])
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        self.live()?;
        let shape = self.shape(a).to_vec();
        if start >= end || end > shape[0] {
            bail!(Dimension, "row range {}..{} invalid for leading extent {}", start, end, shape[0]);
        }
        let row_len: usize = shape[1..].iter().product();
        let mut oshape = shape.clone();
        oshape[0] = end - start;
        let t = Tensor::new(&oshape, self.data(a)[start * row_len..end * row_len].to_vec())?;
        self.push(t, Op::SliceRows { a, start, row_len }, &[a])
    }

    /// Stacks two tensors along the leading axis.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa[1..] != sb[1..] {
            bail!(Dimension, "concat_rows: trailing shapes {:?} and {:?} differ", sa, sb);
        }
        let mut data = self.data(a).to_vec();
        data.extend_from_slice(self.data(b));
        let mut oshape = sa.clone();
        oshape[0] += sb[0];
        let t = Tensor::new(&oshape, data)?;
        self.push(t, Op::ConcatRows(a, b), &[a, b])
    }

    /// Picks flat elements of `src` into a 1-D tensor.
    pub fn gather(&mut self, src: Var, indices: &[usize]) -> Result<Var> {
        self.live()?;
        let n = self.values[src.0].len();
        if indices.is_empty() {
            bail!(Dimension, "gather needs at least one index");
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            bail!(Dimension, "gather index {} out of range {}", bad, n);
        }
        let d = self.data(src);
        let t = Tensor::new(&[indices.len()], indices.iter().map(|&i| d[i]).collect())?;
        self.push(t, Op::Gather { src, indices: indices.to_vec() }, &[src])
    }

    /// Multiplies a `B×C×H×W` map by a per-sample channel mask `B×C`.
    pub fn channel_mask(&mut self, map: Var, mask: Var) -> Result<Var> {
        self.live()?;
        let [b, c, h, w] = map4(self.shape(map))?;
        if self.shape(mask) != [b, c] {
            bail!(Dimension, "mask shape {:?} does not match map {:?}", self.shape(mask), [b, c]);
        }
        let spatial = h * w;
        let (x, m) = (self.data(map), self.data(mask));
        let mut out = vec![0.0; x.len()];
        for (bc, (dst, src)) in out.chunks_exact_mut(spatial).zip(x.chunks_exact(spatial)).enumerate() {
            let s = m[bc];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v * s;
            }
        }
        let t = Tensor::new(&[b, c, h, w], out)?;
        self.push(t, Op::ChannelMask { map, mask, channels: c, spatial }, &[map, mask])
    }

    /// Global average pooling `B×C×H×W → B×C`.
    pub fn spatial_mean(&mut self, map: Var) -> Result<Var> {
        self.live()?;
        let [b, c, h, w] = map4(self.shape(map))?;
        let spatial = h * w;
        let data = self
            .data(map)
            .chunks_exact(spatial)
            .map(|ch| ch.iter().fold(0.0, |a, x| a + x) / spatial as f64)
            .collect();
        let t = Tensor::new(&[b, c], data)?;
        self.push(t, Op::SpatialMean { map, spatial }, &[map])
    }

    /// Generalized-mean pooling: per channel `(mean(max(x, eps)^p))^(1/p)`.
    ///
    /// `B×C×H×W → B×C`, or `C×H×W → C` for a single map.
    pub fn gem_pool(&mut self, map: Var, p: f64, eps: f64) -> Result<Var> {
        let shape = self.shape(map).to_vec();
        if shape.len() == 3 {
            let m4 = self.reshape(map, &[1, shape[0], shape[1], shape[2]])?;
            let out = self.gem_pool_parts(m4, 1, p, eps)?;
            return self.reshape(out, &[shape[0]]);
        }
        let out = self.gem_pool_parts(map, 1, p, eps)?;
        self.reshape(out, &[shape[0], shape[1]])
    }

    /// GeM pooling over `parts` equal horizontal slabs: `B×C×H×W → B×parts×C`.
    ///
    /// Slab `n` covers rows `[n·H/parts, (n+1)·H/parts)`; slab 0 is the top.
    pub fn gem_pool_parts(&mut self, map: Var, parts: usize, p: f64, eps: f64) -> Result<Var> {
        self.live()?;
        let dims = map4(self.shape(map))?;
        let [b, c, h, w] = dims;
        if parts == 0 || h % parts != 0 {
            bail!(Dimension, "map height {} is not divisible into {} parts", h, parts);
        }
        if h * w == 0 {
            bail!(Dimension, "gem_pool over an empty spatial extent");
        }
        if !(p >= 1.0) || !(eps > 0.0) {
            bail!(Dimension, "gem_pool needs p >= 1 and eps > 0, got p={} eps={}", p, eps);
        }
        let slab = h / parts;
        let count = (slab * w) as f64;
        let x = self.data(map);
        let mut out = vec![0.0; b * parts * c];
        for bi in 0..b {
            for ci in 0..c {
                let chan = &x[(bi * c + ci) * h * w..][..h * w];
                for n in 0..parts {
                    let s = chan[n * slab * w..(n + 1) * slab * w]
                        .iter()
                        .fold(0.0, |acc, &v| acc + powf(v.max(eps), p));
                    out[(bi * parts + n) * c + ci] = libm::pow(s / count, 1.0 / p);
                }
            }
        }
        let t = Tensor::new(&[b, parts, c], out)?;
        self.push(t, Op::GemPool { map, dims, parts, p, eps }, &[map])
    }

    /// Row-wise L2 normalization of a `B×C` matrix (or a single vector).
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let shape = self.shape(a).to_vec();
        let dim = *shape.last().expect("non-empty shape");
        let mut norms = Vec::new();
        let mut out = self.data(a).to_vec();
        for (r, row) in out.chunks_exact_mut(dim).enumerate() {
            let n = libm::sqrt(row.iter().fold(0.0, |acc, v| acc + v * v));
            if !(n > 0.0) {
                bail!(Degenerate, "cannot normalize zero vector (row {})", r);
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let t = Tensor::new(&shape, out)?;
        self.push(t, Op::L2Normalize { a, dim, norms }, &[a])
    }

    /// Mean softmax cross-entropy of `B×Z` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.live()?;
        let (b, z) = as_matrix(self.shape(logits), "cross_entropy logits")?;
        if z < 2 {
            bail!(Dimension, "cross_entropy needs at least 2 classes");
        }
        if labels.len() != b {
            bail!(Dimension, "{} labels for {} logit rows", labels.len(), b);
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= z) {
            bail!(Label, "label {} out of range for {} classes", bad, z);
        }
        let x = self.data(logits);
        let mut probs = vec![0.0; b * z];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &x[i * z..(i + 1) * z];
            let lse = log_sum_exp(row.iter().copied());
            for (p, &v) in probs[i * z..(i + 1) * z].iter_mut().zip(row) {
                *p = libm::exp(v - lse);
            }
            loss += lse - row[labels[i]];
        }
        let t = Tensor::scalar(loss / b as f64);
        self.push(t, Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, &[logits])
    }

    /// Cross-entropy against one-hot target rows.
    pub fn cross_entropy_onehot(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let (b, z) = as_matrix(targets.shape(), "one-hot targets")?;
        let mut labels = Vec::with_capacity(b);
        for (i, row) in targets.data().chunks_exact(z).enumerate() {
            let ones: Vec<usize> = row.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(j, _)| j).collect();
            if ones.len() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                bail!(Label, "target row {} is not one-hot", i);
            }
            labels.push(ones[0]);
        }
        self.cross_entropy(logits, &labels)
    }

    /// Multi-positive contrastive negative log-likelihood.
    ///
    /// For each row `i` of the `R×M` similarity logits, the term is
    /// `−log(Σ_{j positive} e^{s_ij} / Σ_j e^{s_ij})`; the result is the mean
    /// over rows. `positive` is a row-major `R×M` mask.
    pub fn contrastive_nll(&mut self, logits: Var, positive: &[bool]) -> Result<Var> {
        self.live()?;
        let (r, m) = as_matrix(self.shape(logits), "contrastive logits")?;
        if positive.len() != r * m {
            bail!(Dimension, "positive mask has {} entries, logits {}×{}", positive.len(), r, m);
        }
        let x = self.data(logits);
        let mut p_all = vec![0.0; r * m];
        let mut p_pos = vec![0.0; r * m];
        let mut loss = 0.0;
        for i in 0..r {
            let row = &x[i * m..(i + 1) * m];
            let pos = &positive[i * m..(i + 1) * m];
            if !pos.iter().any(|&p| p) {
                bail!(BankIntegrity, "row {} has no positive candidate", i);
            }
            let lse_all = log_sum_exp(row.iter().copied());
            let lse_pos = log_sum_exp(row.iter().zip(pos).filter(|(_, &p)| p).map(|(&v, _)| v));
            for j in 0..m {
                p_all[i * m + j] = libm::exp(row[j] - lse_all);
                if pos[j] {
                    p_pos[i * m + j] = libm::exp(row[j] - lse_pos);
                }
            }
            loss += lse_all - lse_pos;
        }
        let t = Tensor::scalar(loss / r as f64);
        self.push(t, Op::ContrastiveNll { logits, cols: m, positive: positive.to_vec(), p_all, p_pos }, &[logits])
    }

    /// All pairwise Euclidean distances between the rows of a `B×D` matrix.
    pub fn pairwise_distance(&mut self, a: Var) -> Result<Var> {
        self.live()?;
        let (rows, dim) = as_matrix(self.shape(a), "pairwise_distance")?;
        let t = Tensor::new(&[rows, rows], pairwise_distances(self.data(a), rows, dim))?;
        self.push(t, Op::PairwiseDistance { a, rows, dim }, &[a])
    }

    // ------------------------------------------------------------ backward

    /// Back-propagates from a scalar `loss`, consuming the graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.live()?;
        if !self.values[loss.0].is_scalar() {
            bail!(Dimension, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        self.consumed = true;
        for i in 0..self.values.len() {
            if self.is_leaf[i] && self.needs_grad[i] {
                self.grads[i] = Some(vec![0.0; self.values[i].len()]);
            }
        }
        if !self.needs_grad[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.is_leaf[i] || !self.needs_grad[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let op = core::mem::replace(&mut self.ops[i], Op::Leaf);
            self.backward_op(i, op, &g)?;
            if self.retained[i] {
                self.grads[i] = Some(g);
            }
        }
        Ok(())
    }

    fn backward_op(&mut self, node: usize, op: Op, g: &[f64]) -> Result<()> {
        let Graph { values, grads, needs_grad, .. } = self;
        let values: &[Tensor] = values;
        let needs: &[bool] = needs_grad;
        macro_rules! slot {
            ($v:expr) => {
                grad_slot(grads, needs, values, $v)
            };
        }
        let y = values[node].data();
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, geom, batch, out_c, cols } => {
                let (rows, ncol) = (geom.col_rows(), geom.col_cols());
                if let Some(dk) = slot!(kernel) {
                    for b in 0..batch {
                        let cols_t = kernels::transpose(rows, ncol, &cols[b * rows * ncol..(b + 1) * rows * ncol]);
                        kernels::gemm_nn(out_c, ncol, rows, &g[b * out_c * ncol..(b + 1) * out_c * ncol], &cols_t, dk);
                    }
                }
                if let Some(dst) = slot!(input) {
                    let k = values[kernel.0].data();
                    let mut dcols = vec![0.0; rows * ncol];
                    for b in 0..batch {
                        dcols.fill(0.0);
                        kernels::gemm_tn(rows, out_c, ncol, k, &g[b * out_c * ncol..(b + 1) * out_c * ncol], &mut dcols);
                        kernels::col2im_add(&geom, &dcols, &mut dst[b * geom.image_len()..(b + 1) * geom.image_len()]);
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(dst) = slot!(a) {
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        if yv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(dst) = slot!(a) {
                    for ((d, &gv), &yv) in dst.iter_mut().zip(g).zip(y) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                if let Some(dst) = slot!(a) {
                    kernels::gemm_nt(m, n, k, g, values[b.0].data(), dst);
                }
                if let Some(dst) = slot!(b) {
                    kernels::gemm_tn(k, m, n, values[a.0].data(), g, dst);
                }
            }
            Op::Transpose { a, rows, cols } => {
                if let Some(dst) = slot!(a) {
                    add_into(dst, &kernels::transpose(cols, rows, g));
                }
            }
            Op::Add(a, b) => {
                if let Some(dst) = slot!(a) {
                    add_into(dst, g);
                }
                if let Some(dst) = slot!(b) {
                    add_into(dst, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(dst) = slot!(a) {
                    add_into(dst, g);
                }
                if let Some(dst) = slot!(b) {
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d -= v);
                }
            }
            Op::Mul(a, b) => {
                if let Some(dst) = slot!(a) {
                    let bv = values[b.0].data();
                    dst.iter_mut().zip(g).zip(bv).for_each(|((d, v), w)| *d += v * w);
                }
                if let Some(dst) = slot!(b) {
                    let av = values[a.0].data();
                    dst.iter_mut().zip(g).zip(av).for_each(|((d, v), w)| *d += v * w);
                }
            }
            Op::Scale(a, s) => {
                if let Some(dst) = slot!(a) {
                    dst.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(dst) = slot!(a) {
                    add_into(dst, g);
                }
            }
            Op::Sum(a) => {
                if let Some(dst) = slot!(a) {
                    dst.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(dst) = slot!(a) {
                    let s = g[0] / dst.len() as f64;
                    dst.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::SliceRows { a, start, row_len } => {
                if let Some(dst) = slot!(a) {
                    add_into(&mut dst[start * row_len..start * row_len + g.len()], g);
                }
            }
            Op::ConcatRows(a, b) => {
                let na = values[a.0].len();
                if let Some(dst) = slot!(a) {
                    add_into(dst, &g[..na]);
                }
                if let Some(dst) = slot!(b) {
                    add_into(dst, &g[na..]);
                }
            }
            Op::Gather { src, indices } => {
                if let Some(dst) = slot!(src) {
                    for (&i, &v) in indices.iter().zip(g) {
                        dst[i] += v;
                    }
                }
            }
            Op::ChannelMask { map, mask, channels, spatial } => {
                debug_assert_eq!(values[mask.0].len() % channels, 0);
                if let Some(dst) = slot!(mask) {
                    let x = values[map.0].data();
                    for ((d, gc), xc) in dst.iter_mut().zip(g.chunks_exact(spatial)).zip(x.chunks_exact(spatial)) {
                        *d += gc.iter().zip(xc).fold(0.0, |acc, (a, b)| acc + a * b);
                    }
                }
                if let Some(dst) = slot!(map) {
                    let m = values[mask.0].data();
                    for ((dc, gc), &s) in dst.chunks_exact_mut(spatial).zip(g.chunks_exact(spatial)).zip(m) {
                        dc.iter_mut().zip(gc).for_each(|(d, v)| *d += v * s);
                    }
                }
            }
            Op::SpatialMean { map, spatial } => {
                if let Some(dst) = slot!(map) {
                    let inv = 1.0 / spatial as f64;
                    for (dc, &gv) in dst.chunks_exact_mut(spatial).zip(g) {
                        dc.iter_mut().for_each(|d| *d += gv * inv);
                    }
                }
            }
            Op::GemPool { map, dims, parts, p, eps } => {
                let [b, c, h, w] = dims;
                let slab = h / parts;
                let count = (slab * w) as f64;
                let x = values[map.0].data();
                if let Some(dst) = slot!(map) {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            for n in 0..parts {
                                let o = (bi * parts + n) * c + ci;
                                // dy/dx = y^(1-p) · x^(p-1) / count above the clamp.
                                let coef = g[o] * powf(y[o], 1.0 - p) / count;
                                let lo = base + n * slab * w;
                                for j in lo..lo + slab * w {
                                    if x[j] > eps {
                                        dst[j] += coef * powf(x[j], p - 1.0);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { a, dim, norms } => {
                if let Some(dst) = slot!(a) {
                    for (r, n) in norms.iter().enumerate() {
                        let yr = &y[r * dim..(r + 1) * dim];
                        let gr = &g[r * dim..(r + 1) * dim];
                        let dot = yr.iter().zip(gr).fold(0.0, |acc, (a, b)| acc + a * b);
                        for j in 0..dim {
                            dst[r * dim + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(dst) = slot!(logits) {
                    let z = probs.len() / labels.len();
                    let scale = g[0] / labels.len() as f64;
                    for (j, d) in dst.iter_mut().enumerate() {
                        let onehot = if labels[j / z] == j % z { 1.0 } else { 0.0 };
                        *d += (probs[j] - onehot) * scale;
                    }
                }
            }
            Op::ContrastiveNll { logits, cols, positive, p_all, p_pos } => {
                if let Some(dst) = slot!(logits) {
                    let scale = g[0] / (p_all.len() / cols) as f64;
                    for (j, d) in dst.iter_mut().enumerate() {
                        let pos = if positive[j] { p_pos[j] } else { 0.0 };
                        *d += (p_all[j] - pos) * scale;
                    }
                }
            }
            Op::PairwiseDistance { a, rows, dim } => {
                let x = values[a.0].data();
                if let Some(dst) = slot!(a) {
                    for i in 0..rows {
                        for j in 0..rows {
                            let dij = y[i * rows + j];
                            // Subgradient 0 where the distance vanishes.
                            if i == j || dij == 0.0 {
                                continue;
                            }
                            let s = g[i * rows + j] / dij;
                            for k in 0..dim {
                                let diff = x[i * dim + k] - x[j * dim + k];
                                dst[i * dim + k] += s * diff;
                                dst[j * dim + k] -= s * diff;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], needs: &[bool], values: &[Tensor], v: Var) -> Option<&'a mut [f64]> {
    if !needs[v.0] {
        return None;
    }
    let len = values[v.0].len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Conv2d { .. } => "conv2d",
        Op::Relu(_) => "relu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Matmul { .. } => "matmul",
        Op::Transpose { .. } => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(_) => "add_scalar",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::Reshape(_) => "reshape",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::Gather { .. } => "gather",
        Op::ChannelMask { .. } => "channel_mask",
        Op::SpatialMean { .. } => "spatial_mean",
        Op::GemPool { .. } => "gem_pool",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::ContrastiveNll { .. } => "contrastive_nll",
        Op::PairwiseDistance { .. } => "pairwise_distance",
    }
}

fn as_matrix(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::Dimension(format!("{} must be a matrix, got shape {:?}", what, shape))),
    }
}

fn map4(shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        [b, c, h, w] => Ok([*b, *c, *h, *w]),
        _ => Err(Error::Dimension(format!("expected a B×C×H×W map, got shape {:?}", shape))),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `x^p`, using repeated multiplication when `p` is a small integer.
pub(crate) fn powf(x: f64, p: f64) -> f64 {
    if p == 1.0 {
        x
    } else if p == 2.0 {
        x * x
    } else if p == 3.0 {
        x * x * x
    } else if p == -2.0 {
        1.0 / (x * x)
    } else {
        libm::pow(x, p)
    }
}

/// Max-shifted log-sum-exp; terms are summed in iteration order.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let s = values.fold(0.0, |acc, v| acc + libm::exp(v - max));
    max + libm::log(s)
}

/// Row-major `rows×rows` matrix of Euclidean distances between `rows×dim` vectors.
pub fn pairwise_distances(x: &[f64], rows: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            if i != j {
                let s = (0..dim).fold(0.0, |acc, k| {
                    let d = x[i * dim + k] - x[j * dim + k];
                    acc + d * d
                });
                out[i * rows + j] = libm::sqrt(s);
            }
        }
    }
    out
}

//! Recording tape for reverse-mode differentiation. Every op appends a slot
//! holding the forward value plus what its VJP needs; `backward` replays the
//! slots in reverse creation order, which is a valid reverse topological
//! order because an op can only reference earlier slots.

use super::kernels::{self, PoolMode};
use crate::error::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

/// One weighted binary-cross-entropy term inside a prediction map.
#[derive(Debug, Clone, Copy)]
pub struct BceEntry {
    pub idx: u32,
    pub target: f32,
    pub weight: f32,
}

/// One cross-entropy row over `n` logits strided through a prediction map.
#[derive(Debug, Clone, Copy)]
pub struct CeRow {
    pub base: u32,
    pub stride: u32,
    pub n: u32,
    pub class: u32,
}

/// One smooth-L1 box row: indices of (tx, ty, tw, th) inside a prediction
/// map and their regression targets. Sigmoid is applied to tx/ty before the
/// comparison, matching the offset parameterization of the detector.
#[derive(Debug, Clone, Copy)]
pub struct BoxRow {
    pub idx: [u32; 4],
    pub target: [f32; 4],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    ScaleByNode { x: NodeId, s: NodeId },
    Sum(NodeId),
    Dot(NodeId, NodeId),
    Square(NodeId),
    SqrtGuard(NodeId),
    Relu(NodeId),
    /// Externally supplied forward data, identity backward. Used for
    /// ulp-level value corrections that must not disturb gradient flow.
    Patch(NodeId),
    Sigmoid(NodeId),
    Silu(NodeId),
    Softmax(NodeId),
    Index { x: NodeId, i: usize },
    Concat { parts: Vec<NodeId> },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Conv2d { x: NodeId, k: NodeId, b: Option<NodeId>, stride: usize, pad: usize },
    Pool2d { x: NodeId, mode: PoolMode, window: usize, stride: usize, pad: usize, argmax: Vec<u32> },
    GlobalAvgPool(NodeId),
    L2Normalize { x: NodeId, norm: f32 },
    UpsampleNearest { x: NodeId, factor: usize },
    MaskedBce { x: NodeId, entries: Vec<BceEntry>, norm: f32 },
    MapCrossEntropy { x: NodeId, rows: Vec<CeRow>, norm: f32 },
    BoxRegression { x: NodeId, rows: Vec<BoxRow>, norm: f32 },
}

struct Slot {
    data: Vec<f32>,
    shape: Vec<usize>,
    needs_grad: bool,
    op: Op,
}

/// The computation tape. Create one per forward pass; parameters are bound
/// into it as keyed leaves so their gradients can be flushed back out.
#[derive(Default)]
pub struct Tape {
    slots: Vec<Slot>,
    grads: Vec<Option<Vec<f32>>>,
    bound: HashMap<u32, NodeId>,
}

const SQRT_GUARD: f32 = 1e-12;
const NORM_GUARD: f32 = 1e-8;

pub(crate) fn sigmoid_scalar(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

fn bce_with_logits(z: f32, t: f32) -> f32 {
    z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln()
}

fn smooth_l1(e: f32) -> f32 {
    let a = e.abs();
    if a < 1.0 {
        0.5 * e * e
    } else {
        a - 0.5
    }
}

fn smooth_l1_grad(e: f32) -> f32 {
    if e.abs() < 1.0 {
        e
    } else {
        e.signum()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, needs_grad: bool, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.slots.push(Slot { data, shape, needs_grad, op });
        self.grads.push(None);
        NodeId(self.slots.len() as u32 - 1)
    }

    /// Immutable input value; gradients never flow into it.
    pub fn constant(&mut self, shape: &[usize], data: &[f32]) -> NodeId {
        self.push(shape.to_vec(), data.to_vec(), false, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f32) -> NodeId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    /// Leaf that participates in backward when `requires_grad` is set.
    pub fn leaf(&mut self, t: &super::Tensor) -> NodeId {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    /// Keyed grad leaf: the same key returns the same node within one tape,
    /// so a weight used twice accumulates one gradient. Used by the
    /// parameter store.
    pub fn bound_leaf(&mut self, key: u32, shape: &[usize], data: &[f32]) -> NodeId {
        if let Some(&id) = self.bound.get(&key) {
            return id;
        }
        let id = self.push(shape.to_vec(), data.to_vec(), true, Op::Leaf);
        self.bound.insert(key, id);
        id
    }

    pub fn bound_nodes(&self) -> impl Iterator<Item = (u32, NodeId)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.slots[id.idx()].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.slots[id.idx()].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.idx()].as_deref()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.slots[id.idx()].needs_grad
    }

    fn same_shape(&self, a: NodeId, b: NodeId, ctx: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(self.shape(a), self.shape(b), ctx));
        }
        Ok(())
    }

    // ---- elementwise / reduction ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add operands")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub operands")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul operands")?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, ng, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let data = self.data(x).iter().map(|v| v * c).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, ng, Op::Scale(x, c))
    }

    /// Elementwise product with a scalar node (broadcast), e.g. a learned
    /// fusion weight times a feature map.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if self.data(s).len() != 1 {
            return Err(Error::shape(self.shape(s), &[1], "scale_by weight must be scalar"));
        }
        let sv = self.data(s)[0];
        let data = self.data(x).iter().map(|v| v * sv).collect();
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(self.shape(x).to_vec(), data, ng, Op::ScaleByNode { x, s }))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f32 = self.data(x).iter().sum();
        let ng = self.needs(x);
        self.push(vec![1], vec![s], ng, Op::Sum(x))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "dot operands")?;
        let s: f32 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s], ng, Op::Dot(a, b)))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let data = self.data(x).iter().map(|v| v * v).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, ng, Op::Square(x))
    }

    /// sqrt with a zero-guard: exactly-zero inputs produce zero output and a
    /// zero subgradient, so distances between identical points do not emit
    /// the 1/sqrt singularity.
    pub fn sqrt_guard(&mut self, x: NodeId) -> NodeId {
        let data = self.data(x).iter().map(|v| v.max(0.0).sqrt()).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, ng, Op::SqrtGuard(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self.data(x).iter().map(|v| v.max(0.0)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, ng, Op::Relu(x))
    }

    /// Replaces a node's forward values while keeping an identity backward
    /// path to it. The replacement must match the node's shape.
    pub fn patch(&mut self, x: NodeId, data: Vec<f32>) -> Result<NodeId> {
        if data.len() != self.data(x).len() {
            return Err(Error::Usage(format!(
                "patch data length {} does not match node length {}",
                data.len(),
                self.data(x).len()
            )));
        }
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, ng, Op::Patch(x)))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self.data(x).iter().map(|v| sigmoid_scalar(*v)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, ng, Op::Sigmoid(x))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let data = self.data(x).iter().map(|v| v * sigmoid_scalar(*v)).collect();
        let ng = self.needs(x);
        self.push(self.shape(x).to_vec(), data, ng, Op::Silu(x))
    }

    /// Softmax over a rank-1 tensor, max-subtracted so large logits cannot
    /// overflow.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.shape(x).len() != 1 || self.data(x).is_empty() {
            return Err(Error::Usage(format!(
                "softmax expects a non-empty vector, got shape {:?}",
                self.shape(x)
            )));
        }
        let xs = self.data(x);
        let m = xs.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f32> = xs.iter().map(|v| (v - m).exp()).collect();
        let z: f32 = exps.iter().sum();
        let data: Vec<f32> = exps.iter().map(|e| e / z).collect();
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, ng, Op::Softmax(x)))
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> Result<NodeId> {
        if i >= self.data(x).len() {
            return Err(Error::Usage(format!(
                "index {i} out of bounds for {} elements",
                self.data(x).len()
            )));
        }
        let v = self.data(x)[i];
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![v], ng, Op::Index { x, i }))
    }

    /// Concatenation along the leading axis; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Usage("concat of zero tensors".into()));
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut dim0 = 0;
        let mut data = Vec::new();
        let mut ng = false;
        for &p in parts {
            if self.shape(p)[1..] != tail[..] {
                return Err(Error::shape(self.shape(parts[0]), self.shape(p), "concat trailing dims"));
            }
            dim0 += self.shape(p)[0];
            data.extend_from_slice(self.data(p));
            ng |= self.needs(p);
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(&tail);
        Ok(self.push(shape, data, ng, Op::Concat { parts: parts.to_vec() }))
    }

    // ---- linear algebra / conv ----

    /// y = W x + b with W `[out, in]`, x `[in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (ws, xs) = (self.shape(w).to_vec(), self.shape(x).to_vec());
        if ws.len() != 2 || xs.len() != 1 || ws[1] != xs[0] {
            return Err(Error::shape(&ws, &xs, "linear: weight [out,in] against input [in]"));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(self.shape(b), &[ws[0]], "linear bias"));
            }
        }
        let (out_dim, in_dim) = (ws[0], ws[1]);
        let mut data = vec![0.0f32; out_dim];
        for o in 0..out_dim {
            let row = &self.data(w)[o * in_dim..(o + 1) * in_dim];
            data[o] = row.iter().zip(self.data(x)).map(|(a, b)| a * b).sum();
        }
        if let Some(b) = b {
            for (v, bv) in data.iter_mut().zip(self.data(b)) {
                *v += bv;
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(vec![out_dim], data, ng, Op::Linear { x, w, b }))
    }

    pub fn conv2d(&mut self, x: NodeId, k: NodeId, b: Option<NodeId>, stride: usize, pad: usize) -> Result<NodeId> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(&xs, &ks, "conv2d: input [c,h,w], kernel [co,ci,kh,kw]"));
        }
        if xs[0] != ks[1] {
            return Err(Error::shape(&xs, &ks, "conv2d channel mismatch"));
        }
        if stride == 0 {
            return Err(Error::Usage("conv2d stride must be >= 1".into()));
        }
        let (ci, h, w) = (xs[0], xs[1], xs[2]);
        let (co, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(&xs, &ks, "conv2d kernel larger than padded input"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::shape(self.shape(b), &[co], "conv2d bias"));
            }
        }
        let data = kernels::conv2d_fwd(
            self.data(x), ci, h, w,
            self.data(k), co, kh, kw,
            b.map(|b| self.data(b)),
            stride, pad,
        );
        let oh = kernels::conv_out_dim(h, kh, stride, pad);
        let ow = kernels::conv_out_dim(w, kw, stride, pad);
        let ng = self.needs(x) || self.needs(k) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(vec![co, oh, ow], data, ng, Op::Conv2d { x, k, b, stride, pad }))
    }

    pub fn pool2d(&mut self, x: NodeId, mode: PoolMode, window: usize, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(&xs, &[0, 0, 0], "pool2d input [c,h,w]"));
        }
        if window == 0 || stride == 0 {
            return Err(Error::Usage("pool2d window/stride must be >= 1".into()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if h + 2 * pad < window || w + 2 * pad < window {
            return Err(Error::shape(
                &xs,
                &[window, window],
                "pool2d window larger than padded input",
            ));
        }
        let (data, argmax) = kernels::pool2d_fwd(self.data(x), c, h, w, mode, window, stride, pad);
        let oh = kernels::conv_out_dim(h, window, stride, pad);
        let ow = kernels::conv_out_dim(w, window, stride, pad);
        let ng = self.needs(x);
        Ok(self.push(vec![c, oh, ow], data, ng, Op::Pool2d { x, mode, window, stride, pad, argmax }))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(&xs, &[0, 0, 0], "global_avg_pool input [c,h,w]"));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let hw = (h * w) as f32;
        let data: Vec<f32> = (0..c)
            .map(|ch| self.data(x)[ch * h * w..(ch + 1) * h * w].iter().sum::<f32>() / hw)
            .collect();
        let ng = self.needs(x);
        Ok(self.push(vec![c], data, ng, Op::GlobalAvgPool(x)))
    }

    /// L2 normalization of a vector; the zero vector maps to zero (with a
    /// zero subgradient) instead of dividing by zero.
    /// Scales `x` to unit L2 norm over its flattened data (any shape); maps
    /// with norm below the guard collapse to zero rather than exploding.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.data(x).iter().map(|v| v * v).sum::<f32>().sqrt();
        let data: Vec<f32> = if n < NORM_GUARD {
            vec![0.0; self.data(x).len()]
        } else {
            self.data(x).iter().map(|v| v / n).collect()
        };
        let ng = self.needs(x);
        Ok(self.push(self.shape(x).to_vec(), data, ng, Op::L2Normalize { x, norm: n }))
    }

    pub fn upsample_nearest(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape(&xs, &[0, 0, 0], "upsample input [c,h,w]"));
        }
        if factor == 0 {
            return Err(Error::Usage("upsample factor must be >= 1".into()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0f32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                let src_row = ch * h * w + (oy / factor) * w;
                let dst_row = ch * oh * ow + oy * ow;
                for ox in 0..ow {
                    data[dst_row + ox] = self.data(x)[src_row + ox / factor];
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![c, oh, ow], data, ng, Op::UpsampleNearest { x, factor }))
    }

    // ---- fused detection losses ----

    /// Weighted sum of numerically stable BCE-with-logits terms over selected
    /// map positions, divided by `norm`.
    pub fn masked_bce(&mut self, x: NodeId, entries: Vec<BceEntry>, norm: f32) -> Result<NodeId> {
        let n = self.data(x).len() as u32;
        if let Some(e) = entries.iter().find(|e| e.idx >= n) {
            return Err(Error::Usage(format!("bce index {} out of bounds ({n})", e.idx)));
        }
        if norm <= 0.0 {
            return Err(Error::Usage("bce norm must be positive".into()));
        }
        let s: f32 = entries
            .iter()
            .map(|e| e.weight * bce_with_logits(self.data(x)[e.idx as usize], e.target))
            .sum::<f32>()
            / norm;
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![s], ng, Op::MaskedBce { x, entries, norm }))
    }

    /// Sum of cross-entropy rows (softmax over strided logit slices) divided
    /// by `norm`.
    pub fn map_cross_entropy(&mut self, x: NodeId, rows: Vec<CeRow>, norm: f32) -> Result<NodeId> {
        let len = self.data(x).len() as u64;
        for r in &rows {
            if r.n == 0 || r.class >= r.n {
                return Err(Error::Usage("cross-entropy row with empty classes".into()));
            }
            let last = r.base as u64 + (r.n as u64 - 1) * r.stride as u64;
            if last >= len {
                return Err(Error::Usage("cross-entropy row out of bounds".into()));
            }
        }
        if norm <= 0.0 {
            return Err(Error::Usage("cross-entropy norm must be positive".into()));
        }
        let mut s = 0.0f32;
        for r in &rows {
            let logits: Vec<f32> = (0..r.n)
                .map(|j| self.data(x)[(r.base + j * r.stride) as usize])
                .collect();
            let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            s += lse - logits[r.class as usize];
        }
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![s / norm], ng, Op::MapCrossEntropy { x, rows, norm }))
    }

    /// Smooth-L1 regression on (sigmoid(tx), sigmoid(ty), tw, th) against
    /// per-row targets, summed and divided by `norm`.
    pub fn box_regression(&mut self, x: NodeId, rows: Vec<BoxRow>, norm: f32) -> Result<NodeId> {
        let n = self.data(x).len() as u32;
        for r in &rows {
            if r.idx.iter().any(|&i| i >= n) {
                return Err(Error::Usage("box regression index out of bounds".into()));
            }
        }
        if norm <= 0.0 {
            return Err(Error::Usage("box regression norm must be positive".into()));
        }
        let mut s = 0.0f32;
        for r in &rows {
            for c in 0..4 {
                let raw = self.data(x)[r.idx[c] as usize];
                let v = if c < 2 { sigmoid_scalar(raw) } else { raw };
                s += smooth_l1(v - r.target[c]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(vec![1], vec![s / norm], ng, Op::BoxRegression { x, rows, norm }))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate across
    /// repeated calls until `zero_grads` clears them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // Leaves accumulate across calls; intermediates must start clean or a
        // second backward pass would re-propagate last pass's gradients.
        for oid in 0..self.slots.len() {
            if !matches!(self.slots[oid].op, Op::Leaf) {
                self.grads[oid] = None;
            }
        }
        {
            let len = self.slots[loss.idx()].data.len();
            let g = self.grads[loss.idx()].get_or_insert_with(|| vec![0.0; len]);
            g[0] += 1.0;
        }
        for oid in (0..=loss.idx()).rev() {
            if !self.slots[oid].needs_grad {
                continue;
            }
            let gout = match self.grads[oid].take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_vjp(oid, &gout);
            self.grads[oid] = Some(gout);
        }
        Ok(())
    }

    fn acc_into(&mut self, id: NodeId, f: impl FnOnce(&mut [f32])) {
        if !self.slots[id.idx()].needs_grad {
            return;
        }
        let len = self.slots[id.idx()].data.len();
        let g = self.grads[id.idx()].get_or_insert_with(|| vec![0.0; len]);
        f(g.as_mut_slice());
    }

    #[allow(clippy::needless_range_loop)]
    fn apply_vjp(&mut self, oid: usize, gout: &[f32]) {
        // Read-only borrows of the slot table are taken as clones of small
        // metadata; bulk data is indexed directly to avoid aliasing issues.
        macro_rules! data {
            ($id:expr) => {
                &self.slots[$id.idx()].data
            };
        }
        let op = std::mem::replace(&mut self.slots[oid].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_into(*a, |g| g.iter_mut().zip(gout).for_each(|(d, s)| *d += s));
                self.acc_into(*b, |g| g.iter_mut().zip(gout).for_each(|(d, s)| *d += s));
            }
            Op::Sub(a, b) => {
                self.acc_into(*a, |g| g.iter_mut().zip(gout).for_each(|(d, s)| *d += s));
                self.acc_into(*b, |g| g.iter_mut().zip(gout).for_each(|(d, s)| *d -= s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (data!(a).clone(), data!(b).clone());
                self.acc_into(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                self.acc_into(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * c;
                    }
                });
            }
            Op::ScaleByNode { x, s } => {
                let sv = data!(s)[0];
                let xv = data!(x).clone();
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * sv;
                    }
                });
                let ds: f32 = xv.iter().zip(gout).map(|(a, b)| a * b).sum();
                self.acc_into(*s, |g| g[0] += ds);
            }
            Op::Sum(x) => {
                let g0 = gout[0];
                self.acc_into(*x, |g| g.iter_mut().for_each(|d| *d += g0));
            }
            Op::Dot(a, b) => {
                let g0 = gout[0];
                let (av, bv) = (data!(a).clone(), data!(b).clone());
                self.acc_into(*a, |g| {
                    for i in 0..g.len() {
                        g[i] += g0 * bv[i];
                    }
                });
                self.acc_into(*b, |g| {
                    for i in 0..g.len() {
                        g[i] += g0 * av[i];
                    }
                });
            }
            Op::Square(x) => {
                let xv = data!(x).clone();
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * xv[i] * gout[i];
                    }
                });
            }
            Op::SqrtGuard(x) => {
                let xv = data!(x).clone();
                let yv = self.slots[oid].data.clone();
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        if xv[i] > SQRT_GUARD {
                            g[i] += gout[i] / (2.0 * yv[i]);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xv = data!(x).clone();
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::Patch(x) => {
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i];
                    }
                });
            }
            Op::Sigmoid(x) => {
                let yv = self.slots[oid].data.clone();
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                    }
                });
            }
            Op::Silu(x) => {
                let xv = data!(x).clone();
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        let s = sigmoid_scalar(xv[i]);
                        g[i] += gout[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                });
            }
            Op::Softmax(x) => {
                let yv = self.slots[oid].data.clone();
                let dot: f32 = yv.iter().zip(gout).map(|(a, b)| a * b).sum();
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += yv[i] * (gout[i] - dot);
                    }
                });
            }
            Op::Index { x, i } => {
                let (i, g0) = (*i, gout[0]);
                self.acc_into(*x, |g| g[i] += g0);
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = self.slots[p.idx()].data.len();
                    let slice = gout[off..off + len].to_vec();
                    self.acc_into(p, |g| {
                        for i in 0..len {
                            g[i] += slice[i];
                        }
                    });
                    off += len;
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.slots[w.idx()].shape.clone();
                let (out_dim, in_dim) = (ws[0], ws[1]);
                let wv = data!(w).clone();
                let xv = data!(x).clone();
                self.acc_into(*x, |g| {
                    for o in 0..out_dim {
                        let go = gout[o];
                        for i in 0..in_dim {
                            g[i] += wv[o * in_dim + i] * go;
                        }
                    }
                });
                self.acc_into(*w, |g| {
                    for o in 0..out_dim {
                        let go = gout[o];
                        for i in 0..in_dim {
                            g[o * in_dim + i] += go * xv[i];
                        }
                    }
                });
                if let Some(b) = b {
                    self.acc_into(*b, |g| {
                        for o in 0..out_dim {
                            g[o] += gout[o];
                        }
                    });
                }
            }
            Op::Conv2d { x, k, b, stride, pad } => {
                let xs = self.slots[x.idx()].shape.clone();
                let ks = self.slots[k.idx()].shape.clone();
                let (ci, h, w) = (xs[0], xs[1], xs[2]);
                let (co, kh, kw) = (ks[0], ks[2], ks[3]);
                let xv = data!(x).clone();
                let kv = data!(k).clone();
                let want_dx = self.slots[x.idx()].needs_grad;
                let want_dk = self.slots[k.idx()].needs_grad;
                let mut dx = if want_dx { Some(vec![0.0f32; xv.len()]) } else { None };
                let mut dk = if want_dk { Some(vec![0.0f32; kv.len()]) } else { None };
                let mut db_buf = b
                    .filter(|b| self.slots[b.idx()].needs_grad)
                    .map(|b| vec![0.0f32; self.slots[b.idx()].data.len()]);
                kernels::conv2d_bwd(
                    &xv, ci, h, w, &kv, co, kh, kw, gout, *stride, *pad,
                    dx.as_deref_mut(), dk.as_deref_mut(), db_buf.as_deref_mut(),
                );
                if let Some(dx) = dx {
                    self.acc_into(*x, |g| {
                        for i in 0..g.len() {
                            g[i] += dx[i];
                        }
                    });
                }
                if let Some(dk) = dk {
                    self.acc_into(*k, |g| {
                        for i in 0..g.len() {
                            g[i] += dk[i];
                        }
                    });
                }
                if let (Some(b), Some(db)) = (b, db_buf) {
                    self.acc_into(*b, |g| {
                        for i in 0..g.len() {
                            g[i] += db[i];
                        }
                    });
                }
            }
            Op::Pool2d { x, mode, window, stride, pad, argmax } => {
                let xs = self.slots[x.idx()].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let mut dx = vec![0.0f32; c * h * w];
                kernels::pool2d_bwd(gout, c, h, w, *mode, *window, *stride, *pad, argmax, &mut dx);
                self.acc_into(*x, |g| {
                    for i in 0..g.len() {
                        g[i] += dx[i];
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.slots[x.idx()].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let hw = (h * w) as f32;
                self.acc_into(*x, |g| {
                    for ch in 0..c {
                        let gc = gout[ch] / hw;
                        for i in 0..h * w {
                            g[ch * h * w + i] += gc;
                        }
                    }
                });
            }
            Op::L2Normalize { x, norm } => {
                if *norm >= NORM_GUARD {
                    let yv = self.slots[oid].data.clone();
                    let dot: f32 = yv.iter().zip(gout).map(|(a, b)| a * b).sum();
                    let n = *norm;
                    self.acc_into(*x, |g| {
                        for i in 0..g.len() {
                            g[i] += (gout[i] - yv[i] * dot) / n;
                        }
                    });
                }
            }
            Op::UpsampleNearest { x, factor } => {
                let xs = self.slots[x.idx()].shape.clone();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let f = *factor;
                let (oh, ow) = (h * f, w * f);
                self.acc_into(*x, |g| {
                    for ch in 0..c {
                        for oy in 0..oh {
                            let src_row = ch * h * w + (oy / f) * w;
                            let dst_row = ch * oh * ow + oy * ow;
                            for ox in 0..ow {
                                g[src_row + ox / f] += gout[dst_row + ox];
                            }
                        }
                    }
                });
            }
            Op::MaskedBce { x, entries, norm } => {
                let g0 = gout[0] / norm;
                let xv = data!(x).clone();
                let entries = entries.clone();
                self.acc_into(*x, |g| {
                    for e in &entries {
                        let p = sigmoid_scalar(xv[e.idx as usize]);
                        g[e.idx as usize] += e.weight * (p - e.target) * g0;
                    }
                });
            }
            Op::MapCrossEntropy { x, rows, norm } => {
                let g0 = gout[0] / norm;
                let xv = data!(x).clone();
                let rows = rows.clone();
                self.acc_into(*x, |g| {
                    for r in &rows {
                        let logits: Vec<f32> = (0..r.n)
                            .map(|j| xv[(r.base + j * r.stride) as usize])
                            .collect();
                        let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                        let exps: Vec<f32> = logits.iter().map(|v| (v - m).exp()).collect();
                        let z: f32 = exps.iter().sum();
                        for j in 0..r.n {
                            let p = exps[j as usize] / z;
                            let onehot = if j == r.class { 1.0 } else { 0.0 };
                            g[(r.base + j * r.stride) as usize] += (p - onehot) * g0;
                        }
                    }
                });
            }
            Op::BoxRegression { x, rows, norm } => {
                let g0 = gout[0] / norm;
                let xv = data!(x).clone();
                let rows = rows.clone();
                self.acc_into(*x, |g| {
                    for r in &rows {
                        for c in 0..4 {
                            let raw = xv[r.idx[c] as usize];
                            if c < 2 {
                                let s = sigmoid_scalar(raw);
                                g[r.idx[c] as usize] +=
                                    smooth_l1_grad(s - r.target[c]) * s * (1.0 - s) * g0;
                            } else {
                                g[r.idx[c] as usize] += smooth_l1_grad(raw - r.target[c]) * g0;
                            }
                        }
                    }
                });
            }
        }
        self.slots[oid].op = op;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn assert_close(actual: f32, expected: f32, tol: f32, msg: &str) {
        assert!(
            (actual - expected).abs() <= tol,
            "{msg}: got {actual}, want {expected}"
        );
    }

    #[test]
    fn silu_matches_reference_points() {
        let mut t = Tape::new();
        let x = t.constant(&[3], &[0.0, 1.0, -1.0]);
        let y = t.silu(x);
        assert_close(t.data(y)[0], 0.0, 1e-7, "silu(0)");
        assert_close(t.data(y)[1], 0.731058, 1e-5, "silu(1)");
        assert_close(t.data(y)[2], -0.268941, 1e-5, "silu(-1)");
    }

    #[test]
    fn silu_large_negative_does_not_overflow() {
        let mut t = Tape::new();
        let x = t.constant(&[1], &[-1000.0]);
        let y = t.silu(x);
        assert!(t.data(y)[0].abs() < 1e-6 && t.data(y)[0].is_finite());
    }

    #[test]
    fn sigmoid_extremes_saturate_without_nan() {
        let mut t = Tape::new();
        let x = t.constant(&[3], &[0.0, 50.0, -50.0]);
        let y = t.sigmoid(x);
        assert_close(t.data(y)[0], 0.5, 1e-7, "sigmoid(0)");
        assert_close(t.data(y)[1], 1.0, 1e-6, "sigmoid(50)");
        assert_close(t.data(y)[2], 0.0, 1e-6, "sigmoid(-50)");
    }

    #[test]
    fn softmax_uniform_and_ln3() {
        let mut t = Tape::new();
        let a = t.constant(&[3], &[2.0, 2.0, 2.0]);
        let sa = t.softmax(a).unwrap();
        for v in t.data(sa) {
            assert_close(*v, 1.0 / 3.0, 1e-6, "softmax uniform");
        }
        let b = t.constant(&[2], &[0.0, 3f32.ln()]);
        let sb = t.softmax(b).unwrap();
        assert_close(t.data(sb)[0], 0.25, 1e-6, "softmax ln3 lo");
        assert_close(t.data(sb)[1], 0.75, 1e-6, "softmax ln3 hi");
    }

    #[test]
    fn softmax_huge_logit_does_not_overflow() {
        let mut t = Tape::new();
        let x = t.constant(&[2], &[1000.0, 0.0]);
        let y = t.softmax(x).unwrap();
        assert_close(t.data(y)[0], 1.0, 1e-7, "softmax big");
        assert_close(t.data(y)[1], 0.0, 1e-7, "softmax small");
    }

    #[test]
    fn softmax_empty_is_an_error() {
        let mut t = Tape::new();
        let x = t.constant(&[0], &[]);
        assert!(t.softmax(x).is_err());
    }

    #[test]
    fn linear_identity_affine_and_mismatch() {
        let mut t = Tape::new();
        let x = t.constant(&[2], &[2.0, 3.0]);
        let eye = t.constant(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = t.linear(x, eye, None).unwrap();
        assert_eq!(t.data(y), &[2.0, 3.0]);

        let w = t.constant(&[1, 2], &[1.0, 1.0]);
        let b = t.constant(&[1], &[1.0]);
        let y2 = t.linear(x, w, Some(b)).unwrap();
        assert_close(t.data(y2)[0], 6.0, 1e-6, "affine");

        let wz = t.constant(&[2, 2], &[0.0; 4]);
        let bz = t.constant(&[2], &[5.0, 5.0]);
        let y3 = t.linear(x, wz, Some(bz)).unwrap();
        assert_eq!(t.data(y3), &[5.0, 5.0]);

        let bad = t.constant(&[3], &[1.0, 2.0, 3.0]);
        let err = t.linear(bad, eye, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 2]") && msg.contains("[3]"), "message names both shapes: {msg}");
    }

    #[test]
    fn conv2d_identity_window_sum_and_channel_mix() {
        let mut t = Tape::new();
        let x: Vec<f32> = (0..9).map(|v| v as f32 - 4.0).collect();
        let xn = t.constant(&[1, 3, 3], &x);
        let k1 = t.constant(&[1, 1, 1, 1], &[1.0]);
        let y = t.conv2d(xn, k1, None, 1, 0).unwrap();
        assert_eq!(t.data(y), &x[..]);

        let ones = t.constant(&[1, 3, 3], &[1.0; 9]);
        let k3 = t.constant(&[1, 1, 3, 3], &[1.0; 9]);
        let y2 = t.conv2d(ones, k3, None, 1, 0).unwrap();
        assert_eq!(t.shape(y2), &[1, 1, 1]);
        assert_close(t.data(y2)[0], 9.0, 1e-6, "3x3 ones");

        // two input channels, kernel (a, b) = (2, 10): y = 2*x1 + 10*x2
        let x2 = t.constant(&[2, 1, 1], &[3.0, 4.0]);
        let kmix = t.constant(&[1, 2, 1, 1], &[2.0, 10.0]);
        let y3 = t.conv2d(x2, kmix, None, 1, 0).unwrap();
        assert_close(t.data(y3)[0], 46.0, 1e-6, "channel mix");

        let kbad = t.constant(&[1, 3, 1, 1], &[1.0, 1.0, 1.0]);
        assert!(t.conv2d(x2, kbad, None, 1, 0).is_err());
    }

    #[test]
    fn pool_window_larger_than_input_errors() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert!(t.pool2d(x, PoolMode::Max, 3, 1, 0).is_err());
        // constant map stays constant under max pooling
        let c = t.constant(&[1, 4, 4], &[7.0; 16]);
        let y = t.pool2d(c, PoolMode::Max, 2, 2, 0).unwrap();
        assert!(t.data(y).iter().all(|&v| v == 7.0));
    }

    #[test]
    fn backward_of_sum_is_ones_and_silu_grad_at_zero_is_half() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::from_vec(vec![1.0, -2.0, 3.0]).with_grad());
        let s = t.sum(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut t2 = Tape::new();
        let x0 = t2.leaf(&Tensor::from_vec(vec![0.0]).with_grad());
        let y = t2.silu(x0);
        let l = t2.sum(y);
        t2.backward(l).unwrap();
        assert_close(t2.grad(x0).unwrap()[0], 0.5, 1e-6, "silu'(0)");
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::from_vec(vec![1.0, 2.0]).with_grad());
        let y = t.silu(x);
        assert!(t.backward(y).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_until_cleared() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::from_vec(vec![2.0]).with_grad());
        let l = t.sum(x);
        t.backward(l).unwrap();
        t.backward(l).unwrap();
        // two sweeps: dL/dx accumulated twice
        assert_close(t.grad(x).unwrap()[0], 2.0, 1e-6, "accumulated grad");
        t.zero_grads();
        assert!(t.grad(x).is_none());
        t.backward(l).unwrap();
        assert_close(t.grad(x).unwrap()[0], 1.0, 1e-6, "fresh grad");
    }

    #[test]
    fn constants_never_get_gradients() {
        let mut t = Tape::new();
        let c = t.constant(&[2], &[1.0, 2.0]);
        let x = t.leaf(&Tensor::from_vec(vec![3.0, 4.0]).with_grad());
        let y = t.mul(c, x).unwrap();
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert!(t.grad(c).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_twice_is_deterministic() {
        let run = || {
            let mut t = Tape::new();
            let x = t.leaf(&Tensor::from_vec(vec![0.3, -0.7, 1.9]).with_grad());
            let y = t.silu(x);
            let z = t.softmax(y).unwrap();
            let w = t.constant(&[3], &[0.2, -1.0, 0.5]);
            let l = t.dot(z, w).unwrap();
            t.backward(l).unwrap();
            t.grad(x).unwrap().to_vec()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bound_leaf_is_memoized_per_key() {
        let mut t = Tape::new();
        let a = t.bound_leaf(7, &[2], &[1.0, 2.0]);
        let b = t.bound_leaf(7, &[2], &[1.0, 2.0]);
        assert_eq!(a, b);
        let y = t.add(a, b).unwrap(); // x + x
        let l = t.sum(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn decoupled_distance_of_identical_nodes_is_exactly_zero() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::from_vec(vec![0.1, 0.2, 0.3]).with_grad());
        let d = t.sub(x, x).unwrap();
        let sq = t.square(d);
        let s = t.sum(sq);
        let dist = t.sqrt_guard(s);
        assert_eq!(t.data(dist)[0], 0.0);
        t.backward(dist).unwrap();
        // zero-distance subgradient convention: no singularity, grad is zero
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 0.0));
    }
}

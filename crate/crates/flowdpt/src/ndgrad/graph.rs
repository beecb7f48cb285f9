//! Reverse-mode tape over [`Array`] values.
//!
//! A [`Graph`] records one forward computation as an append-ordered tape;
//! `backward` replays it once in reverse, accumulating adjoints. Parameters
//! live outside the graph in a [`ParamStore`] that the graph borrows
//! read-only, so independent graphs (one per batch sample, one per rollout
//! worker) can run concurrently against frozen parameters.

use super::array::{self, Array};
use super::params::{Gradients, ParamId, ParamStore};
use super::GradError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum NodeValue {
    Owned(Array),
    Param(ParamId),
}

enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    AddBias { a: NodeId, bias: NodeId },
    ConcatCols { parts: Vec<NodeId> },
    ConcatRows { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    SliceRows { a: NodeId, start: usize, len: usize },
    PermuteRows { a: NodeId, perm: Vec<usize> },
    GatherRows { a: NodeId, idx: Vec<usize> },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    Gelu { a: NodeId },
    Silu { a: NodeId },
    Sin { a: NodeId },
    Cos { a: NodeId },
    Exp { a: NodeId },
    Ln { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    Sum { a: NodeId },
    Mean { a: NodeId },
}

struct Node {
    value: NodeValue,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_leaves: Vec<(NodeId, ParamId)>,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Graph { store, nodes: Vec::new(), param_leaves: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Array {
        match &self.nodes[id.0].value {
            NodeValue::Owned(a) => a,
            NodeValue::Param(p) => self.store.value(*p),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value: NodeValue::Owned(value), op });
        id
    }

    /// Register a parameter leaf. The value is read from the store.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node { value: NodeValue::Param(id), op: Op::Leaf });
        self.param_leaves.push((node, id));
        node
    }

    pub fn param_named(&mut self, name: &str) -> NodeId {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    /// Leaf holding a value that gradients flow past but are not collected for.
    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let v = array::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = array::transpose(self.value(a));
        self.push(v, Op::Transpose { a })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let v = array::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let v = array::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let v = array::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = array::scale(self.value(a), c);
        self.push(v, Op::Scale { a, c })
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, GradError> {
        let v = array::add_bias(self.value(a), self.value(bias))?;
        Ok(self.push(v, Op::AddBias { a, bias }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        let arrays: Vec<&Array> = parts.iter().map(|&p| self.value(p)).collect();
        let v = array::concat_cols(&arrays)?;
        Ok(self.push(v, Op::ConcatCols { parts: parts.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, GradError> {
        let arrays: Vec<&Array> = parts.iter().map(|&p| self.value(p)).collect();
        let v = array::concat_rows(&arrays)?;
        Ok(self.push(v, Op::ConcatRows { parts: parts.to_vec() }))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, GradError> {
        let v = array::slice_cols(self.value(a), start, len)?;
        Ok(self.push(v, Op::SliceCols { a, start, len }))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, GradError> {
        let v = array::slice_rows(self.value(a), start, len)?;
        Ok(self.push(v, Op::SliceRows { a, start, len }))
    }

    pub fn permute_rows(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId, GradError> {
        let v = array::permute_rows(self.value(a), perm)?;
        Ok(self.push(v, Op::PermuteRows { a, perm: perm.to_vec() }))
    }

    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> Result<NodeId, GradError> {
        let v = array::gather_rows(self.value(a), idx)?;
        Ok(self.push(v, Op::GatherRows { a, idx: idx.to_vec() }))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = array::softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows { a })
    }

    pub fn layer_norm(
        &mut self,
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, GradError> {
        let v = array::layer_norm(self.value(a), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(v, Op::LayerNorm { a, gain, bias, eps }))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = array::gelu(self.value(a));
        self.push(v, Op::Gelu { a })
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = array::silu(self.value(a));
        self.push(v, Op::Silu { a })
    }

    pub fn sin(&mut self, a: NodeId) -> NodeId {
        let v = array::map(self.value(a), f64::sin);
        self.push(v, Op::Sin { a })
    }

    pub fn cos(&mut self, a: NodeId) -> NodeId {
        let v = array::map(self.value(a), f64::cos);
        self.push(v, Op::Cos { a })
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = array::map(self.value(a), f64::exp);
        self.push(v, Op::Exp { a })
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = array::map(self.value(a), f64::ln);
        self.push(v, Op::Ln { a })
    }

    /// Clamp with zero gradient outside the open interval (lo, hi).
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = array::clamp(self.value(a), lo, hi);
        self.push(v, Op::Clamp { a, lo, hi })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = array::sum(self.value(a));
        self.push(v, Op::Sum { a })
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = array::mean(self.value(a));
        self.push(v, Op::Mean { a })
    }

    /// Reverse pass from a scalar loss node.
    ///
    /// Visits the tape once in reverse append order. Every parameter of the
    /// store gets a gradient; parameters unreachable from the loss get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GradError> {
        if !self.value(loss).is_scalar() {
            return Err(GradError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::scalar(1.0));
        let mut out = Gradients::zeros_like(self.store);

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    if let NodeValue::Param(pid) = self.nodes[i].value {
                        accumulate_into(out.get_mut(pid), &g);
                    }
                }
                Op::Matmul { a, b } => {
                    let bt = array::transpose(self.value(*b));
                    let at = array::transpose(self.value(*a));
                    acc(&mut grads, *a, array::matmul(&g, &bt)?);
                    acc(&mut grads, *b, array::matmul(&at, &g)?);
                }
                Op::Transpose { a } => {
                    acc(&mut grads, *a, array::transpose(&g));
                }
                Op::Add { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub { a, b } => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, array::scale(&g, -1.0));
                }
                Op::Mul { a, b } => {
                    acc(&mut grads, *a, array::mul(&g, self.value(*b))?);
                    acc(&mut grads, *b, array::mul(&g, self.value(*a))?);
                }
                Op::Scale { a, c } => {
                    acc(&mut grads, *a, array::scale(&g, *c));
                }
                Op::AddBias { a, bias } => {
                    let n = g.cols();
                    let mut db = vec![0.0; n];
                    for row in g.data().chunks_exact(n) {
                        for (d, x) in db.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                    let bias_shape = self.value(*bias).shape().to_vec();
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *bias, Array::from_vec(&bias_shape, db)?);
                }
                Op::ConcatCols { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let piece = array::slice_cols(&g, start, w)?;
                        let shaped = reshape_like(piece, self.value(p));
                        acc(&mut grads, p, shaped);
                        start += w;
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let piece = array::slice_rows(&g, start, h)?;
                        let shaped = reshape_like(piece, self.value(p));
                        acc(&mut grads, p, shaped);
                        start += h;
                    }
                }
                Op::SliceCols { a, start, len } => {
                    let src = self.value(*a);
                    let (m, n) = (src.rows(), src.cols());
                    let mut da = Array::zeros(src.shape());
                    for r in 0..m {
                        for c in 0..*len {
                            da.data_mut()[r * n + start + c] = g.data()[r * len + c];
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SliceRows { a, start, len } => {
                    let src = self.value(*a);
                    let n = src.cols();
                    let mut da = Array::zeros(src.shape());
                    da.data_mut()[start * n..(start + len) * n].copy_from_slice(g.data());
                    acc(&mut grads, *a, da);
                }
                Op::PermuteRows { a, perm } => {
                    let mut inv = vec![0usize; perm.len()];
                    for (dst, &src) in perm.iter().enumerate() {
                        inv[src] = dst;
                    }
                    acc(&mut grads, *a, array::permute_rows(&g, &inv)?);
                }
                Op::GatherRows { a, idx } => {
                    let src = self.value(*a);
                    let n = src.cols();
                    let mut da = Array::zeros(src.shape());
                    for (out_row, &src_row) in idx.iter().enumerate() {
                        for c in 0..n {
                            da.data_mut()[src_row * n + c] += g.data()[out_row * n + c];
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SoftmaxRows { a } => {
                    let y = self.value(NodeId(i));
                    let n = y.cols();
                    let mut da = Array::zeros(y.shape());
                    for r in 0..y.rows() {
                        let yr = y.row_slice(r);
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for c in 0..n {
                            da.data_mut()[r * n + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::LayerNorm { a, gain, bias, eps } => {
                    let x = self.value(*a);
                    let gn = self.value(*gain);
                    let n = x.cols();
                    let mut da = Array::zeros(x.shape());
                    let mut dgain = vec![0.0; n];
                    let mut dbias = vec![0.0; n];
                    for r in 0..x.rows() {
                        let xr = x.row_slice(r);
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let mean = xr.iter().sum::<f64>() / n as f64;
                        let var =
                            xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let y: Vec<f64> = xr.iter().map(|v| (v - mean) * inv).collect();
                        // gg = upstream grad scaled by the affine gain
                        let gg: Vec<f64> =
                            gr.iter().zip(gn.data()).map(|(g, w)| g * w).collect();
                        let mean_gg = gg.iter().sum::<f64>() / n as f64;
                        let mean_ggy =
                            gg.iter().zip(&y).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                        for c in 0..n {
                            da.data_mut()[r * n + c] =
                                (gg[c] - mean_gg - y[c] * mean_ggy) * inv;
                            dgain[c] += gr[c] * y[c];
                            dbias[c] += gr[c];
                        }
                    }
                    let gain_shape = gn.shape().to_vec();
                    let bias_shape = self.value(*bias).shape().to_vec();
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *gain, Array::from_vec(&gain_shape, dgain)?);
                    acc(&mut grads, *bias, Array::from_vec(&bias_shape, dbias)?);
                }
                Op::Gelu { a } => {
                    let x = self.value(*a);
                    let da = zip_map(&g, x, |g, x| g * array::gelu_deriv_scalar(x));
                    acc(&mut grads, *a, da);
                }
                Op::Silu { a } => {
                    let x = self.value(*a);
                    let da = zip_map(&g, x, |g, x| g * array::silu_deriv_scalar(x));
                    acc(&mut grads, *a, da);
                }
                Op::Sin { a } => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, zip_map(&g, x, |g, x| g * x.cos()));
                }
                Op::Cos { a } => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, zip_map(&g, x, |g, x| -g * x.sin()));
                }
                Op::Exp { a } => {
                    let y = self.value(NodeId(i)).clone();
                    acc(&mut grads, *a, zip_map(&g, &y, |g, y| g * y));
                }
                Op::Ln { a } => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, zip_map(&g, x, |g, x| g / x));
                }
                Op::Clamp { a, lo, hi } => {
                    let x = self.value(*a);
                    acc(
                        &mut grads,
                        *a,
                        zip_map(&g, x, |g, x| if x > *lo && x < *hi { g } else { 0.0 }),
                    );
                }
                Op::Sum { a } => {
                    let shape = self.value(*a).shape().to_vec();
                    acc(&mut grads, *a, Array::full(&shape, g.scalar_value()));
                }
                Op::Mean { a } => {
                    let src = self.value(*a);
                    let c = g.scalar_value() / src.len() as f64;
                    acc(&mut grads, *a, Array::full(src.shape(), c));
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Array>], target: NodeId, contribution: Array) {
    match &mut grads[target.0] {
        Some(existing) => accumulate_into(existing, &contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn accumulate_into(dst: &mut Array, src: &Array) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

fn zip_map(g: &Array, x: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    debug_assert_eq!(g.len(), x.len());
    let data = g.data().iter().zip(x.data()).map(|(&g, &x)| f(g, x)).collect();
    Array::from_vec(x.shape(), data).expect("zip_map shape")
}

/// Gradient pieces come back as matrices; leaves may be 1-D.
fn reshape_like(piece: Array, reference: &Array) -> Array {
    if piece.shape() == reference.shape() {
        piece
    } else {
        Array::from_vec(reference.shape(), piece.data().to_vec()).expect("reshape_like")
    }
}

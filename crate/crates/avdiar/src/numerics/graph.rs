//! Reverse-mode autodiff over a tape of dense tensor ops.
//!
//! A [`Graph`] owns a flat tape of nodes; every op pushes one node whose
//! inputs have strictly smaller ids, so reverse id order is a valid reverse
//! topological order for backpropagation. Gradients accumulate additively,
//! which makes parameters referenced from several places (shared layers,
//! per-speaker reuse) come out right without special handling.
//!
//! Broadcasting is deliberately narrow: [`Graph::scale_rows`] broadcasts a
//! per-row scalar over the feature dimension and [`Graph::affine`] broadcasts
//! its bias over rows. Everything else requires exact shape agreement.

use std::collections::BTreeMap;

use super::params::ParamSet;
use super::scalar::Scalar;
use super::tensor::Tensor;
use super::NumericsError;

/// Additive floor inside the BCE log terms; posteriors are clamped to
/// `[floor, 1 - floor]` and clamped entries get zero gradient.
const BCE_FLOOR: f64 = 1e-12;
/// Variance stabilizer inside layer normalization.
const LAYER_NORM_EPS: f64 = 1e-5;
/// Row norms below this floor are treated as degenerate in `l2_normalize_rows`.
const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on the tape of one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Input,
    Param(String),
    Matmul(NodeId, NodeId),
    MatmulNt(NodeId, NodeId),
    Affine {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AffineConst {
        x: NodeId,
        mul: S,
    },
    Recip(NodeId),
    ScaleRows {
        x: NodeId,
        s: NodeId,
    },
    Sigmoid(NodeId),
    Relu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    SoftmaxRows(NodeId),
    MeanAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    SelectRows {
        x: NodeId,
        index: Vec<usize>,
    },
    L2Distance(NodeId, NodeId),
    L2NormalizeRows(NodeId),
    WindowMean {
        x: NodeId,
        radius: usize,
    },
    StackContext {
        x: NodeId,
        radius: usize,
    },
    RepeatRows {
        x: NodeId,
        factor: usize,
    },
    Bce {
        probs: NodeId,
        target: Tensor<S>,
    },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    op: Op<S>,
}

/// Tape of tensor operations with reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.idx()].value
    }

    /// Gradient of the last `backward` loss with respect to `id`, if that
    /// node contributed to the loss.
    pub fn grad(&self, id: NodeId) -> Option<Tensor<S>> {
        let node = &self.nodes[id.idx()];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape(), g.clone()).unwrap())
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        id
    }

    /// Leaf holding constant data; gradients reaching it are retained but
    /// unused.
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Input, value)
    }

    /// Leaf bound to a named parameter. The current value is copied onto the
    /// tape; `param_grads` later maps gradients back by name.
    pub fn param(&mut self, params: &ParamSet<S>, name: &str) -> Result<NodeId, NumericsError> {
        let value = params.value(name)?.clone();
        Ok(self.push(Op::Param(name.to_string()), value))
    }

    fn rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), NumericsError> {
        let t = self.value(id);
        if !t.is_rank2() {
            return Err(NumericsError::BadShape {
                op,
                expect: "a rank-2 tensor",
                got: t.shape().to_vec(),
            });
        }
        Ok((t.rows(), t.cols()))
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let data = mm(self.value(a).data(), m, k, self.value(b).data(), n);
        Ok(self.push(
            Op::Matmul(a, b),
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    /// `a * b^T` without materializing the transpose; `b` is `[n x k]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, k) = self.rank2("matmul_nt", a)?;
        let (n, k2) = self.rank2("matmul_nt", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let data = mm_nt(self.value(a).data(), m, k, self.value(b).data(), n);
        Ok(self.push(
            Op::MatmulNt(a, b),
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    /// `x * w + b` with the bias row broadcast over rows of the product.
    pub fn affine(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (m, k) = self.rank2("affine", x)?;
        let (k2, n) = self.rank2("affine", w)?;
        let (br, bn) = self.rank2("affine", b)?;
        if k != k2 {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        if br != 1 || bn != n {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                left: vec![1, n],
                right: vec![br, bn],
            });
        }
        let mut data = mm(self.value(x).data(), m, k, self.value(w).data(), n);
        let bias = self.value(b).data();
        for row in data.chunks_exact_mut(n) {
            for (v, bv) in row.iter_mut().zip(bias) {
                *v = *v + *bv;
            }
        }
        Ok(self.push(
            Op::Affine { x, w, b },
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("add", a, b)?;
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Add(a, b), Tensor::from_vec(&shape, data).unwrap()))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("sub", a, b)?;
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Sub(a, b), Tensor::from_vec(&shape, data).unwrap()))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("mul", a, b)?;
        let data: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        Ok(self.push(Op::Mul(a, b), Tensor::from_vec(&shape, data).unwrap()))
    }

    /// `mul * x + add`, elementwise with constants.
    pub fn affine_const(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let (ms, asv) = (S::of(mul), S::of(add));
        let value = self.value(x).map(|v| ms * v + asv);
        self.push(Op::AffineConst { x, mul: ms }, value)
    }

    /// Elementwise `1 / x`.
    pub fn recip(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| S::one() / v);
        self.push(Op::Recip(x), value)
    }

    /// Multiplies row `t` of `x` by the scalar `s[t]`; the one sanctioned
    /// broadcast of a per-row scalar over the feature dimension.
    pub fn scale_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("scale_rows", x)?;
        let (sm, sn) = self.rank2("scale_rows", s)?;
        if sm != m || sn != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                left: vec![m, n],
                right: vec![sm, sn],
            });
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for (t, row) in data.chunks_exact_mut(n).enumerate() {
            for v in row {
                *v = *v * sv[t];
            }
        }
        Ok(self.push(
            Op::ScaleRows { x, s },
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(stable_sigmoid);
        self.push(Op::Sigmoid(x), value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let z = S::zero();
        let value = self.value(x).map(|v| if v > z { v } else { z });
        self.push(Op::Relu(x), value)
    }

    /// Per-row normalization over the feature dimension with affine scale and
    /// shift: `gamma * (x - mean) / sqrt(var + 1e-5) + beta`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("layer_norm", x)?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let (r, c) = self.rank2("layer_norm", id)?;
            if r != 1 || c != n {
                let _ = name;
                return Err(NumericsError::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![1, n],
                    right: vec![r, c],
                });
            }
        }
        let eps = S::of(LAYER_NORM_EPS);
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let mut data = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks_exact(n) {
            let (mean, var) = row_moments(row);
            let inv = S::one() / (var + eps).sqrt();
            for (j, &v) in row.iter().enumerate() {
                data.push(gv[j] * ((v - mean) * inv) + bv[j]);
            }
        }
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    /// Row-wise softmax with row-max subtraction for stability.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("softmax_rows", x)?;
        let mut data = Vec::with_capacity(m * n);
        for row in self.value(x).data().chunks_exact(n) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let start = data.len();
            let mut sum = S::zero();
            for &v in row {
                let e = (v - max).exp();
                sum = sum + e;
                data.push(e);
            }
            for v in &mut data[start..] {
                *v = *v / sum;
            }
        }
        Ok(self.push(
            Op::SoftmaxRows(x),
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    /// Mean over one axis of a rank-2 tensor: axis 0 collapses rows to a
    /// `[1 x n]` tensor, axis 1 collapses columns to `[m x 1]`.
    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("mean_axis", x)?;
        let value = match axis {
            0 => {
                let mut acc = vec![S::zero(); n];
                for row in self.value(x).data().chunks_exact(n) {
                    for (a, &v) in acc.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                let d = S::of_usize(m);
                Tensor::from_vec(&[1, n], acc.into_iter().map(|v| v / d).collect()).unwrap()
            }
            1 => {
                let d = S::of_usize(n);
                let acc: Vec<S> = self
                    .value(x)
                    .data()
                    .chunks_exact(n)
                    .map(|row| row.iter().copied().sum::<S>() / d)
                    .collect();
                Tensor::from_vec(&[m, 1], acc).unwrap()
            }
            _ => {
                return Err(NumericsError::BadShape {
                    op: "mean_axis",
                    expect: "axis 0 or 1",
                    got: vec![axis],
                })
            }
        };
        Ok(self.push(Op::MeanAxis { x, axis }, value))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum::<S>();
        self.push(Op::SumAll(x), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = S::of_usize(self.value(x).len());
        let s = self.value(x).data().iter().copied().sum::<S>() / n;
        self.push(Op::MeanAll(x), Tensor::scalar(s))
    }

    /// Concatenates rank-2 tensors along the feature axis.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId, NumericsError> {
        let (m, _) = self.rank2("concat_cols", xs[0])?;
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let (r, c) = self.rank2("concat_cols", x)?;
            if r != m {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(xs[0]).shape().to_vec(),
                    right: self.value(x).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for row in 0..m {
            for (&x, &w) in xs.iter().zip(&widths) {
                let src = self.value(x).data();
                data.extend_from_slice(&src[row * w..(row + 1) * w]);
            }
        }
        Ok(self.push(
            Op::ConcatCols(xs.to_vec()),
            Tensor::from_vec(&[m, total], data).unwrap(),
        ))
    }

    /// Concatenates rank-2 tensors along the row axis.
    pub fn concat_rows(&mut self, xs: &[NodeId]) -> Result<NodeId, NumericsError> {
        let (_, n) = self.rank2("concat_rows", xs[0])?;
        let mut total = 0;
        for &x in xs {
            let (r, c) = self.rank2("concat_rows", x)?;
            if c != n {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(xs[0]).shape().to_vec(),
                    right: self.value(x).shape().to_vec(),
                });
            }
            total += r;
        }
        let mut data = Vec::with_capacity(total * n);
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        Ok(self.push(
            Op::ConcatRows(xs.to_vec()),
            Tensor::from_vec(&[total, n], data).unwrap(),
        ))
    }

    pub fn slice_cols(
        &mut self,
        x: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("slice_cols", x)?;
        if start + len > n {
            return Err(NumericsError::BadShape {
                op: "slice_cols",
                expect: "a column range inside the tensor",
                got: vec![start, len, n],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * len);
        for row in 0..m {
            data.extend_from_slice(&src[row * n + start..row * n + start + len]);
        }
        Ok(self.push(
            Op::SliceCols { x, start, len },
            Tensor::from_vec(&[m, len], data).unwrap(),
        ))
    }

    /// Gathers rows by index; repeated indices are allowed and their
    /// gradients accumulate.
    pub fn select_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("select_rows", x)?;
        for &i in index {
            if i >= m {
                return Err(NumericsError::RowOutOfRange { index: i, rows: m });
            }
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * n);
        for &i in index {
            data.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        Ok(self.push(
            Op::SelectRows {
                x,
                index: index.to_vec(),
            },
            Tensor::from_vec(&[index.len(), n], data).unwrap(),
        ))
    }

    /// Per-row Euclidean distance between same-shape `[T x D]` tensors,
    /// producing `[T x 1]`.
    pub fn l2_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.same_shape("l2_distance", a, b)?;
        let (m, n) = self.rank2("l2_distance", a)?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(m);
        for t in 0..m {
            let mut acc = S::zero();
            for j in 0..n {
                let d = av[t * n + j] - bv[t * n + j];
                acc = acc + d * d;
            }
            data.push(acc.sqrt());
        }
        Ok(self.push(
            Op::L2Distance(a, b),
            Tensor::from_vec(&[m, 1], data).unwrap(),
        ))
    }

    /// Scales each row to unit Euclidean norm. Rows with norm under 1e-12
    /// keep that floor as the divisor.
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("l2_normalize_rows", x)?;
        let floor = S::of(NORM_FLOOR);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * n);
        for row in src.chunks_exact(n) {
            let norm = row
                .iter()
                .map(|&v| v * v)
                .sum::<S>()
                .sqrt()
                .max(floor);
            data.extend(row.iter().map(|&v| v / norm));
        }
        Ok(self.push(
            Op::L2NormalizeRows(x),
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    /// Causal-and-anticausal window average over rows: row `t` becomes the
    /// mean of rows `t-radius ..= t+radius` clipped to the tensor, divided by
    /// the actual window size at the edges.
    pub fn window_mean(&mut self, x: NodeId, radius: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("window_mean", x)?;
        let src = self.value(x).data();
        let mut data = vec![S::zero(); m * n];
        for t in 0..m {
            let lo = t.saturating_sub(radius);
            let hi = (t + radius).min(m - 1);
            let div = S::of_usize(hi - lo + 1);
            let out = &mut data[t * n..(t + 1) * n];
            for tau in lo..=hi {
                for (o, &v) in out.iter_mut().zip(&src[tau * n..(tau + 1) * n]) {
                    *o = *o + v;
                }
            }
            for o in out {
                *o = *o / div;
            }
        }
        Ok(self.push(
            Op::WindowMean { x, radius },
            Tensor::from_vec(&[m, n], data).unwrap(),
        ))
    }

    /// Stacks each row with its `radius` neighbors on both sides into one
    /// wide row, replicating edge rows where the window leaves the tensor:
    /// `[T x F]` becomes `[T x (2*radius+1)*F]`.
    pub fn stack_context(&mut self, x: NodeId, radius: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("stack_context", x)?;
        if m == 0 {
            return Err(NumericsError::BadShape {
                op: "stack_context",
                expect: "at least one row",
                got: vec![m, n],
            });
        }
        let src = self.value(x).data();
        let width = 2 * radius + 1;
        let mut data = Vec::with_capacity(m * width * n);
        for t in 0..m {
            for o in 0..width {
                let tau = (t + o).saturating_sub(radius).min(m - 1);
                data.extend_from_slice(&src[tau * n..(tau + 1) * n]);
            }
        }
        Ok(self.push(
            Op::StackContext { x, radius },
            Tensor::from_vec(&[m, width * n], data).unwrap(),
        ))
    }

    /// Repeats each row `factor` times in place, mapping `[T x D]` to
    /// `[factor*T x D]`.
    pub fn repeat_rows(&mut self, x: NodeId, factor: usize) -> Result<NodeId, NumericsError> {
        let (m, n) = self.rank2("repeat_rows", x)?;
        if factor == 0 {
            return Err(NumericsError::BadShape {
                op: "repeat_rows",
                expect: "a positive repeat factor",
                got: vec![factor],
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(m * factor * n);
        for row in src.chunks_exact(n) {
            for _ in 0..factor {
                data.extend_from_slice(row);
            }
        }
        Ok(self.push(
            Op::RepeatRows { x, factor },
            Tensor::from_vec(&[m * factor, n], data).unwrap(),
        ))
    }

    /// Mean binary cross-entropy of posteriors against constant targets,
    /// in natural log. Posteriors are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, probs: NodeId, target: &Tensor<S>) -> Result<NodeId, NumericsError> {
        if self.value(probs).shape() != target.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce",
                left: self.value(probs).shape().to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let floor = S::of(BCE_FLOOR);
        let one = S::one();
        let mut acc = S::zero();
        for (&p, &t) in self.value(probs).data().iter().zip(target.data()) {
            let pc = p.max(floor).min(one - floor);
            acc = acc - (t * pc.ln() + (one - t) * (one - pc).ln());
        }
        let mean = acc / S::of_usize(target.len());
        Ok(self.push(
            Op::Bce {
                probs,
                target: target.clone(),
            },
            Tensor::scalar(mean),
        ))
    }

    /// Gradients of the named parameter leaves, with repeated references to
    /// one name summed together.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor<S>> {
        let mut out: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        for node in &self.nodes {
            if let (Op::Param(name), Some(g)) = (&node.op, &node.grad) {
                match out.get_mut(name) {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g) {
                            *a = *a + b;
                        }
                    }
                    None => {
                        out.insert(
                            name.clone(),
                            Tensor::from_vec(node.value.shape(), g.clone()).unwrap(),
                        );
                    }
                }
            }
        }
        out
    }

    /// Reverse pass from a scalar loss. Clears any previous gradients, then
    /// walks the tape once in reverse id order.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        let li = loss.idx();
        if self.nodes[li].value.len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.nodes[li].value.shape().to_vec(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[li].grad = Some(vec![S::one()]);
        for i in (0..=li).rev() {
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::Matmul(a, b) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let k = left[a.idx()].value.cols();
                    let da = mm_nt(g, m, n, left[b.idx()].value.data(), k);
                    let db = mm_tn(left[a.idx()].value.data(), m, k, g, n);
                    add_to_grad(left, *a, &da);
                    add_to_grad(left, *b, &db);
                }
                Op::MatmulNt(a, b) => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let k = left[a.idx()].value.cols();
                    let da = mm(g, m, n, left[b.idx()].value.data(), k);
                    let db = mm_tn(g, m, n, left[a.idx()].value.data(), k);
                    add_to_grad(left, *a, &da);
                    add_to_grad(left, *b, &db);
                }
                Op::Affine { x, w, b } => {
                    let (m, n) = (node.value.rows(), node.value.cols());
                    let k = left[x.idx()].value.cols();
                    let dx = mm_nt(g, m, n, left[w.idx()].value.data(), k);
                    let dw = mm_tn(left[x.idx()].value.data(), m, k, g, n);
                    let mut db = vec![S::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a = *a + v;
                        }
                    }
                    add_to_grad(left, *x, &dx);
                    add_to_grad(left, *w, &dw);
                    add_to_grad(left, *b, &db);
                }
                Op::Add(a, b) => {
                    add_to_grad(left, *a, g);
                    add_to_grad(left, *b, g);
                }
                Op::Sub(a, b) => {
                    add_to_grad(left, *a, g);
                    let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                    add_to_grad(left, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<S> = g
                        .iter()
                        .zip(left[b.idx()].value.data())
                        .map(|(&gv, &bv)| gv * bv)
                        .collect();
                    let db: Vec<S> = g
                        .iter()
                        .zip(left[a.idx()].value.data())
                        .map(|(&gv, &av)| gv * av)
                        .collect();
                    add_to_grad(left, *a, &da);
                    add_to_grad(left, *b, &db);
                }
                Op::AffineConst { x, mul } => {
                    let m = *mul;
                    let dx: Vec<S> = g.iter().map(|&v| v * m).collect();
                    add_to_grad(left, *x, &dx);
                }
                Op::Recip(x) => {
                    let dx: Vec<S> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| -gv * y * y)
                        .collect();
                    add_to_grad(left, *x, &dx);
                }
                Op::ScaleRows { x, s } => {
                    let n = node.value.cols();
                    let sv = left[s.idx()].value.data();
                    let xv = left[x.idx()].value.data();
                    let mut dx = Vec::with_capacity(g.len());
                    let mut ds = vec![S::zero(); sv.len()];
                    for (t, row) in g.chunks_exact(n).enumerate() {
                        for (j, &gv) in row.iter().enumerate() {
                            dx.push(gv * sv[t]);
                            ds[t] = ds[t] + gv * xv[t * n + j];
                        }
                    }
                    add_to_grad(left, *x, &dx);
                    add_to_grad(left, *s, &ds);
                }
                Op::Sigmoid(x) => {
                    let one = S::one();
                    let dx: Vec<S> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| gv * y * (one - y))
                        .collect();
                    add_to_grad(left, *x, &dx);
                }
                Op::Relu(x) => {
                    let z = S::zero();
                    let dx: Vec<S> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(&gv, &y)| if y > z { gv } else { z })
                        .collect();
                    add_to_grad(left, *x, &dx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let n = node.value.cols();
                    let eps = S::of(LAYER_NORM_EPS);
                    let xv = left[x.idx()].value.data();
                    let gv = left[gamma.idx()].value.data();
                    let nd = S::of_usize(n);
                    let mut dx = Vec::with_capacity(xv.len());
                    let mut dgamma = vec![S::zero(); n];
                    let mut dbeta = vec![S::zero(); n];
                    for (row_x, row_g) in xv.chunks_exact(n).zip(g.chunks_exact(n)) {
                        let (mean, var) = row_moments(row_x);
                        let inv = S::one() / (var + eps).sqrt();
                        let mut q_mean = S::zero();
                        let mut qx_mean = S::zero();
                        for j in 0..n {
                            let xhat = (row_x[j] - mean) * inv;
                            let q = row_g[j] * gv[j];
                            dgamma[j] = dgamma[j] + row_g[j] * xhat;
                            dbeta[j] = dbeta[j] + row_g[j];
                            q_mean = q_mean + q;
                            qx_mean = qx_mean + q * xhat;
                        }
                        q_mean = q_mean / nd;
                        qx_mean = qx_mean / nd;
                        for j in 0..n {
                            let xhat = (row_x[j] - mean) * inv;
                            let q = row_g[j] * gv[j];
                            dx.push(inv * (q - q_mean - xhat * qx_mean));
                        }
                    }
                    add_to_grad(left, *x, &dx);
                    add_to_grad(left, *gamma, &dgamma);
                    add_to_grad(left, *beta, &dbeta);
                }
                Op::SoftmaxRows(x) => {
                    let n = node.value.cols();
                    let mut dx = Vec::with_capacity(g.len());
                    for (row_y, row_g) in node.value.data().chunks_exact(n).zip(g.chunks_exact(n))
                    {
                        let dot: S = row_y
                            .iter()
                            .zip(row_g)
                            .map(|(&y, &gv)| y * gv)
                            .sum();
                        for (&y, &gv) in row_y.iter().zip(row_g) {
                            dx.push(y * (gv - dot));
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::MeanAxis { x, axis } => {
                    let (m, n) = (left[x.idx()].value.rows(), left[x.idx()].value.cols());
                    let mut dx = Vec::with_capacity(m * n);
                    if *axis == 0 {
                        let d = S::of_usize(m);
                        for _ in 0..m {
                            dx.extend(g.iter().map(|&v| v / d));
                        }
                    } else {
                        let d = S::of_usize(n);
                        for t in 0..m {
                            let gv = g[t] / d;
                            dx.extend(std::iter::repeat(gv).take(n));
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::SumAll(x) => {
                    let dx = vec![g[0]; left[x.idx()].value.len()];
                    add_to_grad(left, *x, &dx);
                }
                Op::MeanAll(x) => {
                    let len = left[x.idx()].value.len();
                    let dx = vec![g[0] / S::of_usize(len); len];
                    add_to_grad(left, *x, &dx);
                }
                Op::ConcatCols(xs) => {
                    let m = node.value.rows();
                    let total = node.value.cols();
                    let mut start = 0;
                    for &x in xs {
                        let w = left[x.idx()].value.cols();
                        let mut dx = Vec::with_capacity(m * w);
                        for row in 0..m {
                            dx.extend_from_slice(&g[row * total + start..row * total + start + w]);
                        }
                        add_to_grad(left, x, &dx);
                        start += w;
                    }
                }
                Op::ConcatRows(xs) => {
                    let n = node.value.cols();
                    let mut start = 0;
                    for &x in xs {
                        let r = left[x.idx()].value.rows();
                        add_to_grad(left, x, &g[start * n..(start + r) * n]);
                        start += r;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (m, n) = (left[x.idx()].value.rows(), left[x.idx()].value.cols());
                    let mut dx = vec![S::zero(); m * n];
                    for row in 0..m {
                        for j in 0..*len {
                            dx[row * n + start + j] = g[row * len + j];
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::SelectRows { x, index } => {
                    let (m, n) = (left[x.idx()].value.rows(), left[x.idx()].value.cols());
                    let mut dx = vec![S::zero(); m * n];
                    for (out_row, &src_row) in index.iter().enumerate() {
                        for j in 0..n {
                            dx[src_row * n + j] = dx[src_row * n + j] + g[out_row * n + j];
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::L2Distance(a, b) => {
                    let n = left[a.idx()].value.cols();
                    let av = left[a.idx()].value.data();
                    let bv = left[b.idx()].value.data();
                    let z = S::zero();
                    let mut da = Vec::with_capacity(av.len());
                    for (t, (&gv, &d)) in g.iter().zip(node.value.data()).enumerate() {
                        if d > z {
                            let scale = gv / d;
                            for j in 0..n {
                                da.push(scale * (av[t * n + j] - bv[t * n + j]));
                            }
                        } else {
                            da.extend(std::iter::repeat(z).take(n));
                        }
                    }
                    let db: Vec<S> = da.iter().map(|&v| -v).collect();
                    add_to_grad(left, *a, &da);
                    add_to_grad(left, *b, &db);
                }
                Op::L2NormalizeRows(x) => {
                    let n = node.value.cols();
                    let floor = S::of(NORM_FLOOR);
                    let xv = left[x.idx()].value.data();
                    let mut dx = Vec::with_capacity(xv.len());
                    for ((row_x, row_y), row_g) in xv
                        .chunks_exact(n)
                        .zip(node.value.data().chunks_exact(n))
                        .zip(g.chunks_exact(n))
                    {
                        let norm = row_x
                            .iter()
                            .map(|&v| v * v)
                            .sum::<S>()
                            .sqrt()
                            .max(floor);
                        let dot: S = row_y
                            .iter()
                            .zip(row_g)
                            .map(|(&y, &gv)| y * gv)
                            .sum();
                        for (&y, &gv) in row_y.iter().zip(row_g) {
                            dx.push((gv - y * dot) / norm);
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::WindowMean { x, radius } => {
                    let (m, n) = (left[x.idx()].value.rows(), left[x.idx()].value.cols());
                    let mut dx = vec![S::zero(); m * n];
                    for t in 0..m {
                        let lo = t.saturating_sub(*radius);
                        let hi = (t + radius).min(m - 1);
                        let div = S::of_usize(hi - lo + 1);
                        let row_g = &g[t * n..(t + 1) * n];
                        for tau in lo..=hi {
                            for (o, &gv) in dx[tau * n..(tau + 1) * n].iter_mut().zip(row_g) {
                                *o = *o + gv / div;
                            }
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::StackContext { x, radius } => {
                    let (m, n) = (left[x.idx()].value.rows(), left[x.idx()].value.cols());
                    let width = 2 * radius + 1;
                    let mut dx = vec![S::zero(); m * n];
                    for t in 0..m {
                        for o in 0..width {
                            let tau = (t + o).saturating_sub(*radius).min(m - 1);
                            let src = &g[(t * width + o) * n..(t * width + o + 1) * n];
                            for (d, &gv) in dx[tau * n..(tau + 1) * n].iter_mut().zip(src) {
                                *d = *d + gv;
                            }
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::RepeatRows { x, factor } => {
                    let (m, n) = (left[x.idx()].value.rows(), left[x.idx()].value.cols());
                    let mut dx = vec![S::zero(); m * n];
                    for (i, row_g) in g.chunks_exact(n).enumerate() {
                        let t = i / factor;
                        for (d, &gv) in dx[t * n..(t + 1) * n].iter_mut().zip(row_g) {
                            *d = *d + gv;
                        }
                    }
                    add_to_grad(left, *x, &dx);
                }
                Op::Bce { probs, target } => {
                    let floor = S::of(BCE_FLOOR);
                    let one = S::one();
                    let inv_n = one / S::of_usize(target.len());
                    let dx: Vec<S> = left[probs.idx()]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&p, &t)| {
                            if p <= floor || p >= one - floor {
                                S::zero()
                            } else {
                                g[0] * inv_n * (p - t) / (p * (one - p))
                            }
                        })
                        .collect();
                    add_to_grad(left, *probs, &dx);
                }
            }
        }
        Ok(())
    }
}

fn add_to_grad<S: Scalar>(nodes: &mut [Node<S>], id: NodeId, contrib: &[S]) {
    let node = &mut nodes[id.idx()];
    match &mut node.grad {
        Some(g) => {
            for (a, &b) in g.iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        None => node.grad = Some(contrib.to_vec()),
    }
}

fn row_moments<S: Scalar>(row: &[S]) -> (S, S) {
    let n = S::of_usize(row.len());
    let mean = row.iter().copied().sum::<S>() / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<S>()
        / n;
    (mean, var)
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// `A[m x k] * B[k x n]`, accumulated in i-k-j order for row-major locality.
pub(crate) fn mm<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

/// `A[m x k] * B[n x k]^T`, row-dot-row.
pub(crate) fn mm_nt<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let dot = a_row
                .iter()
                .zip(b_row)
                .map(|(&x, &y)| x * y)
                .sum::<S>();
            c.push(dot);
        }
    }
    c
}

/// `A[m x k]^T * B[m x n]`, accumulated as a sum of outer products.
pub(crate) fn mm_tn<S: Scalar>(a: &[S], m: usize, k: usize, b: &[S], n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == S::zero() {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

//! Minimal reverse-mode automatic differentiation on 64-bit dense arrays,
//! plus the sparse edge-indexed operations the attention stages need.
//!
//! A [`Tape`] records operations in insertion order; [`Tape::backward`]
//! walks them once in reverse, accumulating exact vector-Jacobian products.
//! Edge-indexed arrays ([`EdgeScores`]) are ordinary tensors whose rows are
//! aligned with a graph's directed edge list ([`EdgeTopology`]).

use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("edge score arrays are aligned with different edge lists ({0} vs {1} edges)")]
    MismatchedEdgeLists(usize, usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

pub type AdResult<T> = Result<T, AdError>;

/// Tensor shape, rank 0..=3.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape {
    dims: [usize; 3],
    rank: u8,
}

impl Shape {
    pub fn scalar() -> Self {
        Shape { dims: [1, 1, 1], rank: 0 }
    }

    pub fn vector(n: usize) -> Self {
        Shape { dims: [n, 1, 1], rank: 1 }
    }

    pub fn matrix(rows: usize, cols: usize) -> Self {
        Shape { dims: [rows, cols, 1], rank: 2 }
    }

    pub fn cube(d0: usize, d1: usize, d2: usize) -> Self {
        Shape { dims: [d0, d1, d2], rank: 3 }
    }

    pub fn rank(&self) -> usize {
        self.rank as usize
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims[..self.rank as usize]
    }

    pub fn len(&self) -> usize {
        self.dims[..self.rank as usize].iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1]
    }
}

/// Lightweight handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
    shape: Shape,
    requires_grad: bool,
}

impl Tensor {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Directed edge structure of a drawing graph in compressed (CSR) form:
/// edges are grouped by source vertex, `offsets[i]..offsets[i+1]` indexing
/// the edges leaving vertex `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeTopology {
    pub num_vertices: usize,
    /// Source vertex per directed edge.
    pub src: Vec<usize>,
    /// Target vertex per directed edge.
    pub dst: Vec<usize>,
    /// CSR offsets, length `num_vertices + 1`.
    pub offsets: Vec<usize>,
}

impl EdgeTopology {
    pub fn num_edges(&self) -> usize {
        self.dst.len()
    }

    pub fn out_edges(&self, vertex: usize) -> std::ops::Range<usize> {
        self.offsets[vertex]..self.offsets[vertex + 1]
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.offsets.len() != self.num_vertices + 1 {
            return Err("offsets length must be num_vertices + 1".into());
        }
        if self.offsets[0] != 0 || *self.offsets.last().unwrap() != self.dst.len() {
            return Err("offsets must span the edge list".into());
        }
        if self.src.len() != self.dst.len() {
            return Err("src/dst length mismatch".into());
        }
        for i in 0..self.num_vertices {
            if self.offsets[i] > self.offsets[i + 1] {
                return Err("offsets must be non-decreasing".into());
            }
            for e in self.out_edges(i) {
                if self.src[e] != i {
                    return Err("src must match CSR grouping".into());
                }
            }
        }
        Ok(())
    }
}

/// Edge-indexed score array: one row per directed edge, `heads` channels.
#[derive(Clone, Copy, Debug)]
pub struct EdgeScores {
    pub tensor: Tensor,
    pub num_edges: usize,
    pub heads: usize,
}

impl EdgeScores {
    pub fn wrap(tensor: Tensor) -> Self {
        let s = tensor.shape();
        assert_eq!(s.rank(), 2, "edge scores must be rank 2");
        EdgeScores {
            tensor,
            num_edges: s.rows(),
            heads: s.cols(),
        }
    }
}

enum Op {
    Leaf,
    Matmul(usize, usize),
    Add(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    ConcatLastDim(Vec<usize>),
    GatherRows {
        input: usize,
        indices: Arc<Vec<usize>>,
    },
    SegmentMaxPool {
        edges: usize,
        /// Argmax edge per (vertex, column); -1 where a vertex has no edges.
        argmax: Vec<i64>,
    },
    RowSoftmaxNeighbors {
        scores: usize,
        topo: Arc<EdgeTopology>,
    },
    EdgeDotPerHead {
        a: usize,
        b: usize,
        heads: usize,
    },
    EdgeWeightedSum {
        weights: usize,
        values: usize,
        topo: Arc<EdgeTopology>,
    },
    RowSoftmax(usize),
    NllFromProbs {
        probs: usize,
        labels: Vec<usize>,
    },
    BceWithLogitsWeighted {
        logits: usize,
        targets: Vec<f64>,
        weights: Vec<f64>,
        weight_sum: f64,
    },
    Sum(usize),
    Mean(usize),
}

struct Node {
    op: Op,
    shape: Shape,
    value: Vec<f64>,
    requires_grad: bool,
}

/// Append-only operation record. One tape per forward/backward pass;
/// a tape is confined to a single thread.
pub struct Tape {
    nodes: Vec<Node>,
    checked: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
    }

    /// Disable NaN/Inf screening of op outputs (creation checks remain).
    pub fn set_checked(&mut self, checked: bool) {
        self.checked = checked;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.id].value
    }

    pub fn scalar_value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(t.shape.rank(), 0);
        self.nodes[t.id].value[0]
    }

    fn push(&mut self, op: Op, shape: Shape, value: Vec<f64>, requires_grad: bool) -> AdResult<Tensor> {
        debug_assert_eq!(shape.len(), value.len());
        if self.checked && !value.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite(op_name(&op)));
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            shape,
            value,
            requires_grad,
        });
        Ok(Tensor {
            id,
            shape,
            requires_grad,
        })
    }

    /// Constant input; gradients never flow into it.
    pub fn constant(&mut self, values: Vec<f64>, shape: Shape) -> AdResult<Tensor> {
        if shape.len() != values.len() {
            return Err(AdError::ShapeMismatch(format!(
                "constant: {} values for shape {:?}",
                values.len(),
                shape.dims()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite("constant"));
        }
        self.push(Op::Leaf, shape, values, false)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, values: Vec<f64>, shape: Shape) -> AdResult<Tensor> {
        if shape.len() != values.len() {
            return Err(AdError::ShapeMismatch(format!(
                "param: {} values for shape {:?}",
                values.len(),
                shape.dims()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(AdError::NonFinite("param"));
        }
        self.push(Op::Leaf, shape, values, true)
    }

    pub fn scalar(&mut self, v: f64) -> AdResult<Tensor> {
        self.constant(vec![v], Shape::scalar())
    }

    /// Row-major matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> AdResult<Tensor> {
        if a.shape.rank() != 2 || b.shape.rank() != 2 || a.shape.cols() != b.shape.rows() {
            return Err(AdError::ShapeMismatch(format!(
                "matmul: {:?} x {:?}",
                a.shape.dims(),
                b.shape.dims()
            )));
        }
        let (m, k, n) = (a.shape.rows(), a.shape.cols(), b.shape.cols());
        let value = matmul_raw(self.value(a), self.value(b), m, k, n);
        self.push(
            Op::Matmul(a.id, b.id),
            Shape::matrix(m, n),
            value,
            a.requires_grad || b.requires_grad,
        )
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> AdResult<Tensor> {
        if a.shape != b.shape {
            return Err(AdError::ShapeMismatch(format!(
                "add: {:?} vs {:?}",
                a.shape.dims(),
                b.shape.dims()
            )));
        }
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        self.push(
            Op::Add(a.id, b.id),
            a.shape,
            value,
            a.requires_grad || b.requires_grad,
        )
    }

    /// Add a length-n bias vector to every row of an `[m,n]` matrix.
    pub fn add_bias(&mut self, x: Tensor, bias: Tensor) -> AdResult<Tensor> {
        if x.shape.rank() != 2 || bias.shape.rank() != 1 || bias.shape.rows() != x.shape.cols() {
            return Err(AdError::ShapeMismatch(format!(
                "add_bias: {:?} + {:?}",
                x.shape.dims(),
                bias.shape.dims()
            )));
        }
        let n = x.shape.cols();
        let b = self.value(bias).to_vec();
        let value: Vec<f64> = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        self.push(
            Op::AddBias(x.id, bias.id),
            x.shape,
            value,
            x.requires_grad || bias.requires_grad,
        )
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> AdResult<Tensor> {
        let value: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        self.push(Op::Scale(x.id, c), x.shape, value, x.requires_grad)
    }

    pub fn relu(&mut self, x: Tensor) -> AdResult<Tensor> {
        let value: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu(x.id), x.shape, value, x.requires_grad)
    }

    pub fn sigmoid(&mut self, x: Tensor) -> AdResult<Tensor> {
        let value: Vec<f64> = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        self.push(Op::Sigmoid(x.id), x.shape, value, x.requires_grad)
    }

    /// Concatenate rank-2 tensors with equal row counts along the last dim.
    pub fn concat_lastdim(&mut self, parts: &[Tensor]) -> AdResult<Tensor> {
        if parts.is_empty() {
            return Err(AdError::ShapeMismatch("concat of zero tensors".into()));
        }
        let rows = parts[0].shape.rows();
        let mut cols = 0;
        for p in parts {
            if p.shape.rank() != 2 || p.shape.rows() != rows {
                return Err(AdError::ShapeMismatch(format!(
                    "concat_lastdim: incompatible part {:?}",
                    p.shape.dims()
                )));
            }
            cols += p.shape.cols();
        }
        let mut value = vec![0.0; rows * cols];
        let mut col0 = 0;
        for p in parts {
            let pc = p.shape.cols();
            let pv = self.value(*p);
            for r in 0..rows {
                value[r * cols + col0..r * cols + col0 + pc]
                    .copy_from_slice(&pv[r * pc..(r + 1) * pc]);
            }
            col0 += pc;
        }
        let requires = parts.iter().any(|p| p.requires_grad);
        self.push(
            Op::ConcatLastDim(parts.iter().map(|p| p.id).collect()),
            Shape::matrix(rows, cols),
            value,
            requires,
        )
    }

    /// Select rows of `x` by index; the workhorse behind per-edge views of
    /// per-vertex tensors.
    pub fn gather_rows(&mut self, x: Tensor, indices: Arc<Vec<usize>>) -> AdResult<Tensor> {
        if x.shape.rank() != 2 {
            return Err(AdError::ShapeMismatch(format!(
                "gather_rows: input {:?}",
                x.shape.dims()
            )));
        }
        let n = x.shape.rows();
        let c = x.shape.cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(AdError::ShapeMismatch(format!(
                "gather_rows: index {bad} out of {n} rows"
            )));
        }
        let xv = self.value(x);
        let mut value = vec![0.0; indices.len() * c];
        for (r, &i) in indices.iter().enumerate() {
            value[r * c..(r + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let requires = x.requires_grad;
        self.push(
            Op::GatherRows { input: x.id, indices },
            Shape::matrix(value.len() / c.max(1), c),
            value,
            requires,
        )
    }

    pub fn gather_by_src(&mut self, x: Tensor, topo: &Arc<EdgeTopology>) -> AdResult<Tensor> {
        self.gather_rows(x, Arc::new(topo.src.clone()))
    }

    pub fn gather_by_dst(&mut self, x: Tensor, topo: &Arc<EdgeTopology>) -> AdResult<Tensor> {
        self.gather_rows(x, Arc::new(topo.dst.clone()))
    }

    /// Columnwise max over each vertex's outgoing edge rows; vertices with
    /// no edges pool to zero. Ties route the gradient to the lowest edge
    /// index.
    pub fn segment_max_pool(&mut self, edges: Tensor, topo: &Arc<EdgeTopology>) -> AdResult<Tensor> {
        if edges.shape.rank() != 2 || edges.shape.rows() != topo.num_edges() {
            return Err(AdError::ShapeMismatch(format!(
                "segment_max_pool: {:?} for {} edges",
                edges.shape.dims(),
                topo.num_edges()
            )));
        }
        let c = edges.shape.cols();
        let n = topo.num_vertices;
        let ev = self.value(edges);
        let mut value = vec![0.0; n * c];
        let mut argmax = vec![-1i64; n * c];
        for i in 0..n {
            let range = topo.out_edges(i);
            if range.is_empty() {
                continue;
            }
            for col in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_e = -1i64;
                for e in range.clone() {
                    let v = ev[e * c + col];
                    if v > best {
                        best = v;
                        best_e = e as i64;
                    }
                }
                value[i * c + col] = best;
                argmax[i * c + col] = best_e;
            }
        }
        let requires = edges.requires_grad;
        self.push(
            Op::SegmentMaxPool {
                edges: edges.id,
                argmax,
            },
            Shape::matrix(n, c),
            value,
            requires,
        )
    }

    /// Per-head softmax over each source vertex's outgoing edges. A vertex
    /// with no outgoing edges simply contributes no rows.
    pub fn row_softmax_over_neighbors(
        &mut self,
        scores: EdgeScores,
        topo: &Arc<EdgeTopology>,
    ) -> AdResult<EdgeScores> {
        let t = scores.tensor;
        if t.shape.rows() != topo.num_edges() {
            return Err(AdError::MismatchedEdgeLists(t.shape.rows(), topo.num_edges()));
        }
        let h = t.shape.cols();
        let sv = self.value(t);
        let mut value = vec![0.0; sv.len()];
        for i in 0..topo.num_vertices {
            let range = topo.out_edges(i);
            if range.is_empty() {
                continue;
            }
            for head in 0..h {
                let mut max = f64::NEG_INFINITY;
                for e in range.clone() {
                    max = max.max(sv[e * h + head]);
                }
                let mut denom = 0.0;
                for e in range.clone() {
                    let w = (sv[e * h + head] - max).exp();
                    value[e * h + head] = w;
                    denom += w;
                }
                for e in range.clone() {
                    value[e * h + head] /= denom;
                }
            }
        }
        let requires = t.requires_grad;
        let out = self.push(
            Op::RowSoftmaxNeighbors {
                scores: t.id,
                topo: Arc::clone(topo),
            },
            t.shape,
            value,
            requires,
        )?;
        Ok(EdgeScores::wrap(out))
    }

    /// Rows of `a`, `b` are `[E, heads*d]`; output `[E, heads]` of per-head
    /// dot products.
    pub fn edge_dot_per_head(&mut self, a: Tensor, b: Tensor, heads: usize) -> AdResult<Tensor> {
        if a.shape != b.shape || a.shape.rank() != 2 || a.shape.cols() % heads != 0 {
            return Err(AdError::ShapeMismatch(format!(
                "edge_dot_per_head: {:?} . {:?} with {} heads",
                a.shape.dims(),
                b.shape.dims(),
                heads
            )));
        }
        let e = a.shape.rows();
        let d = a.shape.cols() / heads;
        let av = self.value(a);
        let bv = self.value(b);
        let mut value = vec![0.0; e * heads];
        for r in 0..e {
            for head in 0..heads {
                let base = r * heads * d + head * d;
                let mut acc = 0.0;
                for k in 0..d {
                    acc += av[base + k] * bv[base + k];
                }
                value[r * heads + head] = acc;
            }
        }
        let requires = a.requires_grad || b.requires_grad;
        self.push(
            Op::EdgeDotPerHead { a: a.id, b: b.id, heads },
            Shape::matrix(e, heads),
            value,
            requires,
        )
    }

    /// Per-head weighted sum of per-edge value rows into their source
    /// vertex: `out[src(e), h*d+k] += w[e,h] * values[e, h*d+k]`.
    pub fn edge_weighted_sum(
        &mut self,
        weights: EdgeScores,
        values: Tensor,
        topo: &Arc<EdgeTopology>,
    ) -> AdResult<Tensor> {
        let w = weights.tensor;
        let h = w.shape.cols();
        if values.shape.rank() != 2
            || values.shape.rows() != w.shape.rows()
            || values.shape.cols() % h != 0
        {
            return Err(AdError::ShapeMismatch(format!(
                "edge_weighted_sum: weights {:?}, values {:?}",
                w.shape.dims(),
                values.shape.dims()
            )));
        }
        if w.shape.rows() != topo.num_edges() {
            return Err(AdError::MismatchedEdgeLists(w.shape.rows(), topo.num_edges()));
        }
        let d = values.shape.cols() / h;
        let wv = self.value(w);
        let vv = self.value(values);
        let n = topo.num_vertices;
        let cols = h * d;
        let mut value = vec![0.0; n * cols];
        for i in 0..n {
            for e in topo.out_edges(i) {
                for head in 0..h {
                    let we = wv[e * h + head];
                    let vbase = e * cols + head * d;
                    let obase = i * cols + head * d;
                    for k in 0..d {
                        value[obase + k] += we * vv[vbase + k];
                    }
                }
            }
        }
        let requires = w.requires_grad || values.requires_grad;
        self.push(
            Op::EdgeWeightedSum {
                weights: w.id,
                values: values.id,
                topo: Arc::clone(topo),
            },
            Shape::matrix(n, cols),
            value,
            requires,
        )
    }

    /// Dense row-wise softmax of an `[m,n]` matrix.
    pub fn row_softmax(&mut self, x: Tensor) -> AdResult<Tensor> {
        if x.shape.rank() != 2 {
            return Err(AdError::ShapeMismatch(format!(
                "row_softmax: {:?}",
                x.shape.dims()
            )));
        }
        let (m, n) = (x.shape.rows(), x.shape.cols());
        let xv = self.value(x);
        let mut value = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..n {
                let w = (row[c] - max).exp();
                value[r * n + c] = w;
                denom += w;
            }
            for c in 0..n {
                value[r * n + c] /= denom;
            }
        }
        let requires = x.requires_grad;
        self.push(Op::RowSoftmax(x.id), x.shape, value, requires)
    }

    /// Mean over rows of `-ln p[r, labels[r]]` on a row-stochastic matrix.
    pub fn nll_from_probs(&mut self, probs: Tensor, labels: &[usize]) -> AdResult<Tensor> {
        if probs.shape.rank() != 2 || probs.shape.rows() != labels.len() {
            return Err(AdError::ShapeMismatch(format!(
                "nll_from_probs: {:?} with {} labels",
                probs.shape.dims(),
                labels.len()
            )));
        }
        let n = probs.shape.cols();
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(AdError::LabelOutOfRange { label: bad, classes: n });
        }
        let pv = self.value(probs);
        let m = labels.len();
        let mut acc = 0.0;
        for (r, &l) in labels.iter().enumerate() {
            acc -= pv[r * n + l].ln();
        }
        let value = if m == 0 { 0.0 } else { acc / m as f64 };
        let requires = probs.requires_grad;
        self.push(
            Op::NllFromProbs {
                probs: probs.id,
                labels: labels.to_vec(),
            },
            Shape::scalar(),
            vec![value],
            requires,
        )
    }

    /// Weighted binary cross-entropy computed from logits:
    /// `sum_e w_e * bce(sigmoid(x_e), t_e) / sum_e w_e` (0 when all weights
    /// are 0). The fused form stays finite for saturated logits.
    pub fn bce_with_logits_weighted(
        &mut self,
        logits: Tensor,
        targets: Vec<f64>,
        weights: Vec<f64>,
    ) -> AdResult<Tensor> {
        let len = logits.shape.len();
        if targets.len() != len || weights.len() != len {
            return Err(AdError::ShapeMismatch(format!(
                "bce_with_logits_weighted: {len} logits, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let xv = self.value(logits);
        let weight_sum: f64 = weights.iter().sum();
        let mut acc = 0.0;
        if weight_sum > 0.0 {
            for i in 0..len {
                if weights[i] == 0.0 {
                    continue;
                }
                let x = xv[i];
                // max(x,0) - x*t + ln(1 + exp(-|x|))
                let bce = x.max(0.0) - x * targets[i] + (-x.abs()).exp().ln_1p();
                acc += weights[i] * bce;
            }
            acc /= weight_sum;
        }
        let requires = logits.requires_grad;
        self.push(
            Op::BceWithLogitsWeighted {
                logits: logits.id,
                targets,
                weights,
                weight_sum,
            },
            Shape::scalar(),
            vec![acc],
            requires,
        )
    }

    pub fn sum(&mut self, x: Tensor) -> AdResult<Tensor> {
        let value = self.value(x).iter().sum();
        let requires = x.requires_grad;
        self.push(Op::Sum(x.id), Shape::scalar(), vec![value], requires)
    }

    pub fn mean(&mut self, x: Tensor) -> AdResult<Tensor> {
        let len = x.shape.len();
        let value = if len == 0 {
            0.0
        } else {
            self.value(x).iter().sum::<f64>() / len as f64
        };
        let requires = x.requires_grad;
        self.push(Op::Mean(x.id), Shape::scalar(), vec![value], requires)
    }

    /// Sum two edge score arrays aligned with the same edge list.
    pub fn add_scores(&mut self, a: &EdgeScores, b: &EdgeScores) -> AdResult<EdgeScores> {
        if a.num_edges != b.num_edges || a.heads != b.heads {
            return Err(AdError::MismatchedEdgeLists(a.num_edges, b.num_edges));
        }
        Ok(EdgeScores::wrap(self.add(a.tensor, b.tensor)?))
    }

    /// Reverse sweep from a scalar loss; returns gradients for every node
    /// on a path from a differentiable leaf to the loss.
    pub fn backward(&self, loss: Tensor) -> AdResult<Gradients> {
        if loss.shape.rank() != 0 {
            return Err(AdError::NonScalarLoss(loss.shape.dims().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].clone().unwrap();
            self.accumulate_parents(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut Vec<Option<Vec<f64>>>,
        id: usize,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].requires_grad {
            return None;
        }
        let len = self.nodes[id].shape.len();
        Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate_parents(&self, id: usize, g: &[f64], grads: &mut Vec<Option<Vec<f64>>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (a, b) = (*a, *b);
                let m = self.nodes[a].shape.rows();
                let k = self.nodes[a].shape.cols();
                let n = self.nodes[b].shape.cols();
                if self.nodes[a].requires_grad {
                    // dA = G * B^T
                    let bv = &self.nodes[b].value;
                    let da = self.grad_slot(grads, a).unwrap();
                    for i in 0..m {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            if gij == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                da[i * k + kk] += gij * bv[kk * n + j];
                            }
                        }
                    }
                }
                if self.nodes[b].requires_grad {
                    // dB = A^T * G
                    let av = self.nodes[a].value.clone();
                    let db = self.grad_slot(grads, b).unwrap();
                    for i in 0..m {
                        for kk in 0..k {
                            let aik = av[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[kk * n + j] += aik * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for &p in &[*a, *b] {
                    if let Some(dp) = self.grad_slot(grads, p) {
                        for (d, gv) in dp.iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::AddBias(x, bias) => {
                let n = self.nodes[*x].shape.cols();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.grad_slot(grads, *bias) {
                    for (i, gv) in g.iter().enumerate() {
                        db[i % n] += gv;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::Relu(x) => {
                let xv = self.nodes[*x].value.clone();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = self.nodes[id].value.clone();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for i in 0..g.len() {
                        dx[i] += g[i] * yv[i] * (1.0 - yv[i]);
                    }
                }
            }
            Op::ConcatLastDim(parts) => {
                let rows = self.nodes[id].shape.rows();
                let cols = self.nodes[id].shape.cols();
                let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].shape.cols()).collect();
                let mut col0 = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let pc = widths[pi];
                    if let Some(dp) = self.grad_slot(grads, p) {
                        for r in 0..rows {
                            for c in 0..pc {
                                dp[r * pc + c] += g[r * cols + col0 + c];
                            }
                        }
                    }
                    col0 += pc;
                }
            }
            Op::GatherRows { input, indices } => {
                let c = self.nodes[id].shape.cols();
                let idx = Arc::clone(indices);
                if let Some(dx) = self.grad_slot(grads, *input) {
                    for (r, &i) in idx.iter().enumerate() {
                        for k in 0..c {
                            dx[i * c + k] += g[r * c + k];
                        }
                    }
                }
            }
            Op::SegmentMaxPool { edges, argmax } => {
                let c = self.nodes[id].shape.cols();
                let am = argmax.clone();
                if let Some(de) = self.grad_slot(grads, *edges) {
                    for (slot, &e) in am.iter().enumerate() {
                        if e >= 0 {
                            de[(e as usize) * c + slot % c] += g[slot];
                        }
                    }
                }
            }
            Op::RowSoftmaxNeighbors { scores, topo } => {
                let h = self.nodes[id].shape.cols();
                let yv = self.nodes[id].value.clone();
                let topo = Arc::clone(topo);
                if let Some(ds) = self.grad_slot(grads, *scores) {
                    for i in 0..topo.num_vertices {
                        let range = topo.out_edges(i);
                        for head in 0..h {
                            let mut dot = 0.0;
                            for e in range.clone() {
                                dot += yv[e * h + head] * g[e * h + head];
                            }
                            for e in range.clone() {
                                ds[e * h + head] += yv[e * h + head] * (g[e * h + head] - dot);
                            }
                        }
                    }
                }
            }
            Op::EdgeDotPerHead { a, b, heads } => {
                let heads = *heads;
                let e = self.nodes[id].shape.rows();
                let d = self.nodes[*a].shape.cols() / heads;
                if self.nodes[*a].requires_grad {
                    let bv = self.nodes[*b].value.clone();
                    let da = self.grad_slot(grads, *a).unwrap();
                    for r in 0..e {
                        for head in 0..heads {
                            let ge = g[r * heads + head];
                            if ge == 0.0 {
                                continue;
                            }
                            let base = r * heads * d + head * d;
                            for k in 0..d {
                                da[base + k] += ge * bv[base + k];
                            }
                        }
                    }
                }
                if self.nodes[*b].requires_grad {
                    let av = self.nodes[*a].value.clone();
                    let db = self.grad_slot(grads, *b).unwrap();
                    for r in 0..e {
                        for head in 0..heads {
                            let ge = g[r * heads + head];
                            if ge == 0.0 {
                                continue;
                            }
                            let base = r * heads * d + head * d;
                            for k in 0..d {
                                db[base + k] += ge * av[base + k];
                            }
                        }
                    }
                }
            }
            Op::EdgeWeightedSum { weights, values, topo } => {
                let h = self.nodes[*weights].shape.cols();
                let cols = self.nodes[*values].shape.cols();
                let d = cols / h;
                let topo = Arc::clone(topo);
                if self.nodes[*weights].requires_grad {
                    let vv = self.nodes[*values].value.clone();
                    let dw = self.grad_slot(grads, *weights).unwrap();
                    for i in 0..topo.num_vertices {
                        for e in topo.out_edges(i) {
                            for head in 0..h {
                                let mut acc = 0.0;
                                let vbase = e * cols + head * d;
                                let gbase = i * cols + head * d;
                                for k in 0..d {
                                    acc += g[gbase + k] * vv[vbase + k];
                                }
                                dw[e * h + head] += acc;
                            }
                        }
                    }
                }
                if self.nodes[*values].requires_grad {
                    let wv = self.nodes[*weights].value.clone();
                    let dv = self.grad_slot(grads, *values).unwrap();
                    for i in 0..topo.num_vertices {
                        for e in topo.out_edges(i) {
                            for head in 0..h {
                                let we = wv[e * h + head];
                                let vbase = e * cols + head * d;
                                let gbase = i * cols + head * d;
                                for k in 0..d {
                                    dv[vbase + k] += we * g[gbase + k];
                                }
                            }
                        }
                    }
                }
            }
            Op::RowSoftmax(x) => {
                let (m, n) = (self.nodes[id].shape.rows(), self.nodes[id].shape.cols());
                let yv = self.nodes[id].value.clone();
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for r in 0..m {
                        let mut dot = 0.0;
                        for c in 0..n {
                            dot += yv[r * n + c] * g[r * n + c];
                        }
                        for c in 0..n {
                            dx[r * n + c] += yv[r * n + c] * (g[r * n + c] - dot);
                        }
                    }
                }
            }
            Op::NllFromProbs { probs, labels } => {
                let n = self.nodes[*probs].shape.cols();
                let m = labels.len().max(1) as f64;
                let pv = self.nodes[*probs].value.clone();
                let labels = labels.clone();
                if let Some(dp) = self.grad_slot(grads, *probs) {
                    for (r, &l) in labels.iter().enumerate() {
                        dp[r * n + l] += -g[0] / (m * pv[r * n + l]);
                    }
                }
            }
            Op::BceWithLogitsWeighted {
                logits,
                targets,
                weights,
                weight_sum,
            } => {
                if *weight_sum > 0.0 {
                    let xv = self.nodes[*logits].value.clone();
                    let targets = targets.clone();
                    let weights = weights.clone();
                    let ws = *weight_sum;
                    if let Some(dx) = self.grad_slot(grads, *logits) {
                        for i in 0..xv.len() {
                            if weights[i] == 0.0 {
                                continue;
                            }
                            dx[i] += g[0] * weights[i] * (sigmoid(xv[i]) - targets[i]) / ws;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let len = self.nodes[*x].shape.len().max(1) as f64;
                if let Some(dx) = self.grad_slot(grads, *x) {
                    for d in dx.iter_mut() {
                        *d += g[0] / len;
                    }
                }
            }
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Matmul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::ConcatLastDim(..) => "concat_lastdim",
        Op::GatherRows { .. } => "gather_rows",
        Op::SegmentMaxPool { .. } => "segment_max_pool",
        Op::RowSoftmaxNeighbors { .. } => "row_softmax_over_neighbors",
        Op::EdgeDotPerHead { .. } => "edge_dot_per_head",
        Op::EdgeWeightedSum { .. } => "edge_weighted_sum",
        Op::RowSoftmax(..) => "row_softmax",
        Op::NllFromProbs { .. } => "nll_from_probs",
        Op::BceWithLogitsWeighted { .. } => "bce_with_logits_weighted",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
    out
}

/// Gradients from one backward sweep, indexed by tensor handle.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, t: Tensor) -> Option<&[f64]> {
        self.grads.get(t.id).and_then(|g| g.as_deref())
    }
}

/// One parameter's worst finite-difference disagreement.
#[derive(Clone, Debug)]
pub struct FdParamEntry {
    pub name: String,
    pub max_rel_error: f64,
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub per_param: Vec<FdParamEntry>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

impl std::fmt::Display for FdReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "max relative error {:.3e} (tolerance {:.1e}) at {}[{}]: {}",
            self.max_rel_error,
            self.tolerance,
            self.worst_param,
            self.worst_index,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Compare analytic gradients against central finite differences of a
/// deterministic scalar function of the parameter arrays.
///
/// Relative error per coordinate is
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn finite_difference_check<F>(
    mut eval: F,
    params: &mut [Vec<f64>],
    names: &[String],
    ad_grads: &[Vec<f64>],
    h: f64,
    rel_tol: f64,
) -> FdReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    assert_eq!(params.len(), ad_grads.len());
    assert_eq!(params.len(), names.len());
    let mut max_rel = 0.0;
    let mut worst_param = String::new();
    let mut worst_index = 0;
    let mut per_param = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut param_max = 0.0f64;
        for i in 0..params[p].len() {
            let orig = params[p][i];
            params[p][i] = orig + h;
            let f_plus = eval(params);
            params[p][i] = orig - h;
            let f_minus = eval(params);
            params[p][i] = orig;
            let g_fd = (f_plus - f_minus) / (2.0 * h);
            let g_ad = ad_grads[p][i];
            let rel = (g_ad - g_fd).abs() / (1e-8f64).max(g_ad.abs() + g_fd.abs());
            if rel > param_max {
                param_max = rel;
            }
            if rel > max_rel {
                max_rel = rel;
                worst_param = names[p].clone();
                worst_index = i;
            }
        }
        per_param.push(FdParamEntry {
            name: names[p].clone(),
            max_rel_error: param_max,
        });
    }
    FdReport {
        max_rel_error: max_rel,
        worst_param,
        worst_index,
        per_param,
        tolerance: rel_tol,
    }
}

//! Define-by-run reverse-mode differentiation over a closed set of primitives.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each node keeps its output
//! value, and the values of its parents together with the per-op metadata
//! (argmax rows, nearest-neighbour pairs, batch statistics) are all the
//! backward rules need.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Tensor};

/// Index of a node on a [`Tape`]. Ids are handed out in topological order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive id plus the data its backward rule needs.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `[r,c] + [c]`, the bias of a linear layer.
    AddRowBias(NodeId, NodeId),
    /// `[r,c] * [c]`, a per-column gain.
    ScaleColumns(NodeId, NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// `|x|^e` with subgradient `e·sign(x)·|x|^(e-1)`, zero at `x == 0`.
    PowAbs(NodeId, f64),
    Sum(NodeId),
    /// `[r,c] -> [r]`.
    RowSum(NodeId),
    /// `[r,c] / [r]`, each row divided by its own scalar.
    DivRows(NodeId, NodeId),
    /// Column-wise max over consecutive groups of rows; `argmax[g*d + j]` is
    /// the winning input row for group `g`, column `j`.
    MaxPool { input: NodeId, argmax: Vec<usize> },
    SliceRows { input: NodeId, start: usize },
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    /// `out[b*m + j] = grid[j] + emb[b]`.
    TileAdd { grid: NodeId, emb: NodeId },
    /// Row-wise l2 normalization with the closed-form backward
    /// `(g - f̂⟨g, f̂⟩) / ‖f‖`.
    NormalizeL2 { input: NodeId, norms: Vec<f64> },
    /// Training-mode batch normalization over rows.
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Mean softmax cross-entropy over the rows of a `[b,c]` logit matrix.
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    /// Mean Chamfer distance over paired groups of points.
    Chamfer {
        a: NodeId,
        b: NodeId,
        groups: usize,
        /// For every row of `a`, the index of its nearest row of `b`.
        nn_ab: Vec<usize>,
        nn_ba: Vec<usize>,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRowBias(..) => "add_row_bias",
            Op::ScaleColumns(..) => "scale_columns",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::PowAbs(..) => "pow_abs",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::DivRows(..) => "div_rows",
            Op::MaxPool { .. } => "max_over_points",
            Op::SliceRows { .. } => "slice_rows",
            Op::Reshape(_) => "reshape",
            Op::ConcatRows(_) => "concat_rows",
            Op::TileAdd { .. } => "tile_add",
            Op::NormalizeL2 { .. } => "normalize_l2",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Chamfer { .. } => "chamfer",
        }
    }

    pub fn parents(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowBias(a, b)
            | Op::ScaleColumns(a, b)
            | Op::DivRows(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::PowAbs(a, _)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::Reshape(a) => vec![*a],
            Op::MaxPool { input, .. }
            | Op::SliceRows { input, .. }
            | Op::NormalizeL2 { input, .. } => vec![*input],
            Op::ConcatRows(parts) => parts.clone(),
            Op::TileAdd { grid, emb } => vec![*grid, *emb],
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
            Op::Chamfer { a, b, .. } => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
pub struct TapeNode {
    pub op: Op,
    pub value: Tensor,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Accumulated `∂L/∂node` for every node reachable backwards from the loss.
#[derive(Debug)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

/// Output of a batch-norm node, with the batch statistics needed to update
/// running averages.
#[derive(Debug)]
pub struct BatchNormOut {
    pub node: NodeId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::Domain(format!("{op} expects a rank-2 tensor, got {s:?}"))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &TapeNode {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(TapeNode { op: Op::Leaf, value });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId> {
        if let Some(v) = value.data().iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} produced {v}", op.name())));
        }
        self.nodes.push(TapeNode { op, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(Op::MatMul(a, b), out)
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (x, y) = (self.value(a), self.value(b));
        check_same(op.name(), x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push(op, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| c * v);
        self.push(Op::Scale(a, c), out)
    }

    pub fn add_row_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, c) = rank2("add_row_bias", xv)?;
        if bv.shape() != [c] {
            return Err(Error::shape("add_row_bias", xv.shape(), bv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(Op::AddRowBias(x, bias), out)
    }

    pub fn scale_columns(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (xv, gv) = (self.value(x), self.value(gain));
        let (_, c) = rank2("scale_columns", xv)?;
        if gv.shape() != [c] {
            return Err(Error::shape("scale_columns", xv.shape(), gv.shape()));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (v, s) in row.iter_mut().zip(gv.data()) {
                *v *= s;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(Op::ScaleColumns(x, gain), out)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), out)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn pow_abs(&mut self, a: NodeId, e: f64) -> Result<NodeId> {
        let out = self.value(a).map(|v| v.abs().powf(e));
        self.push(Op::PowAbs(a, e), out)
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let (r, _) = rank2("row_sum", v)?;
        let data = v.iter_rows().map(|row| row.iter().sum()).collect();
        self.push(Op::RowSum(a), Tensor::from_parts(vec![r], data))
    }

    pub fn div_rows(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let (xv, sv) = (self.value(x), self.value(s));
        let (r, c) = rank2("div_rows", xv)?;
        if sv.shape() != [r] {
            return Err(Error::shape("div_rows", xv.shape(), sv.shape()));
        }
        let mut data = xv.data().to_vec();
        for (row, &d) in data.chunks_exact_mut(c).zip(sv.data()) {
            for v in row {
                *v /= d;
            }
        }
        let out = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(Op::DivRows(x, s), out)
    }

    /// Column-wise maximum over all rows of `[n,d]`, giving `[d]`. Ties go to
    /// the lowest row index.
    pub fn max_over_points(&mut self, x: NodeId) -> Result<NodeId> {
        let id = self.max_pool_groups(x, 1)?;
        let d = self.value(id).cols();
        // Drop the leading group axis without a separate reshape node.
        let node = &mut self.nodes[id.0];
        node.value = node.value.reshape(&[d])?;
        Ok(id)
    }

    /// Column-wise maximum within each of `groups` equal consecutive row
    /// blocks of `[groups*n, d]`, giving `[groups, d]`.
    pub fn max_pool_groups(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let (rows, d) = rank2("max_over_points", xv)?;
        if groups == 0 || rows % groups != 0 {
            return Err(Error::Domain(format!(
                "cannot split {rows} points into {groups} equal groups"
            )));
        }
        let n = rows / groups;
        let mut out = vec![f64::NEG_INFINITY; groups * d];
        let mut argmax = vec![0usize; groups * d];
        for g in 0..groups {
            let best = &mut out[g * d..(g + 1) * d];
            let arg = &mut argmax[g * d..(g + 1) * d];
            for i in g * n..(g + 1) * n {
                for ((b, a), &v) in best.iter_mut().zip(arg.iter_mut()).zip(xv.row(i)) {
                    if v > *b {
                        *b = v;
                        *a = i;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![groups, d], out);
        self.push(Op::MaxPool { input: x, argmax }, out)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let out = self.value(x).slice_rows(start, end)?;
        self.push(Op::SliceRows { input: x, start }, out)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).reshape(shape)?;
        self.push(Op::Reshape(x), out)
    }

    /// Stacks rank-2 blocks (or rank-1 rows) with a common row length.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Domain("concat_rows needs at least one input".into()))?;
        let c = self.value(*first).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.rank() > 2 || v.cols() != c {
                return Err(Error::shape("concat_rows", self.shape(*first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_parts(vec![rows, c], data))
    }

    /// Adds every row of `emb: [b,h]` to every row of `grid: [m,h]`, giving
    /// `[b*m, h]` ordered embedding-major.
    pub fn tile_add(&mut self, grid: NodeId, emb: NodeId) -> Result<NodeId> {
        let (gv, ev) = (self.value(grid), self.value(emb));
        let (m, h) = rank2("tile_add", gv)?;
        let (b, he) = rank2("tile_add", ev)?;
        if h != he {
            return Err(Error::shape("tile_add", gv.shape(), ev.shape()));
        }
        let mut data = Vec::with_capacity(b * m * h);
        for e in ev.iter_rows() {
            for g in gv.iter_rows() {
                data.extend(g.iter().zip(e).map(|(x, y)| x + y));
            }
        }
        self.push(Op::TileAdd { grid, emb }, Tensor::from_parts(vec![b * m, h], data))
    }

    /// Row-wise l2 normalization. Rows with norm at or below `eps_guard` are
    /// rejected.
    pub fn normalize_l2(&mut self, x: NodeId, eps_guard: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let (_, c) = rank2("normalize_l2", xv)?;
        let mut norms = Vec::with_capacity(xv.rows());
        let mut data = Vec::with_capacity(xv.numel());
        for (i, row) in xv.iter_rows().enumerate() {
            let n = kernels::dot(row, row).sqrt();
            if n <= eps_guard || !n.is_finite() {
                return Err(Error::DegenerateEmbedding { row: i, norm: n });
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::from_parts(vec![xv.rows(), c], data);
        self.push(Op::NormalizeL2 { input: x, norms }, out)
    }

    /// Training-mode batch normalization: each column is standardized with the
    /// batch mean and biased variance, then scaled by `gamma` and shifted by
    /// `beta`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<BatchNormOut> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let (r, c) = rank2("batch_norm", xv)?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape("batch_norm", xv.shape(), gv.shape()));
        }
        let mut mean = vec![0.0; c];
        for row in xv.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for row in xv.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= r as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
        let mut data = Vec::with_capacity(r * c);
        for row in xv.iter_rows() {
            for j in 0..c {
                let xhat = (row[j] - mean[j]) * inv_std[j];
                data.push(gv.data()[j] * xhat + bv.data()[j]);
            }
        }
        let node = self.push(
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
            },
            Tensor::from_parts(vec![r, c], data),
        )?;
        Ok(BatchNormOut { node, mean, var })
    }

    /// Mean softmax cross-entropy of `[b,c]` (or `[c]`) logits against class ids,
    /// in the max-shifted stable form.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let c = lv.cols();
        let b = lv.rows();
        if lv.rank() > 2 || labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", lv.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Domain(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(b * c);
        let mut total = 0.0;
        for (row, &label) in lv.iter_rows().zip(labels) {
            let (lse, p) = crate::losses::log_softmax_parts(row);
            total += lse - row[label];
            probs.extend(p);
        }
        let out = Tensor::scalar(total / b as f64);
        self.push(
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            out,
        )
    }

    /// Mean over `groups` of the Chamfer distance between consecutive equal
    /// row blocks of `a` and `b`.
    pub fn chamfer(&mut self, a: NodeId, b: NodeId, groups: usize) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (ra, ca) = rank2("chamfer", av)?;
        let (rb, cb) = rank2("chamfer", bv)?;
        if ca != cb || groups == 0 || ra % groups != 0 || rb % groups != 0 {
            return Err(Error::shape("chamfer", av.shape(), bv.shape()));
        }
        let (n, m) = (ra / groups, rb / groups);
        let mut nn_ab = Vec::with_capacity(ra);
        let mut nn_ba = Vec::with_capacity(rb);
        let mut total = 0.0;
        for g in 0..groups {
            let ga = &av.data()[g * n * ca..(g + 1) * n * ca];
            let gb = &bv.data()[g * m * ca..(g + 1) * m * ca];
            let pairs = crate::losses::nearest_pairs(ga, gb, ca);
            total += pairs.value;
            nn_ab.extend(pairs.a_to_b.iter().map(|j| j + g * m));
            nn_ba.extend(pairs.b_to_a.iter().map(|i| i + g * n));
        }
        let out = Tensor::scalar(total / groups as f64);
        self.push(Op::Chamfer { a, b, groups, nn_ab, nn_ba }, out)
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, node {} has shape {:?}",
                loss.0,
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn backward_node(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let da = kernels::matmul_nt(gd, bv.data(), m, n, k);
                let db = kernels::matmul_tn(av.data(), gd, m, k, n);
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip(g, bv, |x, y| x * y));
                accumulate(grads, *b, zip(g, av, |x, y| x * y));
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| c * v)),
            Op::AddRowBias(x, b) => {
                accumulate(grads, *x, g.clone());
                accumulate(grads, *b, column_sums(g));
            }
            Op::ScaleColumns(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols();
                let mut dx = gd.to_vec();
                for row in dx.chunks_exact_mut(c) {
                    for (v, s) in row.iter_mut().zip(sv.data()) {
                        *v *= s;
                    }
                }
                let ds = column_sums(&zip(g, xv, |x, y| x * y));
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                accumulate(grads, *s, ds);
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, zip(g, av, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Exp(a) => accumulate(grads, *a, zip(g, out, |x, y| x * y)),
            Op::PowAbs(a, e) => {
                let av = self.value(*a);
                let e = *e;
                accumulate(
                    grads,
                    *a,
                    zip(g, av, |gv, x| {
                        if x == 0.0 {
                            0.0
                        } else {
                            gv * e * x.signum() * x.abs().powf(e - 1.0)
                        }
                    }),
                );
            }
            Op::Sum(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, Tensor::full(av.shape(), g.item()));
            }
            Op::RowSum(a) => {
                let av = self.value(*a);
                let c = av.cols();
                let data = gd.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), data));
            }
            Op::DivRows(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let c = xv.cols();
                let mut dx = Vec::with_capacity(xv.numel());
                let mut ds = Vec::with_capacity(sv.numel());
                for ((grow, xrow), &d) in gd.chunks_exact(c).zip(xv.iter_rows()).zip(sv.data()) {
                    dx.extend(grow.iter().map(|v| v / d));
                    ds.push(-kernels::dot(grow, xrow) / (d * d));
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                accumulate(grads, *s, Tensor::from_parts(sv.shape().to_vec(), ds));
            }
            Op::MaxPool { input, argmax } => {
                let xv = self.value(*input);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                for (k, (&row, &gv)) in argmax.iter().zip(gd).enumerate() {
                    dx[row * d + k % d] += gv;
                }
                accumulate(grads, *input, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::SliceRows { input, start } => {
                let xv = self.value(*input);
                let c = xv.cols();
                let mut dx = vec![0.0; xv.numel()];
                dx[start * c..start * c + gd.len()].copy_from_slice(gd);
                accumulate(grads, *input, Tensor::from_parts(xv.shape().to_vec(), dx));
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, Tensor::from_parts(shape, gd.to_vec()));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    let piece = Tensor::from_parts(pv.shape().to_vec(), gd[offset..offset + n].to_vec());
                    accumulate(grads, p, piece);
                    offset += n;
                }
            }
            Op::TileAdd { grid, emb } => {
                let (gv, ev) = (self.value(*grid), self.value(*emb));
                let (m, h) = (gv.rows(), gv.cols());
                let mut dgrid = vec![0.0; m * h];
                let mut demb = vec![0.0; ev.numel()];
                for (bi, block) in gd.chunks_exact(m * h).enumerate() {
                    let de = &mut demb[bi * h..(bi + 1) * h];
                    for (j, row) in block.chunks_exact(h).enumerate() {
                        for k in 0..h {
                            dgrid[j * h + k] += row[k];
                            de[k] += row[k];
                        }
                    }
                }
                accumulate(grads, *grid, Tensor::from_parts(gv.shape().to_vec(), dgrid));
                accumulate(grads, *emb, Tensor::from_parts(ev.shape().to_vec(), demb));
            }
            Op::NormalizeL2 { input, norms } => {
                let c = out.cols();
                let mut dx = Vec::with_capacity(out.numel());
                for ((grow, frow), &n) in gd.chunks_exact(c).zip(out.iter_rows()).zip(norms) {
                    dx.extend_from_slice(&crate::hypersphere::tangent_gradient(frow, grow, n));
                }
                accumulate(grads, *input, Tensor::from_parts(out.shape().to_vec(), dx));
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std } => {
                let xv = self.value(*input);
                let gamma_v = self.value(*gamma).data();
                let (r, c) = (xv.rows(), xv.cols());
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_gxhat = vec![0.0; c];
                for (grow, xrow) in gd.chunks_exact(c).zip(xv.iter_rows()) {
                    for j in 0..c {
                        let xhat = (xrow[j] - mean[j]) * inv_std[j];
                        dgamma[j] += grow[j] * xhat;
                        dbeta[j] += grow[j];
                        sum_gxhat[j] += grow[j] * xhat;
                    }
                }
                let mut dx = Vec::with_capacity(r * c);
                for (grow, xrow) in gd.chunks_exact(c).zip(xv.iter_rows()) {
                    for j in 0..c {
                        let xhat = (xrow[j] - mean[j]) * inv_std[j];
                        let rn = r as f64;
                        dx.push(
                            gamma_v[j] * inv_std[j] / rn
                                * (rn * grow[j] - dbeta[j] - xhat * sum_gxhat[j]),
                        );
                    }
                }
                accumulate(grads, *input, Tensor::from_parts(vec![r, c], dx));
                accumulate(grads, *gamma, Tensor::from_parts(vec![c], dgamma));
                accumulate(grads, *beta, Tensor::from_parts(vec![c], dbeta));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                accumulate(grads, *logits, Tensor::from_parts(lv.shape().to_vec(), d));
            }
            Op::Chamfer { a, b, nn_ab, nn_ba, .. } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = av.cols();
                // Each group's terms are means over its own rows, and the groups
                // are averaged, so every row carries weight 1 / total rows.
                let wa = 2.0 * g.item() / av.rows() as f64;
                let wb = 2.0 * g.item() / bv.rows() as f64;
                let mut da = vec![0.0; av.numel()];
                let mut db = vec![0.0; bv.numel()];
                for (i, &j) in nn_ab.iter().enumerate() {
                    for k in 0..c {
                        let diff = av.data()[i * c + k] - bv.data()[j * c + k];
                        da[i * c + k] += wa * diff;
                        db[j * c + k] -= wa * diff;
                    }
                }
                for (j, &i) in nn_ba.iter().enumerate() {
                    for k in 0..c {
                        let diff = bv.data()[j * c + k] - av.data()[i * c + k];
                        db[j * c + k] += wb * diff;
                        da[i * c + k] -= wb * diff;
                    }
                }
                accumulate(grads, *a, Tensor::from_parts(av.shape().to_vec(), da));
                accumulate(grads, *b, Tensor::from_parts(bv.shape().to_vec(), db));
            }
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(b.shape().to_vec(), data)
}

fn column_sums(g: &Tensor) -> Tensor {
    let c = g.cols();
    let mut s = vec![0.0; c];
    for row in g.iter_rows() {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    Tensor::from_parts(vec![c], s)
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

//! The computation tape.
//!
//! Nodes are appended in evaluation order, so every input of node `i` has
//! an index below `i` and the reverse sweep in [`Graph::backward`] needs no
//! sorting. Nodes whose inputs are all constants are recorded as constants
//! and cost nothing during the sweep.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::error::{contract, AutodiffError, Result};
use crate::kernels::{self, gemm};
use crate::mask::AttentionMask;
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Transpose(usize),
    Add(usize, usize),
    AddRow { a: usize, bias: usize },
    Mul(usize, usize),
    Scale(usize, f64),
    Sum(usize),
    MeanRows(usize),
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows { table: usize, ids: Vec<usize> },
    MaskedSoftmax { a: usize, scale: f64 },
    LayerNorm { x: usize, gamma: usize, beta: usize, normed: Vec<f64>, rstd: Vec<f64> },
    Gelu(usize),
    L2NormalizeRows { a: usize, norms: Vec<f64> },
    CrossEntropy { logits: usize, targets: Vec<usize>, ignore: usize, probs: Vec<f64>, count: usize },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Result of [`Graph::cross_entropy`].
#[derive(Clone, Copy, Debug)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of positions that contributed to the mean.
    pub counted: usize,
}

impl CrossEntropy {
    /// Set when every target was the ignore index; the loss is then 0.
    pub fn all_ignored(&self) -> bool {
        self.counted == 0
    }
}

/// A single-use computation tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records no backward information; parameters enter as constants.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(AutodiffError::UnknownNode(v.0))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        self.node(v).map(|n| n.value.as_ref())
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            requires_grad: requires_grad && self.grad_enabled,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Registers (once per graph) the named parameter from `store`.
    ///
    /// Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get_shared(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let requires_grad = self.grad_enabled && !store.is_frozen(name);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Makes later `param(_, name)` lookups resolve to `var`.
    pub fn bind_param(&mut self, name: impl Into<String>, var: Var) {
        self.params.insert(name.into(), var);
    }

    // ----- primitive operations -----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a * b^T` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.node(a)?.value.clone(), self.node(b)?.value.clone());
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        if k != bk {
            return contract(format!(
                "matmul: {:?} x {:?}{}",
                av.shape(),
                bv.shape(),
                if trans_b { "^T" } else { "" }
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), trans_b, 0.0, &mut out);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul { a: a.0, b: b.0, trans_b }, &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        let (r, c) = (av.rows(), av.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = av.data()[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, out)?;
        Ok(self.push(t, Op::Transpose(a.0), &[a.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.node(a)?.value.clone(), self.node(b)?.value.clone());
        if av.shape() != bv.shape() {
            return contract(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    /// Adds the row vector `bias` (`[n]` or `[1, n]`) to every row of `a: [m, n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.node(a)?.value.clone(), self.node(bias)?.value.clone());
        let n = av.cols();
        if bv.len() != n {
            return contract(format!("add_row: {:?} + {:?}", av.shape(), bv.shape()));
        }
        let mut data = av.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow { a: a.0, bias: bias.0 }, &[a.0, bias.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.node(a)?.value.clone(), self.node(b)?.value.clone());
        if av.shape() != bv.shape() {
            return contract(format!("mul: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let t = self.node(a)?.value.map(|x| x * factor);
        Ok(self.push(t, Op::Scale(a.0, factor), &[a.0]))
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0]))
    }

    /// Column means: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        let (m, n) = (av.rows(), av.cols());
        let mut out = vec![0.0; n];
        for row in av.data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let t = Tensor::matrix(1, n, out)?;
        Ok(self.push(t, Op::MeanRows(a.0), &[a.0]))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        if start >= end || end > av.rows() {
            return contract(format!("slice_rows {start}..{end} of {:?}", av.shape()));
        }
        let n = av.cols();
        let t = Tensor::matrix(end - start, n, av.data()[start * n..end * n].to_vec())?;
        Ok(self.push(t, Op::SliceRows { a: a.0, start }, &[a.0]))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        let n = av.cols();
        if start >= end || end > n {
            return contract(format!("slice_cols {start}..{end} of {:?}", av.shape()));
        }
        let w = end - start;
        let mut out = Vec::with_capacity(av.rows() * w);
        for row in av.data().chunks(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let t = Tensor::matrix(av.rows(), w, out)?;
        Ok(self.push(t, Op::SliceCols { a: a.0, start }, &[a.0]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return contract("concat_rows of nothing");
        };
        let n = self.node(*first)?.value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.node(*p)?.value;
            if v.cols() != n {
                return contract(format!("concat_rows: width {} vs {n}", v.cols()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::matrix(rows, n, data)?;
        Ok(self.push(t, Op::ConcatRows(ids.clone()), &ids))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return contract("concat_cols of nothing");
        };
        let m = self.node(*first)?.value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.node(*p)?.value;
            if v.rows() != m {
                return contract(format!("concat_cols: height {} vs {m}", v.rows()));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let v = &self.nodes[p.0].value;
            for r in 0..m {
                data[r * total + offset..r * total + offset + w].copy_from_slice(v.row(r));
            }
            offset += w;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let t = Tensor::matrix(m, total, data)?;
        Ok(self.push(t, Op::ConcatCols(ids.clone()), &ids))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.node(table)?.value.clone();
        if ids.is_empty() {
            return contract("gather_rows with no ids");
        }
        let n = tv.cols();
        let mut data = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= tv.rows() {
                return contract(format!("gather_rows: id {id} >= {}", tv.rows()));
            }
            data.extend_from_slice(tv.row(id));
        }
        let t = Tensor::matrix(ids.len(), n, data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        ))
    }

    /// Row-wise `softmax(scale * a)` over the positions `mask` allows.
    pub fn masked_softmax(&mut self, a: Var, mask: &AttentionMask, scale: f64) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        let (m, n) = (av.rows(), av.cols());
        if mask.rows() != m || mask.cols() != n {
            return contract(format!(
                "masked_softmax: logits {m}x{n}, mask {}x{}",
                mask.rows(),
                mask.cols()
            ));
        }
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            kernels::masked_softmax_into(av.row(r), mask.row(r), scale, &mut out[r * n..(r + 1) * n])
                .map_err(|_| AutodiffError::EmptyAttention { row: r })?;
        }
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MaskedSoftmax { a: a.0, scale }, &[a.0]))
    }

    /// Row-wise LayerNorm with `eps = 1e-5`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.node(x)?.value.clone();
        let gv = self.node(gamma)?.value.clone();
        let bv = self.node(beta)?.value.clone();
        let d = xv.cols();
        let (out, normed, rstd) = kernels::layer_norm(xv.data(), d, gv.data(), bv.data())?;
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                normed,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.node(a)?.value.map(kernels::gelu);
        Ok(self.push(t, Op::Gelu(a.0), &[a.0]))
    }

    /// Scales each row to unit Euclidean norm. A zero row is a contract violation.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.node(a)?.value.clone();
        let n = av.cols();
        let mut norms = Vec::with_capacity(av.rows());
        let mut data = Vec::with_capacity(av.len());
        for (r, row) in av.data().chunks(n).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return contract(format!("row {r} has norm {norm}; cosine is undefined"));
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(t, Op::L2NormalizeRows { a: a.0, norms }, &[a.0]))
    }

    /// Mean over non-ignored rows of `-log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<CrossEntropy> {
        let lv = self.node(logits)?.value.clone();
        let (m, v) = (lv.rows(), lv.cols());
        if targets.len() != m {
            return contract(format!("cross_entropy: {m} rows, {} targets", targets.len()));
        }
        let mut probs = vec![0.0; m * v];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == ignore_index {
                continue;
            }
            if t >= v {
                return contract(format!("cross_entropy: target {t} outside vocab {v}"));
            }
            let row = lv.row(r);
            let lse = kernels::log_sum_exp(row);
            total += lse - row[t];
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let var = self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                ignore: ignore_index,
                probs,
                count,
            },
            &[logits.0],
        );
        Ok(CrossEntropy { loss: var, counted: count })
    }

    // ----- reverse sweep -----

    /// Gradients of the scalar `loss` with respect to every grad-requiring leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if root.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let mut by_node = HashMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                let g = grads.get_mut(i).and_then(Option::take);
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                by_node.insert(i, Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        let params = self
            .params
            .iter()
            .filter(|(_, v)| by_node.contains_key(&v.0))
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        Ok(Gradients { by_node, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let wants = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if wants(*a) {
                    // dA = dC * op(B)^T
                    let ga = slot(grads, *a, m * k);
                    gemm(m, n, k, 1.0, g, false, bv.data(), !*trans_b, 1.0, ga);
                }
                if wants(*b) {
                    let gb = slot(grads, *b, k * n);
                    if *trans_b {
                        // B is [n, k]: dB = dC^T * A
                        gemm(n, m, k, 1.0, g, true, av.data(), false, 1.0, gb);
                    } else {
                        // dB = A^T * dC
                        gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (r, c) = (node.value.rows(), node.value.cols());
                    let ga = slot(grads, *a, r * c);
                    for x in 0..r {
                        for y in 0..c {
                            ga[y * r + x] += g[x * c + y];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for j in [*a, *b] {
                    if wants(j) {
                        axpy(slot(grads, j, g.len()), 1.0, g);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), 1.0, g);
                }
                if wants(*bias) {
                    let n = node.value.cols();
                    let gb = slot(grads, *bias, n);
                    for row in g.chunks(n) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if wants(*a) {
                    let ga = slot(grads, *a, g.len());
                    for ((o, x), y) in ga.iter_mut().zip(g).zip(bv.data()) {
                        *o += x * y;
                    }
                }
                if wants(*b) {
                    let gb = slot(grads, *b, g.len());
                    for ((o, x), y) in gb.iter_mut().zip(g).zip(av.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    axpy(slot(grads, *a, g.len()), *f, g);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let len = self.nodes[*a].value.len();
                    for o in slot(grads, *a, len) {
                        *o += g[0];
                    }
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let av = &self.nodes[*a].value;
                    let (m, n) = (av.rows(), av.cols());
                    let ga = slot(grads, *a, m * n);
                    for row in ga.chunks_mut(n) {
                        axpy(row, 1.0 / m as f64, g);
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if wants(*a) {
                    let av = &self.nodes[*a].value;
                    let n = av.cols();
                    let ga = slot(grads, *a, av.len());
                    axpy(&mut ga[start * n..start * n + g.len()], 1.0, g);
                }
            }
            Op::SliceCols { a, start } => {
                if wants(*a) {
                    let av = &self.nodes[*a].value;
                    let n = av.cols();
                    let w = node.value.cols();
                    let ga = slot(grads, *a, av.len());
                    for (r, row) in g.chunks(w).enumerate() {
                        axpy(&mut ga[r * n + start..r * n + start + w], 1.0, row);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if wants(p) {
                        axpy(slot(grads, p, len), 1.0, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = &self.nodes[p].value;
                    let w = pv.cols();
                    if wants(p) {
                        let gp = slot(grads, p, pv.len());
                        for r in 0..pv.rows() {
                            axpy(
                                &mut gp[r * w..(r + 1) * w],
                                1.0,
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows { table, ids } => {
                if wants(*table) {
                    let tv = &self.nodes[*table].value;
                    let n = tv.cols();
                    let gt = slot(grads, *table, tv.len());
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut gt[id * n..(id + 1) * n], 1.0, &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::MaskedSoftmax { a, scale } => {
                if wants(*a) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = slot(grads, *a, y.len());
                    for ((yr, gr), out) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            out[c] += scale * yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let d = node.value.cols();
                let gv = &self.nodes[*gamma].value;
                if wants(*gamma) {
                    let gg = slot(grads, *gamma, d);
                    for (gr, nr) in g.chunks(d).zip(normed.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * nr[c];
                        }
                    }
                }
                if wants(*beta) {
                    let gb = slot(grads, *beta, d);
                    for gr in g.chunks(d) {
                        axpy(gb, 1.0, gr);
                    }
                }
                if wants(*x) {
                    let gx = slot(grads, *x, g.len());
                    let gamma = gv.data();
                    let mut dn = vec![0.0; d];
                    for (r, (gr, nr)) in g.chunks(d).zip(normed.chunks(d)).enumerate() {
                        for c in 0..d {
                            dn[c] = gr[c] * gamma[c];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for c in 0..d {
                            out[c] += rstd[r] * (dn[c] - mean_dn - nr[c] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let av = &self.nodes[*a].value;
                    let ga = slot(grads, *a, g.len());
                    for ((o, x), d) in ga.iter_mut().zip(av.data()).zip(g) {
                        *o += d * kernels::gelu_grad(*x);
                    }
                }
            }
            Op::L2NormalizeRows { a, norms } => {
                if wants(*a) {
                    let y = node.value.data();
                    let n = node.value.cols();
                    let ga = slot(grads, *a, y.len());
                    for (r, ((yr, gr), out)) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..n {
                            out[c] += (gr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, ignore, probs, count } => {
                if wants(*logits) && *count > 0 {
                    let v = self.nodes[*logits].value.cols();
                    let gl = slot(grads, *logits, probs.len());
                    let w = g[0] / *count as f64;
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let out = &mut gl[r * v..(r + 1) * v];
                        for c in 0..v {
                            out[c] += w * probs[r * v + c];
                        }
                        out[t] -= w;
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut [f64] {
    grads[i].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    by_node: HashMap<usize, Tensor>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Gradient of a grad-requiring leaf (zeros when the loss does not reach it).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.by_node.get(&v.0)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).and_then(|v| self.by_node.get(&v.0))
    }

    /// Gradients of every trainable parameter registered on the graph, by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(k, v)| self.by_node.get(&v.0).map(|t| (k.as_str(), t)))
    }

    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(k, v)| self.by_node.remove(&v.0).map(|t| (k, t)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0), true);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![0.5; 6]).unwrap(), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn foreign_node_is_unknown() {
        let mut other = Graph::new();
        for _ in 0..5 {
            other.constant(Tensor::scalar(1.0));
        }
        let foreign = other.constant(Tensor::scalar(2.0));
        let g = Graph::new();
        assert_eq!(g.backward(foreign).unwrap_err(), AutodiffError::UnknownNode(5));
    }

    #[test]
    fn unreachable_leaf_gets_zero_and_constant_gets_none() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0), true);
        let unused = g.leaf(Tensor::zeros(&[3]), true);
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn cross_entropy_values() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, 2, vec![2.0, 0.0]).unwrap());
        let ce = g.cross_entropy(l, &[0], 99).unwrap();
        let expected = -(2f64.exp() / (2f64.exp() + 1.0)).ln();
        assert!((g.value(ce.loss).item() - expected).abs() < 1e-15);
        assert!((expected - 0.12693).abs() < 1e-5);

        let l = g.constant(Tensor::zeros(&[3, 8]));
        let ce = g.cross_entropy(l, &[1, 4, 7], 99).unwrap();
        assert!((g.value(ce.loss).item() - 8f64.ln()).abs() < 1e-12);

        let l = g.constant(Tensor::matrix(2, 3, vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap());
        let ce = g.cross_entropy(l, &[0, 2], 99).unwrap();
        assert!(g.value(ce.loss).item() < 1e-20);

        let ce = g.cross_entropy(l, &[99, 99], 99).unwrap();
        assert!(ce.all_ignored());
        assert_eq!(g.value(ce.loss).item(), 0.0);

        assert!(g.cross_entropy(l, &[0, 3], 99).is_err());
    }

    #[test]
    fn zero_row_cannot_be_normalized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
        assert!(matches!(g.l2_normalize_rows(x), Err(AutodiffError::Contract(_))));
    }

    #[test]
    fn param_is_registered_once() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(3.0));
        let mut g = Graph::new();
        let a = g.param(&store, "w").unwrap();
        let b = g.param(&store, "w").unwrap();
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.param("w").unwrap().item(), 6.0);
        assert!(matches!(g.param(&store, "missing"), Err(AutodiffError::UnknownParam(_))));
    }

    #[test]
    fn frozen_and_no_grad_params_are_constants() {
        let mut store = ParamStore::new();
        store.insert("frozen.w", Tensor::scalar(1.0));
        store.insert("live.w", Tensor::scalar(1.0));
        store.freeze("frozen.");
        let mut g = Graph::new();
        let f = g.param(&store, "frozen.w").unwrap();
        let l = g.param(&store, "live.w").unwrap();
        assert!(!g.requires_grad(f));
        assert!(g.requires_grad(l));

        let mut g = Graph::no_grad();
        let l = g.param(&store, "live.w").unwrap();
        assert!(!g.requires_grad(l));
    }
}

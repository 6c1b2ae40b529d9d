//! Dynamic reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every training step (define-by-run). Nodes are
//! appended in topological order, so walking ids in reverse is a valid
//! backward schedule. `stop_gradient` re-enters its input as a fresh leaf
//! with `requires_grad == false`, which makes the stop-gradient contract a
//! structural property of the graph rather than a numeric one: backward can
//! never reach anything behind it.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

/// Gradients of a scalar loss with respect to named leaves. A missing key
/// means the gradient is identically zero (structurally: no live path from
/// the loss to that leaf).
#[derive(Debug, Clone, Default)]
pub struct GradientMap<S> {
    map: HashMap<String, Tensor<S>>,
}

impl<S: Scalar> GradientMap<S> {
    /// Assemble a map directly; backward is the normal source, this exists
    /// for optimizer tests and oracles.
    pub fn from_raw(map: HashMap<String, Tensor<S>>) -> Self {
        GradientMap { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }
}

enum Op<S> {
    Leaf,
    Add(usize, usize),
    /// [r, c] + [c], broadcast over rows.
    AddBias(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, S),
    /// [m, k] @ [k, n]
    Matmul(usize, usize),
    /// [m, k] @ [n, k]^T
    MatmulBt(usize, usize),
    Gelu(usize),
    /// (x, gamma, beta); normalizes the last axis.
    LayerNorm(usize, usize, usize),
    SoftmaxT(usize, S),
    LogSoftmaxT(usize, S),
    /// Rows of the input selected by index (embedding lookup, position
    /// selection). Backward is scatter-add.
    GatherRows(usize, Vec<usize>),
    /// out[r] = input[r, cols[r]]
    GatherPerRow(usize, Vec<usize>),
    SliceCols(usize, usize, usize),
    SliceRows(usize, usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    leaves: Vec<(usize, String)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), leaves: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: ValueId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> Result<ValueId> {
        if !value.all_finite() {
            return Err(CoreError::NonFinite { op: op_name });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Ok(ValueId(id))
    }

    fn any_grad(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Named differentiable leaf (a model parameter).
    pub fn param(&mut self, name: &str, value: Tensor<S>) -> Result<ValueId> {
        let id = self.push("param", Op::Leaf, value, true)?;
        self.leaves.push((id.0, name.to_string()));
        Ok(id)
    }

    /// Anonymous non-differentiable leaf (inputs, masks, frozen weights).
    pub fn constant(&mut self, value: Tensor<S>) -> Result<ValueId> {
        self.push("constant", Op::Leaf, value, false)
    }

    /// Forward-transparent gradient cut: the returned value is a fresh leaf
    /// holding the same tensor, with no parents and no gradient requirement.
    pub fn stop_gradient(&mut self, x: ValueId) -> Result<ValueId> {
        let value = self.nodes[x.0].value.clone();
        self.push("stop_gradient", Op::Leaf, value, false)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta.shape(), tb.shape()));
        }
        let mut out = ta.clone();
        out.add_assign(tb);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push("add", Op::Add(a.0, b.0), out, rg)
    }

    /// Matrix plus row-broadcast bias: [r, c] + [c].
    pub fn add_bias(&mut self, a: ValueId, bias: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let c = ta.last_dim();
        if tb.shape() != [c] {
            return Err(shape_err("add_bias", ta.shape(), tb.shape()));
        }
        let bdata = tb.data();
        let mut data = Vec::with_capacity(ta.numel());
        for row in 0..ta.rows() {
            for (x, b) in ta.row(row).iter().zip(bdata) {
                data.push(*x + *b);
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a.0, bias.0]);
        self.push("add_bias", Op::AddBias(a.0, bias.0), out, rg)
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x - *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push("sub", Op::Sub(a.0, b.0), out, rg)
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a.0, b.0]);
        self.push("mul", Op::Mul(a.0, b.0), out, rg)
    }

    pub fn scale(&mut self, a: ValueId, factor: S) -> Result<ValueId> {
        let out = self.nodes[a.0].value.map(|v| v * factor);
        let rg = self.nodes[a.0].requires_grad;
        self.push("scale", Op::Scale(a.0, factor), out, rg)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.last_dim() != tb.rows() {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = ta.matmul(tb);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push("matmul", Op::Matmul(a.0, b.0), out, rg)
    }

    /// a @ b^T with b stored row-major as [n, k].
    pub fn matmul_bt(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.last_dim() != tb.last_dim() {
            return Err(shape_err("matmul_bt", ta.shape(), tb.shape()));
        }
        let out = ta.matmul_bt(tb);
        let rg = self.any_grad(&[a.0, b.0]);
        self.push("matmul_bt", Op::MatmulBt(a.0, b.0), out, rg)
    }

    pub fn gelu(&mut self, a: ValueId) -> Result<ValueId> {
        let out = self.nodes[a.0].value.map(gelu_forward);
        let rg = self.nodes[a.0].requires_grad;
        self.push("gelu", Op::Gelu(a.0), out, rg)
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId) -> Result<ValueId> {
        let (tx, tg, tb) = (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let c = tx.last_dim();
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = layer_norm_eps::<S>();
        let (g, b) = (tg.data(), tb.data());
        let mut data = Vec::with_capacity(tx.numel());
        for r in 0..tx.rows() {
            let row = tx.row(r);
            let (mean, inv_std) = row_moments(row, eps);
            for (i, v) in row.iter().enumerate() {
                data.push((*v - mean) * inv_std * g[i] + b[i]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x.0, gamma.0, beta.0]);
        self.push("layer_norm", Op::LayerNorm(x.0, gamma.0, beta.0), out, rg)
    }

    /// Tempered softmax along the last axis, computed with max-subtraction.
    pub fn softmax_t(&mut self, a: ValueId, tau: S) -> Result<ValueId> {
        if tau <= S::zero() {
            return Err(CoreError::TemperatureNotPositive(tau.to_f64_lossy()));
        }
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            softmax_row(ta.row(r), tau, &mut data);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("softmax_t", Op::SoftmaxT(a.0, tau), out, rg)
    }

    /// Fused tempered log-softmax along the last axis; avoids log(0) on the
    /// cross-entropy path.
    pub fn log_softmax_t(&mut self, a: ValueId, tau: S) -> Result<ValueId> {
        if tau <= S::zero() {
            return Err(CoreError::TemperatureNotPositive(tau.to_f64_lossy()));
        }
        let ta = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(ta.numel());
        for r in 0..ta.rows() {
            log_softmax_row(ta.row(r), tau, &mut data);
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("log_softmax_t", Op::LogSoftmaxT(a.0, tau), out, rg)
    }

    /// Select rows (last-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: ValueId, indices: Vec<usize>) -> Result<ValueId> {
        let ta = &self.nodes[a.0].value;
        let rows = ta.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(CoreError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("row index {} out of range for {} rows", bad, rows),
            });
        }
        let c = ta.last_dim();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in &indices {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(vec![indices.len(), c], data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("gather_rows", Op::GatherRows(a.0, indices), out, rg)
    }

    /// out[r] = a[r, cols[r]]
    pub fn gather_per_row(&mut self, a: ValueId, cols: Vec<usize>) -> Result<ValueId> {
        let ta = &self.nodes[a.0].value;
        let (rows, c) = (ta.rows(), ta.last_dim());
        if cols.len() != rows {
            return Err(CoreError::ShapeMismatch {
                op: "gather_per_row",
                detail: format!("{} column indices for {} rows", cols.len(), rows),
            });
        }
        if let Some(&bad) = cols.iter().find(|&&i| i >= c) {
            return Err(CoreError::ShapeMismatch {
                op: "gather_per_row",
                detail: format!("column index {} out of range for {} columns", bad, c),
            });
        }
        let data: Vec<S> = cols.iter().enumerate().map(|(r, &j)| ta.row(r)[j]).collect();
        let out = Tensor::new(vec![rows], data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("gather_per_row", Op::GatherPerRow(a.0, cols), out, rg)
    }

    pub fn slice_cols(&mut self, a: ValueId, start: usize, len: usize) -> Result<ValueId> {
        let ta = &self.nodes[a.0].value;
        let c = ta.last_dim();
        if start + len > c {
            return Err(CoreError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("columns {}..{} out of range for width {}", start, start + len, c),
            });
        }
        let mut data = Vec::with_capacity(ta.rows() * len);
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row(r)[start..start + len]);
        }
        let out = Tensor::new(vec![ta.rows(), len], data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("slice_cols", Op::SliceCols(a.0, start, len), out, rg)
    }

    pub fn slice_rows(&mut self, a: ValueId, start: usize, nrows: usize) -> Result<ValueId> {
        let ta = &self.nodes[a.0].value;
        let (rows, c) = (ta.rows(), ta.last_dim());
        if start + nrows > rows {
            return Err(CoreError::ShapeMismatch {
                op: "slice_rows",
                detail: format!("rows {}..{} out of range for {} rows", start, start + nrows, rows),
            });
        }
        let data = ta.data()[start * c..(start + nrows) * c].to_vec();
        let out = Tensor::new(vec![nrows, c], data)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("slice_rows", Op::SliceRows(a.0, start, nrows), out, rg)
    }

    pub fn concat_cols(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(CoreError::ShapeMismatch { op: "concat_cols", detail: "no parts".into() });
        }
        let rows = self.nodes[parts[0].0].value.rows();
        let mut width = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.rows() != rows {
                return Err(shape_err("concat_cols", &[rows], t.shape()));
            }
            width += t.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let out = Tensor::new(vec![rows, width], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_grad(&ids);
        self.push("concat_cols", Op::ConcatCols(ids), out, rg)
    }

    pub fn concat_rows(&mut self, parts: &[ValueId]) -> Result<ValueId> {
        if parts.is_empty() {
            return Err(CoreError::ShapeMismatch { op: "concat_rows", detail: "no parts".into() });
        }
        let c = self.nodes[parts[0].0].value.last_dim();
        let mut rows = 0;
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.last_dim() != c {
                return Err(shape_err("concat_rows", &[c], t.shape()));
            }
            rows += t.rows();
        }
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(self.nodes[p.0].value.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_grad(&ids);
        self.push("concat_rows", Op::ConcatRows(ids), out, rg)
    }

    pub fn sum(&mut self, a: ValueId) -> Result<ValueId> {
        let total = kahan_sum(self.nodes[a.0].value.data());
        let rg = self.nodes[a.0].requires_grad;
        self.push("sum", Op::Sum(a.0), Tensor::scalar(total), rg)
    }

    pub fn mean(&mut self, a: ValueId) -> Result<ValueId> {
        let n = self.nodes[a.0].value.numel();
        if n == 0 {
            return Err(CoreError::ShapeMismatch { op: "mean", detail: "empty tensor".into() });
        }
        let total = kahan_sum(self.nodes[a.0].value.data());
        let rg = self.nodes[a.0].requires_grad;
        let value = total / S::from_usize(n);
        self.push("mean", Op::Mean(a.0), Tensor::scalar(value), rg)
    }

    pub fn reshape(&mut self, a: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        let out = self.nodes[a.0].value.clone().reshaped(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push("reshape", Op::Reshape(a.0), out, rg)
    }

    /// Reverse pass from a scalar loss. Returns gradients for every named
    /// leaf that is reachable through live (non-stopped) edges; leaves with
    /// no live path get no entry.
    pub fn backward(&self, loss: ValueId) -> Result<GradientMap<S>> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(CoreError::NonScalarLoss(loss_node.value.numel()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(loss_node.value.shape().to_vec(), S::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backward_op(id, &g, &mut grads);
            if self.is_named_leaf(id) {
                grads[id] = Some(g);
            }
        }

        let mut map = HashMap::new();
        for (id, name) in &self.leaves {
            if let Some(g) = grads[*id].take() {
                if !g.all_finite() {
                    return Err(CoreError::NonFinite { op: "backward" });
                }
                map.insert(name.clone(), g);
            }
        }
        Ok(GradientMap { map })
    }

    fn is_named_leaf(&self, id: usize) -> bool {
        matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].requires_grad
    }

    fn backward_op(&self, id: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::AddBias(a, bias) => {
                self.accum(grads, *a, g.clone());
                if self.nodes[*bias].requires_grad {
                    let c = g.last_dim();
                    let mut db = Tensor::zeros(vec![c]);
                    for r in 0..g.rows() {
                        for (acc, v) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *acc = *acc + *v;
                        }
                    }
                    self.accum(grads, *bias, db);
                }
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].requires_grad {
                    let tb = &self.nodes[*b].value;
                    let data = g.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
                    self.accum(grads, *a, Tensor::new(tb.shape().to_vec(), data).unwrap());
                }
                if self.nodes[*b].requires_grad {
                    let ta = &self.nodes[*a].value;
                    let data = g.data().iter().zip(ta.data()).map(|(x, y)| *x * *y).collect();
                    self.accum(grads, *b, Tensor::new(ta.shape().to_vec(), data).unwrap());
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                self.accum(grads, *a, g.map(|v| v * f));
            }
            Op::Matmul(a, b) => {
                if self.nodes[*a].requires_grad {
                    self.accum(grads, *a, g.matmul_bt(&self.nodes[*b].value));
                }
                if self.nodes[*b].requires_grad {
                    self.accum(grads, *b, self.nodes[*a].value.matmul_at(g));
                }
            }
            Op::MatmulBt(a, b) => {
                if self.nodes[*a].requires_grad {
                    self.accum(grads, *a, g.matmul(&self.nodes[*b].value));
                }
                if self.nodes[*b].requires_grad {
                    self.accum(grads, *b, g.matmul_at(&self.nodes[*a].value));
                }
            }
            Op::Gelu(a) => {
                let ta = &self.nodes[*a].value;
                let data = g.data().iter().zip(ta.data()).map(|(gv, x)| *gv * gelu_derivative(*x)).collect();
                self.accum(grads, *a, Tensor::new(ta.shape().to_vec(), data).unwrap());
            }
            Op::LayerNorm(x, gamma, beta) => {
                self.backward_layer_norm(*x, *gamma, *beta, g, grads);
            }
            Op::SoftmaxT(a, tau) => {
                let p = &node.value;
                let inv_tau = S::one() / *tau;
                let c = p.last_dim();
                let mut data = Vec::with_capacity(p.numel());
                for r in 0..p.rows() {
                    let (prow, grow) = (p.row(r), &g.data()[r * c..(r + 1) * c]);
                    let dot = prow.iter().zip(grow).fold(S::zero(), |acc, (pv, gv)| acc + *pv * *gv);
                    for (pv, gv) in prow.iter().zip(grow) {
                        data.push(inv_tau * *pv * (*gv - dot));
                    }
                }
                self.accum(grads, *a, Tensor::new(p.shape().to_vec(), data).unwrap());
            }
            Op::LogSoftmaxT(a, tau) => {
                let y = &node.value;
                let inv_tau = S::one() / *tau;
                let c = y.last_dim();
                let mut data = Vec::with_capacity(y.numel());
                for r in 0..y.rows() {
                    let (yrow, grow) = (y.row(r), &g.data()[r * c..(r + 1) * c]);
                    let gsum = grow.iter().fold(S::zero(), |acc, v| acc + *v);
                    for (yv, gv) in yrow.iter().zip(grow) {
                        data.push(inv_tau * (*gv - yv.exp() * gsum));
                    }
                }
                self.accum(grads, *a, Tensor::new(y.shape().to_vec(), data).unwrap());
            }
            Op::GatherRows(a, indices) => {
                let ta = &self.nodes[*a].value;
                let c = ta.last_dim();
                let mut da = Tensor::zeros(ta.shape().to_vec());
                for (r, &i) in indices.iter().enumerate() {
                    let dst = &mut da.data_mut()[i * c..(i + 1) * c];
                    for (acc, v) in dst.iter_mut().zip(g.row(r)) {
                        *acc = *acc + *v;
                    }
                }
                self.accum(grads, *a, da);
            }
            Op::GatherPerRow(a, cols) => {
                let ta = &self.nodes[*a].value;
                let c = ta.last_dim();
                let mut da = Tensor::zeros(ta.shape().to_vec());
                for (r, &j) in cols.iter().enumerate() {
                    da.data_mut()[r * c + j] = g.data()[r];
                }
                self.accum(grads, *a, da);
            }
            Op::SliceCols(a, start, len) => {
                let ta = &self.nodes[*a].value;
                let c = ta.last_dim();
                let mut da = Tensor::zeros(ta.shape().to_vec());
                for r in 0..g.rows() {
                    let dst = &mut da.data_mut()[r * c + start..r * c + start + len];
                    dst.copy_from_slice(g.row(r));
                }
                self.accum(grads, *a, da);
            }
            Op::SliceRows(a, start, nrows) => {
                let ta = &self.nodes[*a].value;
                let c = ta.last_dim();
                let mut da = Tensor::zeros(ta.shape().to_vec());
                da.data_mut()[start * c..(start + nrows) * c].copy_from_slice(g.data());
                self.accum(grads, *a, da);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let w = t.last_dim();
                    if self.nodes[p].requires_grad {
                        let mut dp = Vec::with_capacity(t.numel());
                        for r in 0..g.rows() {
                            dp.extend_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        self.accum(grads, p, Tensor::new(t.shape().to_vec(), dp).unwrap());
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.last_dim();
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let n = t.rows();
                    if self.nodes[p].requires_grad {
                        let dp = g.data()[offset * c..(offset + n) * c].to_vec();
                        self.accum(grads, p, Tensor::new(t.shape().to_vec(), dp).unwrap());
                    }
                    offset += n;
                }
            }
            Op::Sum(a) => {
                let gv = g.scalar_value();
                let ta = &self.nodes[*a].value;
                self.accum(grads, *a, Tensor::full(ta.shape().to_vec(), gv));
            }
            Op::Mean(a) => {
                let ta = &self.nodes[*a].value;
                let gv = g.scalar_value() / S::from_usize(ta.numel());
                self.accum(grads, *a, Tensor::full(ta.shape().to_vec(), gv));
            }
            Op::Reshape(a) => {
                let ta = &self.nodes[*a].value;
                let da = g.clone().reshaped(ta.shape().to_vec()).unwrap();
                self.accum(grads, *a, da);
            }
        }
    }

    fn backward_layer_norm(&self, x: usize, gamma: usize, beta: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let tx = &self.nodes[x].value;
        let tg = &self.nodes[gamma].value;
        let c = tx.last_dim();
        let eps = layer_norm_eps::<S>();
        let n = S::from_usize(c);

        let mut dx = Tensor::zeros(tx.shape().to_vec());
        let mut dgamma = Tensor::zeros(vec![c]);
        let mut dbeta = Tensor::zeros(vec![c]);

        for r in 0..tx.rows() {
            let xrow = tx.row(r);
            let grow = &g.data()[r * c..(r + 1) * c];
            let (mean, inv_std) = row_moments(xrow, eps);

            let mut sum_gy = S::zero();
            let mut sum_gy_xhat = S::zero();
            for i in 0..c {
                let xhat = (xrow[i] - mean) * inv_std;
                let gy = grow[i] * tg.data()[i];
                sum_gy = sum_gy + gy;
                sum_gy_xhat = sum_gy_xhat + gy * xhat;
                dgamma.data_mut()[i] = dgamma.data()[i] + grow[i] * xhat;
                dbeta.data_mut()[i] = dbeta.data()[i] + grow[i];
            }
            let mean_gy = sum_gy / n;
            let mean_gy_xhat = sum_gy_xhat / n;
            for i in 0..c {
                let xhat = (xrow[i] - mean) * inv_std;
                let gy = grow[i] * tg.data()[i];
                dx.data_mut()[r * c + i] = inv_std * (gy - mean_gy - xhat * mean_gy_xhat);
            }
        }

        if self.nodes[x].requires_grad {
            self.accum(grads, x, dx);
        }
        if self.nodes[gamma].requires_grad {
            self.accum(grads, gamma, dgamma);
        }
        if self.nodes[beta].requires_grad {
            self.accum(grads, beta, dbeta);
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], id: usize, g: Tensor<S>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> CoreError {
    CoreError::ShapeMismatch { op, detail: format!("{:?} vs {:?}", a, b) }
}

fn layer_norm_eps<S: Scalar>() -> S {
    S::from_f64(1e-5)
}

fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let n = S::from_usize(row.len());
    let mean = row.iter().fold(S::zero(), |acc, v| acc + *v) / n;
    let var = row.iter().fold(S::zero(), |acc, v| {
        let d = *v - mean;
        acc + d * d
    }) / n;
    (mean, S::one() / (var + eps).sqrt())
}

fn softmax_row<S: Scalar>(row: &[S], tau: S, out: &mut Vec<S>) {
    let max = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
    let start = out.len();
    let mut denom = S::zero();
    for v in row {
        let e = ((*v - max) / tau).exp();
        denom = denom + e;
        out.push(e);
    }
    for v in &mut out[start..] {
        *v = *v / denom;
    }
}

fn log_softmax_row<S: Scalar>(row: &[S], tau: S, out: &mut Vec<S>) {
    let max = row.iter().fold(S::neg_infinity(), |m, v| m.max(*v));
    let mut denom = S::zero();
    for v in row {
        denom = denom + ((*v - max) / tau).exp();
    }
    let log_denom = denom.ln();
    for v in row {
        out.push((*v - max) / tau - log_denom);
    }
}

fn gelu_forward<S: Scalar>(x: S) -> S {
    // tanh approximation of GELU; smooth, so finite differences stay honest.
    let c = S::from_f64(0.7978845608028654); // sqrt(2/pi)
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.7978845608028654);
    let k = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = S::one() - t * t;
    half * (S::one() + t) + half * x * sech2 * c * (S::one() + three * k * x * x)
}

fn kahan_sum<S: Scalar>(values: &[S]) -> S {
    let mut sum = S::zero();
    let mut comp = S::zero();
    for &v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(x: f64) -> (Graph<f64>, ValueId) {
        let mut g = Graph::new();
        let id = g.param("x", Tensor::scalar(x)).unwrap();
        (g, id)
    }

    #[test]
    fn square_gradient() {
        let (mut g, x) = scalar_graph(3.0);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().scalar_value(), 6.0);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_f64_slice(vec![2], &[1.0, 2.0]).unwrap()).unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, CoreError::NonScalarLoss(2)));
    }

    #[test]
    fn stop_gradient_forward_identity_and_cut() {
        let mut g = Graph::<f64>::new();
        let x = g
            .param("x", Tensor::from_f64_slice(vec![3, 4], &(0..12).map(|i| i as f64 * 0.37 - 2.0).collect::<Vec<_>>()).unwrap())
            .unwrap();
        let s = g.stop_gradient(x).unwrap();
        assert_eq!(g.value(s).data(), g.value(x).data());
        assert!(!g.requires_grad(s));

        // f(x) = sum(stop(x)) has no gradient entry at all.
        let loss = g.sum(s).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.is_empty());
    }

    #[test]
    fn stop_gradient_keeps_live_factor_only() {
        // f(x) = x * stop(x) at x=3: f=9, df/dx=3 (not 6).
        let (mut g, x) = scalar_graph(3.0);
        let s = g.stop_gradient(x).unwrap();
        let y = g.mul(x, s).unwrap();
        assert_eq!(g.value(y).scalar_value(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().scalar_value(), 3.0);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::<f64>::new();
        let uniform = g.constant(Tensor::from_f64_slice(vec![4], &[1.0; 4]).unwrap()).unwrap();
        let p = g.softmax_t(uniform, 1.0).unwrap();
        for v in g.value(p).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }

        let two = g.constant(Tensor::from_f64_slice(vec![2], &[2.0f64.ln(), 0.0]).unwrap()).unwrap();
        let p = g.softmax_t(two, 1.0).unwrap();
        assert!((g.value(p).data()[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.value(p).data()[1] - 1.0 / 3.0).abs() < 1e-12);

        // logits [2, 0] at tau=2 -> [e/(e+1), 1/(e+1)]
        let t = g.constant(Tensor::from_f64_slice(vec![2], &[2.0, 0.0]).unwrap()).unwrap();
        let p = g.softmax_t(t, 2.0).unwrap();
        assert!((g.value(p).data()[0] - 0.7310585786300049).abs() < 1e-12);
        assert!((g.value(p).data()[1] - 0.2689414213699951).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nonpositive_temperature() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64_slice(vec![2], &[0.0, 1.0]).unwrap()).unwrap();
        assert!(matches!(g.softmax_t(x, 0.0), Err(CoreError::TemperatureNotPositive(_))));
        assert!(matches!(g.log_softmax_t(x, -1.0), Err(CoreError::TemperatureNotPositive(_))));
    }

    #[test]
    fn softmax_sum_has_zero_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param("x", Tensor::from_f64_slice(vec![5], &[0.3, -1.2, 2.0, 0.0, 0.7]).unwrap()).unwrap();
        let p = g.softmax_t(x, 1.0).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        for v in grads.get("x").unwrap().data() {
            assert!(v.abs() < 1e-12, "softmax-sum gradient should vanish, got {}", v);
        }
    }

    #[test]
    fn non_finite_forward_fails_fast() {
        let mut g = Graph::<f64>::new();
        let big = g.constant(Tensor::from_f64_slice(vec![1], &[1e308]).unwrap()).unwrap();
        let err = g.mul(big, big).unwrap_err();
        match err {
            CoreError::NonFinite { op } => assert_eq!(op, "mul"),
            other => panic!("expected NonFinite, got {:?}", other),
        }
    }

    #[test]
    fn gradient_accumulates_over_shared_use() {
        // f(x) = x*x + x => df/dx = 2x + 1
        let (mut g, x) = scalar_graph(4.0);
        let sq = g.mul(x, x).unwrap();
        let y = g.add(sq, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().scalar_value(), 9.0);
    }

    #[test]
    fn repeated_backward_calls_are_independent() {
        let (mut g, x) = scalar_graph(2.0);
        let y = g.mul(x, x).unwrap();
        let g1 = g.backward(y).unwrap();
        let g2 = g.backward(y).unwrap();
        assert_eq!(g1.get("x").unwrap().scalar_value(), g2.get("x").unwrap().scalar_value());
    }

    #[test]
    fn log_softmax_matches_log_of_softmax() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64_slice(vec![2, 3], &[0.1, -2.0, 3.0, 1.0, 1.0, 1.0]).unwrap()).unwrap();
        let p = g.softmax_t(x, 2.5).unwrap();
        let lp = g.log_softmax_t(x, 2.5).unwrap();
        for (a, b) in g.value(p).data().iter().zip(g.value(lp).data()) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }
}

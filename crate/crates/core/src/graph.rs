//! Define-by-run reverse-mode autodiff over rank-2 f64 values.
//!
//! A fresh Graph is built every training step and consumed by `backward`.
//! Gradient propagation only traverses nodes whose subgraph contains a
//! grad-requiring leaf, so detached inputs (cached memory spans, frozen
//! weights) receive no gradient buffer at all rather than a zero-filled one.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: Option<String> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatCols(Vec<NodeId>),
    Transpose(NodeId),
    GatherRows { table: NodeId, ids: Vec<usize> },
    Rope { x: NodeId, positions: Vec<usize>, theta: f64 },
    SoftmaxRows(NodeId),
    CausalSoftmaxRows(NodeId),
    RmsNorm { x: NodeId, gain: NodeId },
    Silu(NodeId),
    CrossEntropy { logits: NodeId, targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

pub const RMS_EPS: f64 = 1e-6;

pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Backward results: per-node gradients plus the named-leaf aggregation the
/// optimizer consumes.
pub struct Grads {
    node_grads: Vec<Option<Vec<f64>>>,
    pub by_name: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn of(&self, id: NodeId) -> Option<&Vec<f64>> {
        self.node_grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), consumed: false }
    }

    fn push(&mut self, op: Op, value: Vec<f64>, rows: usize, cols: usize, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, rows, cols, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value[0]
    }

    // ---- leaves ----

    pub fn leaf(&mut self, t: &Tensor, name: Option<&str>) -> Result<NodeId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(
            Op::Leaf { name: name.map(str::to_owned) },
            t.data.clone(),
            r,
            c,
            t.requires_grad,
        ))
    }

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("constant {}x{} with {} values", rows, cols, data.len())));
        }
        Ok(self.push(Op::Leaf { name: None }, data, rows, cols, false))
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(Error::Shape(format!("matmul {}x{} by {}x{}", m, ka, kb, n)));
        }
        let v = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, ka, n);
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::MatMul(a, b), v, m, n, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if (r, c) != self.shape(b) {
            return Err(Error::Shape(format!("add {:?} vs {:?}", (r, c), self.shape(b))));
        }
        let v = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Add(a, b), v, r, c, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cl) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let ng = self.needs_grad(a);
        self.push(Op::Scale(a, c), v, r, cl, ng)
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut v = Vec::new();
        let mut ng = false;
        for &p in &parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::Shape(format!("concat_rows cols {} vs {}", c, cols)));
            }
            rows += r;
            v.extend_from_slice(&self.nodes[p.0].value);
            ng |= self.needs_grad(p);
        }
        Ok(self.push(Op::ConcatRows(parts), v, rows, cols, ng))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > r || len == 0 {
            return Err(Error::Shape(format!("slice_rows {}+{} of {}", start, len, r)));
        }
        let v = self.nodes[a.0].value[start * c..(start + len) * c].to_vec();
        let ng = self.needs_grad(a);
        Ok(self.push(Op::SliceRows(a, start, len), v, len, c, ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > c || len == 0 {
            return Err(Error::Shape(format!("slice_cols {}+{} of {}", start, len, c)));
        }
        let src = &self.nodes[a.0].value;
        let mut v = Vec::with_capacity(r * len);
        for i in 0..r {
            v.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Op::SliceCols(a, start, len), v, r, len, ng))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols of nothing".into()));
        }
        let rows = self.shape(parts[0]).0;
        let mut cols = 0;
        let mut ng = false;
        for &p in &parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::Shape(format!("concat_cols rows {} vs {}", r, rows)));
            }
            cols += c;
            ng |= self.needs_grad(p);
        }
        let mut v = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in &parts {
            let (_, c) = self.shape(p);
            let src = &self.nodes[p.0].value;
            for i in 0..rows {
                v[i * cols + off..i * cols + off + c].copy_from_slice(&src[i * c..(i + 1) * c]);
            }
            off += c;
        }
        Ok(self.push(Op::ConcatCols(parts), v, rows, cols, ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let src = &self.nodes[a.0].value;
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                v[j * r + i] = src[i * c + j];
            }
        }
        let ng = self.needs_grad(a);
        self.push(Op::Transpose(a), v, c, r, ng)
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (r, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Shape("gather_rows of nothing".into()));
        }
        let src = &self.nodes[table.0].value;
        let mut v = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::Shape(format!("row id {} out of {}", id, r)));
            }
            v.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let ng = self.needs_grad(table);
        Ok(self.push(Op::GatherRows { table, ids: ids.to_vec() }, v, ids.len(), c, ng))
    }

    pub fn rope(&mut self, x: NodeId, positions: &[usize], theta: f64) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        if positions.len() != r {
            return Err(Error::Shape(format!("{} positions for {} rows", positions.len(), r)));
        }
        if c % 2 != 0 {
            return Err(Error::Shape(format!("rope head dim {} is odd", c)));
        }
        let mut v = self.nodes[x.0].value.clone();
        for (i, &pos) in positions.iter().enumerate() {
            kernels::rope_row(&mut v[i * c..(i + 1) * c], pos, theta);
        }
        let ng = self.needs_grad(x);
        Ok(self.push(Op::Rope { x, positions: positions.to_vec(), theta }, v, r, c, ng))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let mut v = self.nodes[a.0].value.clone();
        for i in 0..r {
            kernels::softmax_row(&mut v[i * c..(i + 1) * c]);
        }
        let ng = self.needs_grad(a);
        self.push(Op::SoftmaxRows(a), v, r, c, ng)
    }

    /// Softmax over columns 0..=i of row i; positions above the diagonal are
    /// exactly zero. Requires square scores.
    pub fn causal_softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(Error::Shape(format!("causal softmax on {}x{}", r, c)));
        }
        let src = &self.nodes[a.0].value;
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..i * c + i + 1];
            let out = &mut v[i * c..i * c + i + 1];
            out.copy_from_slice(row);
            kernels::softmax_row(out);
        }
        let ng = self.needs_grad(a);
        Ok(self.push(Op::CausalSoftmaxRows(a), v, r, c, ng))
    }

    pub fn rms_norm(&mut self, x: NodeId, gain: NodeId) -> Result<NodeId> {
        let (r, c) = self.shape(x);
        let (gr, gc) = self.shape(gain);
        if gr * gc != c {
            return Err(Error::Shape(format!("gain {} for {} cols", gr * gc, c)));
        }
        let src = &self.nodes[x.0].value;
        let g = &self.nodes[gain.0].value;
        let mut v = vec![0.0; r * c];
        for i in 0..r {
            kernels::rms_norm_row(&src[i * c..(i + 1) * c], g, RMS_EPS, &mut v[i * c..(i + 1) * c]);
        }
        let ng = self.needs_grad(x) || self.needs_grad(gain);
        Ok(self.push(Op::RmsNorm { x, gain }, v, r, c, ng))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        let v = self.nodes[a.0].value.iter().map(|&x| kernels::silu(x)).collect();
        let ng = self.needs_grad(a);
        self.push(Op::Silu(a), v, r, c, ng)
    }

    /// Mean negative log-likelihood over unmasked positions.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let (t, vsz) = self.shape(logits);
        if targets.len() != t || mask.len() != t {
            return Err(Error::Shape(format!(
                "{} targets / {} mask for {} positions",
                targets.len(),
                mask.len(),
                t
            )));
        }
        let n_unmasked = mask.iter().filter(|&&m| m).count();
        if n_unmasked == 0 {
            return Err(Error::EmptyLoss);
        }
        let src = &self.nodes[logits.0].value;
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            if targets[i] >= vsz {
                return Err(Error::Shape(format!("target {} out of vocab {}", targets[i], vsz)));
            }
            let row = &src[i * vsz..(i + 1) * vsz];
            total += log_sum_exp(row) - row[targets[i]];
        }
        let v = vec![total / n_unmasked as f64];
        let ng = self.needs_grad(logits);
        Ok(self.push(
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec() },
            v,
            1,
            1,
            ng,
        ))
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: NodeId) -> Result<Grads> {
        if self.consumed {
            return Err(Error::Numeric("graph already consumed by backward".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape(format!("backward on non-scalar {:?}", self.shape(loss))));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad || grads[idx].is_none() {
                continue;
            }
            let g = grads[idx].take().unwrap();
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let mut by_name = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name: Some(name) } = &node.op {
                if let Some(g) = &grads[idx] {
                    by_name
                        .entry(name.clone())
                        .and_modify(|acc: &mut Vec<f64>| {
                            for (a, b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        })
                        .or_insert_with(|| g.clone());
                }
            }
        }
        Ok(Grads { node_grads: grads, by_name })
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, add: impl FnOnce(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        add(slot);
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let (_, n) = self.shape(*b);
                if self.needs_grad(*a) {
                    // dA = dOut x B^T
                    let bt = transpose_buf(&self.nodes[b.0].value, k, n);
                    let da = kernels::matmul(g, &bt, m, n, k);
                    Self::accumulate(grads, *a, m * k, |s| add_into(s, &da));
                }
                if self.needs_grad(*b) {
                    // dB = A^T x dOut
                    let at = transpose_buf(&self.nodes[a.0].value, m, k);
                    let db = kernels::matmul(&at, g, k, m, n);
                    Self::accumulate(grads, *b, k * n, |s| add_into(s, &db));
                }
            }
            Op::Add(a, b) => {
                if self.needs_grad(*a) {
                    Self::accumulate(grads, *a, g.len(), |s| add_into(s, g));
                }
                if self.needs_grad(*b) {
                    Self::accumulate(grads, *b, g.len(), |s| add_into(s, g));
                }
            }
            Op::Scale(a, c) => {
                if self.needs_grad(*a) {
                    let c = *c;
                    Self::accumulate(grads, *a, g.len(), |s| {
                        for (si, gi) in s.iter_mut().zip(g) {
                            *si += c * gi;
                        }
                    });
                }
            }
            Op::ConcatRows(parts) => {
                let cols = node.cols;
                let mut row = 0;
                for &p in parts {
                    let (r, _) = self.shape(p);
                    if self.needs_grad(p) {
                        let piece = &g[row * cols..(row + r) * cols];
                        Self::accumulate(grads, p, r * cols, |s| add_into(s, piece));
                    }
                    row += r;
                }
            }
            Op::SliceRows(a, start, len) => {
                if self.needs_grad(*a) {
                    let (r, c) = self.shape(*a);
                    let (start, len) = (*start, *len);
                    Self::accumulate(grads, *a, r * c, |s| {
                        add_into(&mut s[start * c..(start + len) * c], g);
                    });
                }
            }
            Op::SliceCols(a, start, len) => {
                if self.needs_grad(*a) {
                    let (r, c) = self.shape(*a);
                    let (start, len) = (*start, *len);
                    Self::accumulate(grads, *a, r * c, |s| {
                        for i in 0..r {
                            add_into(&mut s[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                        }
                    });
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.rows;
                let cols = node.cols;
                let mut off = 0;
                for &p in parts {
                    let (_, c) = self.shape(p);
                    if self.needs_grad(p) {
                        let mut piece = vec![0.0; rows * c];
                        for i in 0..rows {
                            piece[i * c..(i + 1) * c]
                                .copy_from_slice(&g[i * cols + off..i * cols + off + c]);
                        }
                        Self::accumulate(grads, p, rows * c, |s| add_into(s, &piece));
                    }
                    off += c;
                }
            }
            Op::Transpose(a) => {
                if self.needs_grad(*a) {
                    let (r, c) = self.shape(*a);
                    // g has shape c x r
                    let gt = transpose_buf(g, c, r);
                    Self::accumulate(grads, *a, r * c, |s| add_into(s, &gt));
                }
            }
            Op::GatherRows { table, ids } => {
                if self.needs_grad(*table) {
                    let (r, c) = self.shape(*table);
                    Self::accumulate(grads, *table, r * c, |s| {
                        for (i, &id) in ids.iter().enumerate() {
                            add_into(&mut s[id * c..(id + 1) * c], &g[i * c..(i + 1) * c]);
                        }
                    });
                }
            }
            Op::Rope { x, positions, theta } => {
                if self.needs_grad(*x) {
                    let (r, c) = self.shape(*x);
                    // rotation is orthogonal per pair; gradient is the inverse rotation
                    let mut gx = g.to_vec();
                    for (i, &pos) in positions.iter().enumerate() {
                        rope_row_inverse(&mut gx[i * c..(i + 1) * c], pos, *theta);
                    }
                    Self::accumulate(grads, *x, r * c, |s| add_into(s, &gx));
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs_grad(*a) {
                    let (r, c) = self.shape(*a);
                    let y = &node.value;
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        softmax_backward_row(
                            &y[i * c..(i + 1) * c],
                            &g[i * c..(i + 1) * c],
                            &mut gx[i * c..(i + 1) * c],
                        );
                    }
                    Self::accumulate(grads, *a, r * c, |s| add_into(s, &gx));
                }
            }
            Op::CausalSoftmaxRows(a) => {
                if self.needs_grad(*a) {
                    let (r, c) = self.shape(*a);
                    let y = &node.value;
                    // masked outputs are exactly zero, so the dense row rule
                    // already sends zero gradient above the diagonal
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        softmax_backward_row(
                            &y[i * c..(i + 1) * c],
                            &g[i * c..(i + 1) * c],
                            &mut gx[i * c..(i + 1) * c],
                        );
                    }
                    Self::accumulate(grads, *a, r * c, |s| add_into(s, &gx));
                }
            }
            Op::RmsNorm { x, gain } => {
                let (r, c) = self.shape(*x);
                let xv = &self.nodes[x.0].value;
                let gv = &self.nodes[gain.0].value;
                if self.needs_grad(*gain) {
                    let mut gg = vec![0.0; c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let inv = rms_inv(row);
                        for j in 0..c {
                            gg[j] += g[i * c + j] * row[j] * inv;
                        }
                    }
                    Self::accumulate(grads, *gain, c, |s| add_into(s, &gg));
                }
                if self.needs_grad(*x) {
                    let mut gx = vec![0.0; r * c];
                    for i in 0..r {
                        let row = &xv[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let inv = rms_inv(row);
                        let mut dot_g_gx = 0.0;
                        for j in 0..c {
                            dot_g_gx += grow[j] * gv[j] * row[j];
                        }
                        let coef = inv * inv * inv * dot_g_gx / c as f64;
                        for j in 0..c {
                            gx[i * c + j] = grow[j] * gv[j] * inv - coef * row[j];
                        }
                    }
                    Self::accumulate(grads, *x, r * c, |s| add_into(s, &gx));
                }
            }
            Op::Silu(a) => {
                if self.needs_grad(*a) {
                    let xv = &self.nodes[a.0].value;
                    let mut gx = vec![0.0; g.len()];
                    for i in 0..g.len() {
                        let s = 1.0 / (1.0 + (-xv[i]).exp());
                        gx[i] = g[i] * s * (1.0 + xv[i] * (1.0 - s));
                    }
                    Self::accumulate(grads, *a, g.len(), |s| add_into(s, &gx));
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                if self.needs_grad(*logits) {
                    let (t, vsz) = self.shape(*logits);
                    let src = &self.nodes[logits.0].value;
                    let n_unmasked = mask.iter().filter(|&&m| m).count() as f64;
                    let upstream = g[0];
                    let mut gl = vec![0.0; t * vsz];
                    for i in 0..t {
                        if !mask[i] {
                            continue;
                        }
                        let row = &src[i * vsz..(i + 1) * vsz];
                        let out = &mut gl[i * vsz..(i + 1) * vsz];
                        out.copy_from_slice(row);
                        kernels::softmax_row(out);
                        out[targets[i]] -= 1.0;
                        for v in out.iter_mut() {
                            *v *= upstream / n_unmasked;
                        }
                    }
                    Self::accumulate(grads, *logits, t * vsz, |s| add_into(s, &gl));
                }
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    debug_assert_eq!(acc.len(), src.len());
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

fn transpose_buf(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (v - mx).exp();
    }
    mx + sum.ln()
}

/// dx = y * (dy - dot(dy, y)), the softmax Jacobian-vector product.
fn softmax_backward_row(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let mut dot = 0.0;
    for i in 0..y.len() {
        dot += dy[i] * y[i];
    }
    for i in 0..y.len() {
        dx[i] = y[i] * (dy[i] - dot);
    }
}

fn rms_inv(row: &[f64]) -> f64 {
    let mut ms = 0.0;
    for &v in row {
        ms += v * v;
    }
    ms /= row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

fn rope_row_inverse(row: &mut [f64], pos: usize, theta: f64) {
    let d = row.len();
    for i in 0..d / 2 {
        let freq = theta.powf(-2.0 * i as f64 / d as f64);
        let ang = pos as f64 * freq;
        let (sin, cos) = ang.sin_cos();
        let a = row[2 * i];
        let b = row[2 * i + 1];
        row[2 * i] = a * cos + b * sin;
        row[2 * i + 1] = -a * sin + b * cos;
    }
}

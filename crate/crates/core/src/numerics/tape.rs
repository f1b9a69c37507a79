use super::tensor::{kernels, Tensor};
use crate::error::{MoleError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// a·bᵀ
    Linear(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention(Box<AttentionSaved>),
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, idx: Vec<usize> },
    IndexAddRows { base: Var, src: Var, idx: Vec<usize> },
    Softmax(Var),
    Sum(Var),
    ColSum(Var),
    DotConst(Var, Vec<f64>),
    ScaleRows(Var, Var),
    Column(Var, usize),
    CrossEntropy { logits: Var, targets: Vec<(usize, usize)>, probs: Vec<f64> },
}

#[derive(Debug)]
struct AttentionSaved {
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    segments: Vec<usize>,
    /// softmax weights per segment, head, query row, key column (causal square blocks)
    probs: Vec<f64>,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in creation order, which is a topological order of
/// the graph; backward walks it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> MoleError {
    MoleError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op: &'static str, value: Tensor, node: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(MoleError::NonFinite { op });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op: node,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).as_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let out = kernels::mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// x[m×k] · w[n×k]ᵀ, the usual linear-layer product.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = self.mat(x, "linear")?;
        let (n, k2) = self.mat(w, "linear")?;
        if k != k2 {
            return Err(shape_err("linear", self.value(x), self.value(w)));
        }
        let out = kernels::mm_nt(self.value(x).data(), self.value(w).data(), m, k, n);
        self.push("linear", Tensor::new(vec![m, n], out)?, Op::Linear(x, w), &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-n bias to every row of an m×n matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "add_bias")?;
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != n || tb.shape().len() != 1 {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for i in 0..m {
            for (d, b) in data[i * n..(i + 1) * n].iter_mut().zip(tb.data()) {
                *d += b;
            }
        }
        self.push("add_bias", Tensor::new(vec![m, n], data)?, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| v * c).collect())?;
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Row-wise normalization to zero mean and unit variance, no affine part.
    pub fn layernorm(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "layernorm")?;
        let t = self.value(x);
        let mut data = vec![0.0; m * n];
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let row = t.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push("layernorm", Tensor::new(vec![m, n], data)?, Op::LayerNorm { x, inv_std }, &[x])
    }

    /// Causal multi-head attention over independent sequences stacked along
    /// rows; `segments` lists their lengths. q, k, v are [T×d].
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[usize],
    ) -> Result<Var> {
        let (t, d) = self.mat(q, "causal_attention")?;
        for other in [k, v] {
            if self.value(other).shape() != [t, d] {
                return Err(shape_err("causal_attention", self.value(q), self.value(other)));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(MoleError::Contract(format!("{d} features not divisible into {heads} heads")));
        }
        if segments.iter().sum::<usize>() != t {
            return Err(MoleError::Contract(format!(
                "segments {segments:?} do not cover {t} rows"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; t * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|s| s * s * heads).sum());
        let mut start = 0;
        for &len in segments {
            for hd in 0..heads {
                let off = hd * dh;
                for i in 0..len {
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    let mut row = vec![0.0; len];
                    let mut max = f64::NEG_INFINITY;
                    for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                        let kj = &kd[(start + j) * d + off..(start + j) * d + off + dh];
                        *r = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                        max = max.max(*r);
                    }
                    let mut z = 0.0;
                    for r in row.iter_mut().take(i + 1) {
                        *r = (*r - max).exp();
                        z += *r;
                    }
                    let orow = &mut out[(start + i) * d + off..(start + i) * d + off + dh];
                    for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                        *r /= z;
                        let vj = &vd[(start + j) * d + off..(start + j) * d + off + dh];
                        for (o, vv) in orow.iter_mut().zip(vj) {
                            *o += *r * vv;
                        }
                    }
                    probs.extend_from_slice(&row);
                }
            }
            start += len;
        }
        let saved = AttentionSaved {
            q,
            k,
            v,
            heads,
            segments: segments.to_vec(),
            probs,
        };
        self.push(
            "causal_attention",
            Tensor::new(vec![t, d], out)?,
            Op::Attention(Box::new(saved)),
            &[q, k, v],
        )
    }

    /// Rows of `table` selected by token ids.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(MoleError::Contract(format!("token id {bad} outside vocab {vocab}")));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(MoleError::Contract(format!("row {bad} outside {m} rows")));
        }
        let t = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), n], data)?;
        self.push("gather_rows", out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    /// Copy of `base` with `src` row r added into row `idx[r]`.
    pub fn index_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.mat(base, "index_add_rows")?;
        let (sm, sn) = self.mat(src, "index_add_rows")?;
        if sn != n || sm != idx.len() {
            return Err(shape_err("index_add_rows", self.value(base), self.value(src)));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(MoleError::Contract(format!("row {bad} outside {m} rows")));
        }
        let mut data = self.value(base).data().to_vec();
        let s = self.value(src);
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * n..(i + 1) * n].iter_mut().zip(s.row(r)) {
                *o += v;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push(
            "index_add_rows",
            out,
            Op::IndexAddRows { base, src, idx: idx.to_vec() },
            &[base, src],
        )
    }

    /// Softmax over the last dimension with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().is_empty() || t.cols() == 0 {
            return Err(MoleError::Contract("softmax needs a nonempty last dim".into()));
        }
        let out = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.cols()))?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Column sums of an m×n matrix, as a length-n vector.
    pub fn col_sum(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "col_sum")?;
        let t = self.value(x);
        let mut s = vec![0.0; n];
        for i in 0..m {
            for (a, v) in s.iter_mut().zip(t.row(i)) {
                *a += v;
            }
        }
        self.push("col_sum", Tensor::vector(s), Op::ColSum(x), &[x])
    }

    /// Σ_i x_i · c_i with c held constant.
    pub fn dot_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let t = self.value(x);
        if t.len() != c.len() {
            return Err(MoleError::Shape {
                op: "dot_const",
                lhs: t.shape().to_vec(),
                rhs: vec![c.len()],
            });
        }
        let s = t.data().iter().zip(c).map(|(a, b)| a * b).sum();
        self.push("dot_const", Tensor::scalar(s), Op::DotConst(x, c.to_vec()), &[x])
    }

    /// Multiplies row i of x[m×n] by w[i], w of shape [m×1].
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, n) = self.mat(x, "scale_rows")?;
        let tw = self.value(w);
        if tw.shape() != [m, 1] {
            return Err(shape_err("scale_rows", self.value(x), tw));
        }
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for i in 0..m {
            let wi = tw.data()[i];
            for o in &mut data[i * n..(i + 1) * n] {
                *o *= wi;
            }
        }
        self.push("scale_rows", Tensor::new(vec![m, n], data)?, Op::ScaleRows(x, w), &[x, w])
    }

    /// Column j of an m×n matrix, as [m×1].
    pub fn column(&mut self, x: Var, j: usize) -> Result<Var> {
        let (m, n) = self.mat(x, "column")?;
        if j >= n {
            return Err(MoleError::Contract(format!("column {j} outside {n} columns")));
        }
        let t = self.value(x);
        let data = (0..m).map(|i| t.data()[i * n + j]).collect();
        self.push("column", Tensor::new(vec![m, 1], data)?, Op::Column(x, j), &[x])
    }

    /// Mean cross-entropy over (row, target class) pairs of a logit matrix.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = self.mat(logits, "cross_entropy")?;
        if targets.is_empty() {
            return Err(MoleError::EmptyMask);
        }
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= m || c >= n) {
            return Err(MoleError::Contract(format!("target ({r}, {c}) outside {m}x{n} logits")));
        }
        let t = self.value(logits);
        let mut probs = Vec::with_capacity(targets.len() * n);
        let mut loss = 0.0;
        for &(r, c) in targets {
            let row = t.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[c];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= targets.len() as f64;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Reverse sweep from a scalar loss. Every node is visited once, in reverse
    /// creation order; contributions from multiple uses are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(MoleError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                match (g, node.needs_grad) {
                    (Some(g), true) => Tensor::new(node.value.shape().to_vec(), g).ok(),
                    _ => None,
                }
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let dims = |v: Var| {
            let t = &self.nodes[v.0].value;
            (t.rows(), t.cols())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ((m, k), (_, n)) = (dims(*a), dims(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC·Bᵀ
                    let t = kernels::mm_nt(g, val(*b), m, n, k);
                    add_into(ga, &t);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::mm_tn_acc(gb, val(*a), g, m, k, n);
                }
            }
            Op::Linear(x, w) => {
                let ((m, k), (n, _)) = (dims(*x), dims(*w));
                if let Some(gx) = self.acc(grads, *x) {
                    let t = kernels::mm(g, val(*w), m, n, k);
                    add_into(gx, &t);
                }
                if let Some(gw) = self.acc(grads, *w) {
                    // dW = dCᵀ·X
                    kernels::mm_tn_acc(gw, g, val(*x), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let n = dims(*x).1;
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a), val(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(db) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(da) {
                        *o += gi * ai;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += gi * c;
                    }
                }
            }
            Op::Gelu(x) => {
                let dx = val(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(dx) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *o += gi * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du);
                    }
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let n = dims(*x).1;
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, inv) in inv_std.iter().enumerate() {
                        let gy = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let mg = gy.iter().sum::<f64>() / n as f64;
                        let mgy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for ((o, gi), yi) in gx[i * n..(i + 1) * n].iter_mut().zip(gy).zip(yr) {
                            *o += inv * (gi - mg - yi * mgy);
                        }
                    }
                }
            }
            Op::Attention(saved) => self.attention_backward(saved, g, grads),
            Op::Embedding { table, ids } => {
                let n = dims(*table).1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut gt[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let n = dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * n..(i + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::IndexAddRows { base, src, idx } => {
                let n = dims(*base).1;
                if let Some(gb) = self.acc(grads, *base) {
                    add_into(gb, g);
                }
                if let Some(gs) = self.acc(grads, *src) {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gs[r * n..(r + 1) * n], &g[i * n..(i + 1) * n]);
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gxr, gr), yr) in gx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::ColSum(x) => {
                let n = dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for row in gx.chunks_mut(n) {
                        add_into(row, g);
                    }
                }
            }
            Op::DotConst(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, ci) in gx.iter_mut().zip(c) {
                        *o += g[0] * ci;
                    }
                }
            }
            Op::ScaleRows(x, w) => {
                let n = dims(*x).1;
                let (dx, dw) = (val(*x), val(*w));
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, wi) in dw.iter().enumerate() {
                        for (o, gi) in gx[i * n..(i + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *o += gi * wi;
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for (i, o) in gw.iter_mut().enumerate() {
                        let xr = &dx[i * n..(i + 1) * n];
                        *o += g[i * n..(i + 1) * n].iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            Op::Column(x, j) => {
                let n = dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, gi) in g.iter().enumerate() {
                        gx[i * n + j] += gi;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = dims(*logits).1;
                let w = g[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (p, &(r, c)) in probs.chunks(n).zip(targets) {
                        let row = &mut gl[r * n..(r + 1) * n];
                        for (o, pi) in row.iter_mut().zip(p) {
                            *o += w * pi;
                        }
                        row[c] -= w;
                    }
                }
            }
        }
    }

    fn attention_backward(&self, s: &AttentionSaved, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (t, d) = {
            let v = &self.nodes[s.q.0].value;
            (v.rows(), v.cols())
        };
        let dh = d / s.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.nodes[s.q.0].value.data(),
            self.nodes[s.k.0].value.data(),
            self.nodes[s.v.0].value.data(),
        );
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut start = 0;
        let mut pbase = 0;
        for &len in &s.segments {
            for hd in 0..s.heads {
                let off = hd * dh;
                for i in 0..len {
                    let p = &s.probs[pbase + i * len..pbase + (i + 1) * len];
                    let gi = &g[(start + i) * d + off..(start + i) * d + off + dh];
                    // dP_ij = dO_i · V_j ; dS = P ⊙ (dP − Σ_j P dP)
                    let mut dp = vec![0.0; i + 1];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        let vj = &vd[(start + j) * d + off..(start + j) * d + off + dh];
                        *dpj = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    }
                    let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                    let qi = &qd[(start + i) * d + off..(start + i) * d + off + dh];
                    for (j, dpj) in dp.iter().enumerate() {
                        let ds = p[j] * (dpj - dot) * scale;
                        let r = (start + j) * d + off;
                        for c in 0..dh {
                            gv[r + c] += p[j] * gi[c];
                            gk[r + c] += ds * qi[c];
                            gq[(start + i) * d + off + c] += ds * kd[r + c];
                        }
                    }
                }
                pbase += len * len;
            }
            start += len;
        }
        for (v, gt) in [(s.q, gq), (s.k, gk), (s.v, gv)] {
            if let Some(acc) = self.acc(grads, v) {
                add_into(acc, &gt);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_rows(data: &[f64], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut z = 0.0;
        for v in row {
            let e = (v - max).exp();
            z += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= z;
        }
    }
    out
}

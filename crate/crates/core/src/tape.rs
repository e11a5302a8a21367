//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of one forward pass as a node in a flat
//! list. Nodes reference their inputs by index, so `backward` is a single
//! reverse sweep. Parameters are read in place from the borrowed
//! [`ParamStore`]; their gradients come back in a [`Gradients`] value that can
//! be accumulated into the store once the tape is dropped.
//!
//! Every node is 2-D. Vectors are `1×n` rows and scalars are `1×1`.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::{Error, ParamId, ParamStore, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Value {
    Owned(Vec<f64>),
    Param(ParamId),
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftmaxRows(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Nll {
        probs: Var,
        labels: Vec<usize>,
        clamp: f64,
    },
    SupCon {
        feats: Var,
        coeffs: Vec<f64>,
        tau: f64,
    },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Probabilities below this floor are clamped inside the NLL loss.
pub const NLL_CLAMP: f64 = 1e-12;

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    clamp_events: usize,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            clamp_events: 0,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of probabilities clamped by NLL nodes on this tape.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match &self.nodes[v.0].value {
            Value::Owned(d) => d,
            Value::Param(id) => self.params.get(*id).data(),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let (r, c) = self.dims(v);
        Tensor::new(&[r, c], self.value(v).to_vec()).expect("tape values are finite")
    }

    fn push(&mut self, op_name: &'static str, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(rows * cols, data.len());
        if !math::all_finite(&data) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let g = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) => g(a) || g(b),
            Op::Linear { x, w, b } => g(x) || g(w) || b.as_ref().is_some_and(g),
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::SoftmaxRows(x)
            | Op::SliceRows { x, .. }
            | Op::MeanRows(x)
            | Op::L2NormalizeRows { x, .. } => g(x),
            Op::LayerNorm { x, gain, bias, .. } => g(x) || g(gain) || g(bias),
            Op::Attention { q, k, v, .. } => g(q) || g(k) || g(v),
            Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.iter().any(g),
            Op::Gather { table, .. } => g(table),
            Op::Nll { probs, .. } => g(probs),
            Op::SupCon { feats, .. } => g(feats),
        }
    }

    fn leaf(&mut self, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> Result<Var> {
        if rows * cols != data.len() {
            return Err(Error::shape("leaf", &[rows, cols], &[data.len()]));
        }
        if !math::all_finite(&data) {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Owned(data),
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Input that does not receive a gradient.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var> {
        self.leaf(rows, cols, data, true)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> Result<Var> {
        let (r, c) = t.as_matrix_dims();
        self.constant(r, c, t.data().to_vec())
    }

    /// The node reading parameter `id`; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let (rows, cols) = self.params.get(id).as_matrix_dims();
        self.nodes.push(Node {
            rows,
            cols,
            value: Value::Param(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let out = matmul(self.value(a), self.value(b), m, k, n);
        self.push("matmul", m, n, out, Op::MatMul(a, b))
    }

    /// `x·w + b` with `x: [m, d_in]`, `w: [d_in, d_out]`, `b: [1, d_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (m, k) = self.dims(x);
        let (k2, n) = self.dims(w);
        if k != k2 {
            return Err(Error::shape("linear", &[m, k], &[k2, n]));
        }
        let mut out = matmul(self.value(x), self.value(w), m, k, n);
        if let Some(b) = b {
            let (br, bc) = self.dims(b);
            if br != 1 || bc != n {
                return Err(Error::shape("linear bias", &[br, bc], &[n]));
            }
            let bias = self.value(b);
            for row in out.chunks_exact_mut(n) {
                row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
            }
        }
        self.push("linear", m, n, out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.dims(a) != self.dims(b) {
            let (da, db) = (self.dims(a), self.dims(b));
            return Err(Error::shape("add", &[da.0, da.1], &[db.0, db.1]));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let (r, c) = self.dims(a);
        self.push("add", r, c, out, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let (r, cols) = self.dims(a);
        self.push("scale", r, cols, out, Op::Scale(a, c))
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let (r, c) = self.dims(a);
        self.push("gelu", r, c, out, Op::Gelu(a))
    }

    /// Row-wise layer normalization with gain and bias of shape `[1, cols]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        for p in [gain, bias] {
            let (r, c) = self.dims(p);
            if r != 1 || c != cols {
                return Err(Error::shape("layer_norm", &[rows, cols], &[r, c]));
            }
        }
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / math::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        self.push(
            "layer_norm",
            rows,
            cols,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        )
    }

    /// Multi-head scaled dot-product attention on already projected
    /// `q`, `k`, `v` of shape `[S, d]`. Head `h` uses columns
    /// `h·d/heads .. (h+1)·d/heads`; outputs are concatenated in head order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (s, d) = self.dims(q);
        if self.dims(k) != (s, d) || self.dims(v) != (s, d) {
            let (dk, dv) = (self.dims(k), self.dims(v));
            return Err(Error::shape("attention", &[s, d], &[dk.0, dk.1, dv.0, dv.1]));
        }
        if s == 0 {
            return Err(Error::Empty { op: "attention" });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(alloc::format!(
                "model dim {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * s * s];
        let mut out = vec![0.0; s * d];
        for h in 0..heads {
            let off = h * dh;
            let p = &mut probs[h * s * s..(h + 1) * s * s];
            for i in 0..s {
                let qi = &qv[i * d + off..i * d + off + dh];
                let row = &mut p[i * s..(i + 1) * s];
                let mut max = f64::NEG_INFINITY;
                for j in 0..s {
                    let kj = &kv[j * d + off..j * d + off + dh];
                    let sc = dot(qi, kj) * scale;
                    row[j] = sc;
                    max = max.max(sc);
                }
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = math::exp(*x - max);
                    sum += *x;
                }
                let inv = 1.0 / sum;
                row.iter_mut().for_each(|x| *x *= inv);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for j in 0..s {
                    let pij = row[j];
                    let vj = &vv[j * d + off..j * d + off + dh];
                    oi.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
                }
            }
        }
        self.push(
            "attention",
            s,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if cols == 0 {
            return Err(Error::Empty { op: "softmax" });
        }
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row);
        }
        self.push("softmax", rows, cols, out, Op::SoftmaxRows(x))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty { op: "concat_rows" });
        };
        let cols = self.dims(first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], &[r, c]));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        self.push("concat_rows", rows, cols, out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        if len == 0 || start + len > rows {
            return Err(Error::shape("slice_rows", &[rows, cols], &[start, len]));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        self.push("slice_rows", len, cols, out, Op::SliceRows { x, start })
    }

    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        self.slice_rows(x, index, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty { op: "concat_cols" });
        };
        let rows = self.dims(first).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows, total], &[r, c]));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let c = self.dims(p).1;
            let src = self.value(p);
            for r in 0..rows {
                out[r * total + off..r * total + off + c].copy_from_slice(&src[r * c..(r + 1) * c]);
            }
            off += c;
        }
        self.push("concat_cols", rows, total, out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.dims(table);
        if ids.is_empty() {
            return Err(Error::Empty { op: "gather" });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            out.extend_from_slice(&src[id * cols..(id + 1) * cols]);
        }
        self.push(
            "gather",
            ids.len(),
            cols,
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let mut out = vec![0.0; cols];
        for row in self.value(x).chunks_exact(cols) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        self.push("mean_rows", 1, cols, out, Op::MeanRows(x))
    }

    /// `x / (‖x‖₂ + eps)` per row.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims(x);
        let mut out = self.value(x).to_vec();
        let mut norms = vec![0.0; rows];
        for (r, row) in out.chunks_exact_mut(cols).enumerate() {
            let n = math::sqrt(row.iter().map(|v| v * v).sum::<f64>()) + eps;
            norms[r] = n;
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push("l2_normalize", rows, cols, out, Op::L2NormalizeRows { x, norms })
    }

    /// Mean over rows of `-ln(max(probs[i, labels[i]], NLL_CLAMP))`.
    pub fn nll(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims(probs);
        if rows != labels.len() {
            return Err(Error::shape("nll", &[rows, cols], &[labels.len()]));
        }
        let p = self.value(probs);
        let mut total = 0.0;
        let mut clamped = 0;
        for (i, &l) in labels.iter().enumerate() {
            if l >= cols {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: cols,
                });
            }
            let mut v = p[i * cols + l];
            if v < NLL_CLAMP {
                v = NLL_CLAMP;
                clamped += 1;
            }
            total -= math::ln(v);
        }
        self.clamp_events += clamped;
        let out = vec![total / rows as f64];
        self.push(
            "nll",
            1,
            1,
            out,
            Op::Nll {
                probs,
                labels: labels.to_vec(),
                clamp: NLL_CLAMP,
            },
        )
    }

    /// Supervised inter-class contrastive loss over rows of `feats`:
    ///
    /// `Σ_i −1/|P(i)| Σ_{p∈P(i)} log( exp(s_ip) / Σ_{j≠i} exp(s_ij) )`,
    /// `s_ij = feats_i·feats_j / tau`, where `P(i)` holds the other rows with
    /// the same label. Rows without positives contribute nothing.
    pub fn supcon(&mut self, feats: Var, labels: &[usize], tau: f64) -> Result<Var> {
        let (k, d) = self.dims(feats);
        if labels.len() != k {
            return Err(Error::shape("supcon", &[k, d], &[labels.len()]));
        }
        if k < 2 {
            return Err(Error::BatchTooSmall(k));
        }
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::Config(alloc::format!("temperature must be positive, got {tau}")));
        }
        let f = self.value(feats);
        let mut sim = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                sim[i * k + j] = dot(&f[i * d..(i + 1) * d], &f[j * d..(j + 1) * d]) / tau;
            }
        }
        // coeffs[i][j] = dL/ds_ij
        let mut coeffs = vec![0.0; k * k];
        let mut loss = 0.0;
        for i in 0..k {
            let positives = (0..k).filter(|&j| j != i && labels[j] == labels[i]).count();
            if positives == 0 {
                continue;
            }
            let row = &sim[i * k..(i + 1) * k];
            let max = (0..k)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..k).filter(|&j| j != i).map(|j| math::exp(row[j] - max)).sum();
            let lse = max + math::ln(denom);
            let inv_p = 1.0 / positives as f64;
            let mut li = 0.0;
            for j in 0..k {
                if j == i {
                    continue;
                }
                let q = math::exp(row[j] - lse);
                let mut c = q;
                if labels[j] == labels[i] {
                    li -= (row[j] - lse) * inv_p;
                    c -= inv_p;
                }
                coeffs[i * k + j] = c;
            }
            loss += li;
        }
        self.push("supcon", 1, 1, vec![loss], Op::SupCon { feats, coeffs, tau })
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.dims(loss) != (1, 1) {
            let (r, c) = self.dims(loss);
            return Err(Error::shape("backward", &[r, c], &[1, 1]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
        }

        let mut params = Vec::new();
        for (pid, slot) in self.param_vars.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = grads[v.0].take() {
                    if !math::all_finite(&g) {
                        return Err(Error::NonFiniteGradient {
                            name: self.params.name(ParamId(pid)).into(),
                        });
                    }
                    params.push((ParamId(pid), g));
                }
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        let out = match &node.value {
            Value::Owned(d) => d.as_slice(),
            Value::Param(_) => unreachable!("parameters are leaves"),
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    let ga = matmul_a_bt(g, self.value(*b), m, n, k);
                    add_into(self.slot(grads, *a), &ga);
                }
                if self.needs(*b) {
                    let gb = matmul_at_b(self.value(*a), g, m, k, n);
                    add_into(self.slot(grads, *b), &gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (m, k) = self.dims(*x);
                let n = cols;
                if self.needs(*x) {
                    let gx = matmul_a_bt(g, self.value(*w), m, n, k);
                    add_into(self.slot(grads, *x), &gx);
                }
                if self.needs(*w) {
                    let gw = matmul_at_b(self.value(*x), g, m, k, n);
                    add_into(self.slot(grads, *w), &gw);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = self.slot(grads, *b);
                        for row in g.chunks_exact(n) {
                            gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let ga = self.slot(grads, *a);
                    ga.iter_mut().zip(g).for_each(|(o, v)| *o += v * c);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let xs = self.value(*a);
                    let ga = self.slot(grads, *a);
                    for ((o, &x), &gv) in ga.iter_mut().zip(xs).zip(g) {
                        *o += gv * gelu_grad(x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                if self.needs(*gain) {
                    let gg = self.slot(grads, *gain);
                    for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = self.slot(grads, *bias);
                    for grow in g.chunks_exact(cols) {
                        gb.iter_mut().zip(grow).for_each(|(o, v)| *o += v);
                    }
                }
                if self.needs(*x) {
                    let gain_v = self.value(*gain);
                    let mut gx = vec![0.0; rows * cols];
                    let inv_n = 1.0 / cols as f64;
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let hrow = &xhat[r * cols..(r + 1) * cols];
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let dh = grow[c] * gain_v[c];
                            sum_d += dh;
                            sum_dh += dh * hrow[c];
                        }
                        let (mean_d, mean_dh) = (sum_d * inv_n, sum_dh * inv_n);
                        for c in 0..cols {
                            let dh = grow[c] * gain_v[c];
                            gx[r * cols + c] = rstd[r] * (dh - mean_d - hrow[c] * mean_dh);
                        }
                    }
                    add_into(self.slot(grads, *x), &gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g, grads),
            Op::SoftmaxRows(x) => {
                if self.needs(*x) {
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s = dot(y, gr);
                        for c in 0..cols {
                            gx[r * cols + c] = y[c] * (gr[c] - s);
                        }
                    }
                    add_into(self.slot(grads, *x), &gx);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.dims(p).0 * cols;
                    if self.needs(p) {
                        add_into(self.slot(grads, p), &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.needs(*x) {
                    let gx = self.slot(grads, *x);
                    let dst = &mut gx[start * cols..(start + rows) * cols];
                    dst.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    if self.needs(p) {
                        let gp = self.slot(grads, p);
                        for r in 0..rows {
                            let src = &g[r * cols + off..r * cols + off + c];
                            gp[r * c..(r + 1) * c].iter_mut().zip(src).for_each(|(o, v)| *o += v);
                        }
                    }
                    off += c;
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let gt = self.slot(grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        gt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::MeanRows(x) => {
                if self.needs(*x) {
                    let n = self.dims(*x).0;
                    let inv = 1.0 / n as f64;
                    let gx = self.slot(grads, *x);
                    for row in gx.chunks_exact_mut(cols) {
                        row.iter_mut().zip(g).for_each(|(o, v)| *o += v * inv);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.needs(*x) {
                    let xs = self.value(*x);
                    let mut gx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let xr = &xs[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let n = norms[r];
                        let raw = math::sqrt(dot(xr, xr));
                        let coef = if raw > 0.0 { dot(gr, xr) / (raw * n * n) } else { 0.0 };
                        for c in 0..cols {
                            gx[r * cols + c] = gr[c] / n - xr[c] * coef;
                        }
                    }
                    add_into(self.slot(grads, *x), &gx);
                }
            }
            Op::Nll {
                probs,
                labels,
                clamp,
            } => {
                if self.needs(*probs) {
                    let (k, c) = self.dims(*probs);
                    let p = self.value(*probs);
                    let gp = self.slot(grads, *probs);
                    let scale = g[0] / k as f64;
                    for (i, &l) in labels.iter().enumerate() {
                        let v = p[i * c + l];
                        if v >= *clamp {
                            gp[i * c + l] -= scale / v;
                        }
                    }
                }
            }
            Op::SupCon { feats, coeffs, tau } => {
                if self.needs(*feats) {
                    let (k, d) = self.dims(*feats);
                    let f = self.value(*feats);
                    let scale = g[0] / tau;
                    let mut gf = vec![0.0; k * d];
                    for i in 0..k {
                        for j in 0..k {
                            let c = (coeffs[i * k + j] + coeffs[j * k + i]) * scale;
                            if c == 0.0 {
                                continue;
                            }
                            let fj = &f[j * d..(j + 1) * d];
                            gf[i * d..(i + 1) * d]
                                .iter_mut()
                                .zip(fj)
                                .for_each(|(o, v)| *o += c * v);
                        }
                    }
                    add_into(self.slot(grads, *feats), &gf);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (s, d) = self.dims(q);
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![0.0; s * d];
        let mut gk = vec![0.0; s * d];
        let mut gv = vec![0.0; s * d];
        let mut dp = vec![0.0; s];
        for h in 0..heads {
            let off = h * dh;
            let p = &probs[h * s * s..(h + 1) * s * s];
            for i in 0..s {
                let gi = &g[i * d + off..i * d + off + dh];
                let prow = &p[i * s..(i + 1) * s];
                for j in 0..s {
                    let vj = &vv[j * d + off..j * d + off + dh];
                    dp[j] = dot(gi, vj);
                    let pij = prow[j];
                    gv[j * d + off..j * d + off + dh]
                        .iter_mut()
                        .zip(gi)
                        .for_each(|(o, x)| *o += pij * x);
                }
                let inner = dot(prow, &dp);
                let qi = &qv[i * d + off..i * d + off + dh];
                for j in 0..s {
                    let ds = prow[j] * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv[j * d + off..j * d + off + dh];
                    gq[i * d + off..i * d + off + dh]
                        .iter_mut()
                        .zip(kj)
                        .for_each(|(o, x)| *o += ds * x);
                    gk[j * d + off..j * d + off + dh]
                        .iter_mut()
                        .zip(qi)
                        .for_each(|(o, x)| *o += ds * x);
                }
            }
        }
        for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                add_into(self.slot(grads, var), &gr);
            }
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.nodes[v.0].rows * self.nodes[v.0].cols;
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient of a leaf created by [`Tape::variable`].
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    /// Add into each parameter's gradient buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            let t = store.get_mut(*id);
            t.grad_mut().iter_mut().zip(g).for_each(|(o, v)| *o += v);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

/// `[m,k]·[k,n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let (m4, n4) = (m - m % 4, n - n % 4);
    // 4×4 output tiles accumulate in registers across the whole k loop.
    for i in (0..m4).step_by(4) {
        let rows = [&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k], &a[(i + 2) * k..(i + 3) * k], &a[(i + 3) * k..(i + 4) * k]];
        for j in (0..n4).step_by(4) {
            let mut acc = [[0.0f64; 4]; 4];
            for p in 0..k {
                let bv = &b[p * n + j..p * n + j + 4];
                for r in 0..4 {
                    let x = rows[r][p];
                    for c in 0..4 {
                        acc[r][c] += x * bv[c];
                    }
                }
            }
            for r in 0..4 {
                out[(i + r) * n + j..(i + r) * n + j + 4].copy_from_slice(&acc[r]);
            }
        }
    }
    // Ragged right columns and bottom rows.
    if n4 < n {
        for i in 0..m4 {
            for p in 0..k {
                let x = a[i * k + p];
                for j in n4..n {
                    out[i * n + j] += x * b[p * n + j];
                }
            }
        }
    }
    for i in m4..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            orow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(o, v)| *o += x * v);
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for (r, row) in a.chunks_exact(cols).enumerate() {
        for (c, &x) in row.iter().enumerate() {
            t[c * rows + r] = x;
        }
    }
    t
}

/// `[m,n]·[k,n]ᵀ → [m,k]`
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    matmul(a, &transpose(b, k, n), m, n, k)
}

/// `[m,k]ᵀ·[m,n] → [k,n]`
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(&transpose(a, m, k), b, k, m, n)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = math::exp(*x - max);
        sum += *x;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + math::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * math::exp(-0.5 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn linear_identity_and_bias() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(1, 2, vec![1.0, 2.0]).unwrap();
        let w = t.constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[1.0, 2.0]);

        let x = t.constant(1, 2, vec![0.0, 0.0]).unwrap();
        let w = t.constant(2, 2, vec![0.3, -1.2, 4.0, 7.5]).unwrap();
        let b = t.constant(1, 2, vec![3.0, -1.0]).unwrap();
        let y = t.linear(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[3.0, -1.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = SeededRng::new(42);
        let a: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let expected = naive_matmul(&a, &w, 2, 3, 2);
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(2, 3, a).unwrap();
        let w = t.constant(3, 2, w).unwrap();
        let y = t.linear(x, w, None).unwrap();
        for (got, want) in t.value(y).iter().zip(&expected) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_shape_mismatch_names_both() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(1, 3, vec![0.0; 3]).unwrap();
        let w = t.constant(2, 2, vec![0.0; 4]).unwrap();
        match t.linear(x, w, None) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![1, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn attention_rejects_empty_sequence() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let q = t.constant(0, 4, vec![]).unwrap();
        assert!(matches!(t.attention(q, q, q, 2), Err(Error::Empty { .. })));
    }

    #[test]
    fn nonfinite_is_surfaced_at_op_boundary() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let x = t.constant(1, 1, vec![1e300]).unwrap();
        assert!(matches!(t.scale(x, 1e300), Err(Error::NonFinite { op: "scale" })));
        assert!(t.constant(1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn nll_clamps_zero_probability() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let p = t.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let l = t.nll(p, &[1]).unwrap();
        assert!((t.scalar(l) + math::ln(NLL_CLAMP)).abs() < 1e-12);
        assert_eq!(t.clamp_events(), 1);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let store = ParamStore::new();
        let mut t = Tape::new(&store);
        let table = t.constant(3, 2, vec![0.0; 6]).unwrap();
        assert_eq!(
            t.gather(table, &[0, 3]),
            Err(Error::TokenOutOfRange { id: 3, vocab: 3 })
        );
    }
}

//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Each node records the op that produced it; [`Tape::backward`] walks the
//! nodes in reverse and accumulates parameter gradients into a
//! [`Gradients`] buffer. Tapes borrow the [`ParamStore`] immutably, so many
//! tapes (one per sequence) can be alive at once over the same parameters.

use std::collections::HashMap;

use crate::tensor::{axpy, dot, matmul_acc, t_matmul_acc, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

/// Per-parameter gradient accumulator, lazily allocated.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    fn slot(&mut self, id: ParamId, shape: (usize, usize)) -> &mut Matrix {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        self.grads[id.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        self.slot(id, g.shape()).add_assign(g);
    }

    /// Adds `other` into `self`; parameter order is fixed so the result does
    /// not depend on which thread produced which part.
    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(Matrix::sum_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which logit columns a cross-entropy row ignores.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Exclude {
    None,
    /// The same column in every row (the padding item).
    Column(usize),
    /// One column per row (self-similarity in pooled InfoNCE).
    PerRow(Vec<usize>),
}

impl Exclude {
    #[inline]
    fn excludes(&self, row: usize, col: usize) -> bool {
        match self {
            Exclude::None => false,
            Exclude::Column(c) => *c == col,
            Exclude::PerRow(cs) => cs[row] == col,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    LeakyRelu(Var, f64),
    Mask(Var, Matrix),
    SoftmaxRows(Var),
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
    CrossEntropySum {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Option<Matrix>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const LAYER_NORM_EPS: f64 = 1e-12;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(64),
            param_nodes: HashMap::new(),
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.get(id),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    /// Input or constant; its gradient is readable after `backward`.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        let mut out = self.value(a).clone();
        assert_eq!(r.shape(), (1, out.cols()), "add_row shape");
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o += sv;
        }
        self.push(out, Op::AddScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale_assign(c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_t(self.value(b));
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Var {
        let s = self.value(src);
        let mut out = Matrix::zeros(ids.len(), s.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(s.row(id));
        }
        self.push(out, Op::GatherRows(src, ids.to_vec()))
    }

    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.rows(), "slice_rows out of range");
        let out = Matrix::from_vec(
            len,
            s.cols(),
            s.data()[start * s.cols()..(start + len) * s.cols()].to_vec(),
        );
        self.push(out, Op::SliceRows(src, start))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Var {
        let s = self.value(src);
        assert!(start + len <= s.cols(), "slice_cols out of range");
        let mut out = Matrix::zeros(s.rows(), len);
        for r in 0..s.rows() {
            out.row_mut(r)
                .copy_from_slice(&s.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(src, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols();
        let rows: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows width");
            data.extend_from_slice(m.data());
        }
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * inv;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = g[c] * xhat.get(r, c) + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask(&mut self, x: Var, mask: Matrix) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(out.shape(), mask.shape(), "mask shape");
        for (o, m) in out.data_mut().iter_mut().zip(mask.data()) {
            *o *= m;
        }
        self.push(out, Op::Mask(x, mask))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for r in 0..out.rows() {
            crate::tensor::softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Multi-head scaled dot-product attention where row `i` attends to rows
    /// `0..=i`. `q`, `k`, `v` are `T × d` with heads laid out contiguously
    /// along the columns.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = qm.shape();
        assert_eq!(km.shape(), (t, d));
        assert_eq!(vm.shape(), (t, d));
        assert_eq!(d % heads, 0, "dim must divide into heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(t, d);
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p = Matrix::zeros(t, t);
            for i in 0..t {
                let qi = &qm.row(i)[cols.clone()];
                let prow = p.row_mut(i);
                for j in 0..=i {
                    prow[j] = dot(qi, &km.row(j)[cols.clone()]) * scale;
                }
                crate::tensor::softmax_in_place(&mut prow[..=i]);
                let orow = &mut out.row_mut(i)[cols.clone()];
                for j in 0..=i {
                    axpy(prow[j], &vm.row(j)[cols.clone()], orow);
                }
            }
            probs.push(p);
        }
        self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        )
    }

    /// `Σ_rows −logit[target] + logsumexp(logits over non-excluded columns)`,
    /// returned as a 1×1 node.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize], exclude: Exclude) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len(), "one target per row");
        let mut probs = Matrix::zeros(l.rows(), l.cols());
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(!exclude.excludes(r, t), "target column is excluded");
            let row = l.row(r);
            let max = row
                .iter()
                .enumerate()
                .filter(|&(c, _)| !exclude.excludes(r, c))
                .map(|(_, &x)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            let pr = probs.row_mut(r);
            let mut sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                if !exclude.excludes(r, c) {
                    let e = (x - max).exp();
                    pr[c] = e;
                    sum += e;
                }
            }
            for p in pr.iter_mut() {
                *p /= sum;
            }
            total += -(row[t] - max) + sum.ln();
        }
        self.push(
            Matrix::scalar(total),
            Op::CrossEntropySum {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms.iter().map(|&(v, w)| w * self.scalar(v)).sum();
        self.push(Matrix::scalar(total), Op::WeightedSum(terms.to_vec()))
    }

    /// Propagates `seeds` (output gradients) back through the tape.
    /// Parameter gradients are added into `grads`; the returned buffer holds
    /// gradients of leaf nodes.
    pub fn backward(&self, seeds: &[(Var, Matrix)], grads: &mut Gradients) -> NodeGrads {
        let mut gs: Vec<Option<Matrix>> = Vec::new();
        gs.resize_with(self.nodes.len(), || None);
        let mut last = 0;
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed shape");
            acc(&mut gs, *v, g);
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = gs[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    gs[i] = Some(g);
                }
                Op::Param(id) => grads.accumulate(*id, &g),
                Op::Add(a, b) => {
                    acc(&mut gs, *a, &g);
                    acc(&mut gs, *b, &g);
                }
                Op::AddRow(a, row) => {
                    let mut rg = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), rg.data_mut());
                    }
                    acc(&mut gs, *row, &rg);
                    acc_owned(&mut gs, *a, g);
                }
                Op::AddScalar(a, s) => {
                    let sum: f64 = g.data().iter().sum();
                    acc(&mut gs, *s, &Matrix::scalar(sum));
                    acc_owned(&mut gs, *a, g);
                }
                Op::Scale(a, c) => {
                    let mut g = g;
                    g.scale_assign(*c);
                    acc_owned(&mut gs, *a, g);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    matmul_acc_into(&mut gs, *a, av.shape(), |out| {
                        // dA += G · Bᵀ
                        for r in 0..g.rows() {
                            let grow = g.row(r);
                            let orow = out.row_mut(r);
                            for (k, o) in orow.iter_mut().enumerate() {
                                *o += dot(grow, bv.row(k));
                            }
                        }
                    });
                    matmul_acc_into(&mut gs, *b, bv.shape(), |out| t_matmul_acc(av, &g, out));
                }
                Op::MatMulT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (ashape, bshape) = (av.shape(), bv.shape());
                    // out = A·Bᵀ: dA += G·B, dB += Gᵀ·A
                    matmul_acc_into(&mut gs, *a, ashape, |out| matmul_acc(&g, bv, out));
                    matmul_acc_into(&mut gs, *b, bshape, |out| t_matmul_acc(&g, av, out));
                }
                Op::Transpose(a) => acc_owned(&mut gs, *a, g.transpose()),
                Op::GatherRows(src, ids) => {
                    let shape = self.value(*src).shape();
                    let dst = slot(&mut gs, *src, shape);
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, g.row(r), dst.row_mut(id));
                    }
                }
                Op::SliceRows(src, start) => {
                    let shape = self.value(*src).shape();
                    let dst = slot(&mut gs, *src, shape);
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), dst.row_mut(start + r));
                    }
                }
                Op::SliceCols(src, start) => {
                    let shape = self.value(*src).shape();
                    let dst = slot(&mut gs, *src, shape);
                    for r in 0..g.rows() {
                        axpy(1.0, g.row(r), &mut dst.row_mut(r)[*start..start + g.cols()]);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let piece = Matrix::from_vec(
                            rows,
                            cols,
                            g.data()[offset * cols..(offset + rows) * cols].to_vec(),
                        );
                        acc_owned(&mut gs, p, piece);
                        offset += rows;
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).data();
                    let (rows, cols) = g.shape();
                    let mut dgain = Matrix::zeros(1, cols);
                    let mut dbias = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let grow = g.row(r);
                        let xh = xhat.row(r);
                        for c in 0..cols {
                            dgain.data_mut()[c] += grow[c] * xh[c];
                            dbias.data_mut()[c] += grow[c];
                            dxhat[c] = grow[c] * gv[c];
                        }
                        let sum_d: f64 = dxhat.iter().sum();
                        let sum_dx: f64 = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let inv = inv_std[r];
                        let dxr = dx.row_mut(r);
                        for c in 0..cols {
                            dxr[c] = inv / n * (n * dxhat[c] - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc_owned(&mut gs, *x, dx);
                    acc(&mut gs, *gain, &dgain);
                    acc(&mut gs, *bias, &dbias);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut g = g;
                    for (gi, xi) in g.data_mut().iter_mut().zip(xv.data()) {
                        *gi *= gelu_grad(*xi);
                    }
                    acc_owned(&mut gs, *x, g);
                }
                Op::LeakyRelu(x, slope) => {
                    let xv = self.value(*x);
                    let mut g = g;
                    for (gi, xi) in g.data_mut().iter_mut().zip(xv.data()) {
                        if *xi < 0.0 {
                            *gi *= slope;
                        }
                    }
                    acc_owned(&mut gs, *x, g);
                }
                Op::Mask(x, mask) => {
                    let mut g = g;
                    for (gi, m) in g.data_mut().iter_mut().zip(mask.data()) {
                        *gi *= m;
                    }
                    acc_owned(&mut gs, *x, g);
                }
                Op::SoftmaxRows(x) => {
                    let y = self.nodes[i].value.as_ref().expect("softmax value");
                    let mut dx = g;
                    for r in 0..dx.rows() {
                        let yr = y.row(r);
                        let s = dot(dx.row(r), yr);
                        for (d, yv) in dx.row_mut(r).iter_mut().zip(yr) {
                            *d = yv * (*d - s);
                        }
                    }
                    acc_owned(&mut gs, *x, dx);
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qm, km, vm) = (self.value(*q), self.value(*k), self.value(*v));
                    let (t, d) = qm.shape();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Matrix::zeros(t, d);
                    let mut dk = Matrix::zeros(t, d);
                    let mut dv = Matrix::zeros(t, d);
                    let mut ds = vec![0.0; t];
                    for (h, p) in probs.iter().enumerate() {
                        let cols = h * dh..(h + 1) * dh;
                        for i in 0..t {
                            let go = &g.row(i)[cols.clone()];
                            let prow = p.row(i);
                            let mut weighted = 0.0;
                            for j in 0..=i {
                                axpy(prow[j], go, &mut dv.row_mut(j)[cols.clone()]);
                                let dp = dot(go, &vm.row(j)[cols.clone()]);
                                ds[j] = dp;
                                weighted += prow[j] * dp;
                            }
                            for j in 0..=i {
                                let s = prow[j] * (ds[j] - weighted) * scale;
                                if s != 0.0 {
                                    axpy(s, &km.row(j)[cols.clone()], &mut dq.row_mut(i)[cols.clone()]);
                                    axpy(s, &qm.row(i)[cols.clone()], &mut dk.row_mut(j)[cols.clone()]);
                                }
                            }
                        }
                    }
                    acc_owned(&mut gs, *q, dq);
                    acc_owned(&mut gs, *k, dk);
                    acc_owned(&mut gs, *v, dv);
                }
                Op::CrossEntropySum {
                    logits,
                    targets,
                    probs,
                    ..
                } => {
                    let scale = g.data()[0];
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        let row = dl.row_mut(r);
                        row[t] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= scale;
                        }
                    }
                    acc_owned(&mut gs, *logits, dl);
                }
                Op::WeightedSum(terms) => {
                    let s = g.data()[0];
                    for &(v, w) in terms {
                        acc(&mut gs, v, &Matrix::scalar(w * s));
                    }
                }
            }
        }
        NodeGrads(gs)
    }
}

/// Gradients of leaf nodes after a backward pass.
pub struct NodeGrads(Vec<Option<Matrix>>);

impl NodeGrads {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.0.get(v.0).and_then(Option::as_ref)
    }
}

fn slot(gs: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    gs[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn acc(gs: &mut [Option<Matrix>], v: Var, g: &Matrix) {
    match &mut gs[v.0] {
        Some(existing) => existing.add_assign(g),
        None => gs[v.0] = Some(g.clone()),
    }
}

fn acc_owned(gs: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut gs[v.0] {
        Some(existing) => existing.add_assign(&g),
        None => gs[v.0] = Some(g),
    }
}

fn matmul_acc_into(
    gs: &mut [Option<Matrix>],
    v: Var,
    shape: (usize, usize),
    f: impl FnOnce(&mut Matrix),
) {
    f(slot(gs, v, shape));
}

//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Graph`] is a tape built during the forward pass. Each scene gets its
//! own graph; parameter gradients come back as a [`Grads`] that the trainer
//! sums across a batch in a fixed order, so training is deterministic.

use crate::tensor::{softmax_in_place, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter matrices of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Mat] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Mat] {
        &mut self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Mat::len).sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { values: self.values.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect() }
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub values: Vec<Mat>,
}

impl Grads {
    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in &mut self.values {
            for v in &mut m.data {
                *v *= s;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.values.iter().map(Mat::squared_norm).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Mat::is_finite)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Multi-head attention configuration carried by the fused attention op.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSpec {
    pub heads: usize,
    pub causal: bool,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    Reshape(Var),
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<Mat> },
}

struct Node {
    value: Option<Mat>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(512) }
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// An input whose gradient is recorded and can be read after `backward`.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = self.value(a);
        let rv = self.value(row);
        assert_eq!(rv.rows, 1, "add_row expects a row vector");
        assert_eq!(av.cols, rv.cols, "add_row width mismatch");
        let mut out = av.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Mat::from_vec(av.rows, av.cols, data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.cols].copy_from_slice(pv.row(r));
            }
            offset += pv.cols;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(Mat::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_cols(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice_rows(start, len);
        let ng = self.ng(a);
        self.push(out, Op::SliceRows(a, start), ng)
    }

    /// Column-wise mean, producing a `1×c` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut out = Mat::zeros(1, av.cols);
        for r in 0..av.rows {
            for (o, x) in out.data.iter_mut().zip(av.row(r)) {
                *o += x;
            }
        }
        let n = av.rows as f64;
        for o in &mut out.data {
            *o /= n;
        }
        let ng = self.ng(a);
        self.push(out, Op::MeanRows(a), ng)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let ng = self.ng(a);
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a), ng)
    }

    /// Same data, new shape (row-major order is preserved).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), rows * cols, "reshape size mismatch");
        let out = Mat::from_vec(rows, cols, av.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Scaled dot-product attention of `q` over `k`/`v`, split into
    /// `spec.heads` column blocks. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.cols, kv.cols, "attention q/k width mismatch");
        assert_eq!(kv.rows, vv.rows, "attention k/v length mismatch");
        assert_eq!(qv.cols % spec.heads, 0, "width not divisible by heads");
        assert_eq!(vv.cols % spec.heads, 0, "value width not divisible by heads");
        let dk = qv.cols / spec.heads;
        let dv = vv.cols / spec.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (nq, nk) = (qv.rows, kv.rows);
        let mut out = Mat::zeros(nq, vv.cols);
        let mut probs = Vec::with_capacity(spec.heads);
        for h in 0..spec.heads {
            let mut p = Mat::zeros(nq, nk);
            for i in 0..nq {
                let qi = &qv.row(i)[h * dk..(h + 1) * dk];
                let limit = if spec.causal { (i + 1).min(nk) } else { nk };
                let prow = p.row_mut(i);
                for (j, pj) in prow.iter_mut().enumerate().take(limit) {
                    let kj = &kv.row(j)[h * dk..(h + 1) * dk];
                    *pj = crate::tensor::dot(qi, kj) * scale;
                }
                softmax_in_place(&mut prow[..limit]);
                for pj in prow.iter_mut().skip(limit) {
                    *pj = 0.0;
                }
            }
            for i in 0..nq {
                let orow = &mut out.data[i * vv.cols + h * dv..i * vv.cols + (h + 1) * dv];
                for j in 0..nk {
                    let w = p.get(i, j);
                    if w == 0.0 {
                        continue;
                    }
                    for (o, x) in orow.iter_mut().zip(&vv.row(j)[h * dv..(h + 1) * dv]) {
                        *o += w * x;
                    }
                }
            }
            probs.push(p);
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, ng)
    }

    /// Per-head attention probabilities of an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Runs the reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pgrads = self.params.zero_grads();
        grads[loss.0] = Some(Mat::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Mat>>, target: Var, g: Mat| {
                if !self.nodes[target.0].needs_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(existing) => existing.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gout);
                    continue;
                }
                Op::Param(id) => pgrads.values[id.0].add_assign(&gout),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        send(&mut grads, *a, gout.matmul_t(self.value(*b)));
                    }
                    if self.ng(*b) {
                        send(&mut grads, *b, self.value(*a).t_matmul(&gout));
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, gout.clone());
                    send(&mut grads, *a, gout);
                }
                Op::AddRow(a, row) => {
                    if self.ng(*row) {
                        let mut rg = Mat::zeros(1, gout.cols);
                        for r in 0..gout.rows {
                            for (o, x) in rg.data.iter_mut().zip(gout.row(r)) {
                                *o += x;
                            }
                        }
                        send(&mut grads, *row, rg);
                    }
                    send(&mut grads, *a, gout);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, gout.scale(-1.0));
                    send(&mut grads, *a, gout);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let d = gout.data.iter().zip(&bv.data).map(|(g, y)| g * y).collect();
                        send(&mut grads, *a, Mat::from_vec(gout.rows, gout.cols, d));
                    }
                    if self.ng(*b) {
                        let d = gout.data.iter().zip(&av.data).map(|(g, x)| g * x).collect();
                        send(&mut grads, *b, Mat::from_vec(gout.rows, gout.cols, d));
                    }
                }
                Op::Scale(a, s) => send(&mut grads, *a, gout.scale(*s)),
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let d = gout.data.iter().zip(&y.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                    send(&mut grads, *a, Mat::from_vec(gout.rows, gout.cols, d));
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let d = gout.data.iter().zip(&y.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                    send(&mut grads, *a, Mat::from_vec(gout.rows, gout.cols, d));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = gout
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(&mut grads, *a, Mat::from_vec(gout.rows, gout.cols, d));
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = self.value(*p).cols;
                        if self.ng(*p) {
                            send(&mut grads, *p, gout.slice_cols(offset, w));
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let h = self.value(*p).rows;
                        if self.ng(*p) {
                            send(&mut grads, *p, gout.slice_rows(offset, h));
                        }
                        offset += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut g = Mat::zeros(r, c);
                    for i in 0..r {
                        g.row_mut(i)[*start..*start + gout.cols].copy_from_slice(gout.row(i));
                    }
                    send(&mut grads, *a, g);
                }
                Op::SliceRows(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut g = Mat::zeros(r, c);
                    g.data[start * c..(start + gout.rows) * c].copy_from_slice(&gout.data);
                    send(&mut grads, *a, g);
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let mut g = Mat::zeros(r, c);
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for (o, x) in g.row_mut(i).iter_mut().zip(&gout.data) {
                            *o = x * inv;
                        }
                    }
                    send(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    send(&mut grads, *a, Mat::filled(r, c, gout.data[0]));
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(*a);
                    send(&mut grads, *a, Mat::from_vec(r, c, gout.data));
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *spec, probs, &gout);
                    send(&mut grads, *q, gq);
                    send(&mut grads, *k, gk);
                    send(&mut grads, *v, gv);
                }
            }
        }
        Gradients { nodes: grads, params: pgrads }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: &[Mat],
        gout: &Mat,
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let dk = qv.cols / spec.heads;
        let dv = vv.cols / spec.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let (nq, nk) = (qv.rows, kv.rows);
        let mut gq = Mat::zeros(nq, qv.cols);
        let mut gk = Mat::zeros(nk, kv.cols);
        let mut gv = Mat::zeros(nk, vv.cols);
        for (h, p) in probs.iter().enumerate() {
            // dV = Pᵀ dO ; dP = dO Vᵀ
            let mut dp = Mat::zeros(nq, nk);
            for i in 0..nq {
                let go = &gout.row(i)[h * dv..(h + 1) * dv];
                for j in 0..nk {
                    let w = p.get(i, j);
                    let vj = &vv.row(j)[h * dv..(h + 1) * dv];
                    dp.set(i, j, crate::tensor::dot(go, vj));
                    if w != 0.0 {
                        let gvj = &mut gv.data[j * vv.cols + h * dv..j * vv.cols + (h + 1) * dv];
                        for (o, g) in gvj.iter_mut().zip(go) {
                            *o += w * g;
                        }
                    }
                }
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P))
            for i in 0..nq {
                let prow = p.row(i);
                let dprow = dp.row_mut(i);
                let s: f64 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (d, pv) in dprow.iter_mut().zip(prow) {
                    *d = pv * (*d - s) * scale;
                }
            }
            for i in 0..nq {
                for j in 0..nk {
                    let ds = dp.get(i, j);
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &kv.row(j)[h * dk..(h + 1) * dk];
                    let qi = &qv.row(i)[h * dk..(h + 1) * dk];
                    let gqi = &mut gq.data[i * qv.cols + h * dk..i * qv.cols + (h + 1) * dk];
                    for (o, x) in gqi.iter_mut().zip(kj) {
                        *o += ds * x;
                    }
                    let gkj = &mut gk.data[j * kv.cols + h * dk..j * kv.cols + (h + 1) * dk];
                    for (o, x) in gkj.iter_mut().zip(qi) {
                        *o += ds * x;
                    }
                }
            }
        }
        (gq, gk, gv)
    }

    /// Convenience: `x · W + b` for parameters `w` and `b`.
    pub fn affine(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let wv = self.param(w);
        let y = self.matmul(x, wv);
        match b {
            Some(b) => {
                let bv = self.param(b);
                self.add_row(y, bv)
            }
            None => y,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }
}

/// Result of a reverse pass.
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    pub params: Grads,
}

impl Gradients {
    /// Gradient of an `input` leaf, if it received any.
    pub fn of(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }
}

//! Dense row-major matrices and a reverse-mode gradient tape.
//!
//! A [`Graph`] records operations over [`Tensor`] values as they execute.
//! Calling [`Graph::backward`] on a scalar node walks the record in reverse
//! and returns the gradient of that scalar with respect to every parameter
//! that took part in the computation.

use std::rc::Rc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Tensor {
        Tensor::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        gemm(self, false, other, false, &mut out, 0.0);
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `out = op(a)·op(b) + beta·out`, where `op` optionally transposes.
fn gemm(a: &Tensor, trans_a: bool, b: &Tensor, trans_b: bool, out: &mut Tensor, beta: f64) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: the strides above describe exactly the row-major buffers of
    // `a`, `b` and `out`, whose shapes were checked against (m, k, n).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Rows attending to each other: group `g` holds rows
/// `starts[g] + i·stride` for `i < len`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grouping {
    pub starts: Vec<usize>,
    pub stride: usize,
    pub len: usize,
}

impl Grouping {
    /// A single group of `n` consecutive rows.
    pub fn single(n: usize) -> Self {
        Self {
            starts: vec![0],
            stride: 1,
            len: n,
        }
    }

    fn row(&self, g: usize, i: usize) -> usize {
        self.starts[g] + i * self.stride
    }

    fn covered_rows(&self) -> usize {
        self.starts.len() * self.len
    }
}

/// Multi-head scaled dot-product attention within each group.
/// Returns the output and the attention probabilities (group, head, i, j).
pub(crate) fn grouped_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    grouping: &Grouping,
    heads: usize,
) -> (Tensor, Vec<f64>) {
    let width = q.cols;
    let dh = width / heads;
    let len = grouping.len;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Tensor::zeros(q.rows, v.cols);
    let dv = v.cols / heads;
    let mut probs = vec![0.0; grouping.starts.len() * heads * len * len];
    for g in 0..grouping.starts.len() {
        for h in 0..heads {
            let qc = h * dh..(h + 1) * dh;
            let vc = h * dv..(h + 1) * dv;
            for i in 0..len {
                let ri = grouping.row(g, i);
                let qi = &q.row(ri)[qc.clone()];
                let p = &mut probs[((g * heads + h) * len + i) * len..][..len];
                let mut max = f64::NEG_INFINITY;
                for (j, pj) in p.iter_mut().enumerate() {
                    let kj = &k.row(grouping.row(g, j))[qc.clone()];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    *pj = s;
                    max = max.max(s);
                }
                let mut total = 0.0;
                for pj in p.iter_mut() {
                    *pj = (*pj - max).exp();
                    total += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= total;
                }
                let o = &mut out.row_mut(ri)[vc.clone()];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &v.row(grouping.row(g, j))[vc.clone()];
                    for (oc, x) in o.iter_mut().zip(vj) {
                        *oc += pj * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    GatherAdd {
        x: Var,
        table: Var,
        index: Rc<[usize]>,
    },
    Mul(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        grouping: Rc<Grouping>,
        heads: usize,
        probs: Vec<f64>,
    },
    Scale(Var, f64),
    RowScale(Var, Vec<f64>),
    Dropout(Var, Vec<f64>),
    Mse {
        x: Var,
        target: Tensor,
        row_weights: Option<Vec<f64>>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Epsilon inside layer normalization's square root.
pub const LAYER_NORM_EPS: f64 = 1e-9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Recording of one forward computation.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// The leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id), true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self
            .value(a)
            .matmul(self.value(b))
            .expect("matmul shape mismatch");
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let mut value = x.clone();
        value.add_assign(y);
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a 1×n row vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (x, b) = (self.value(a), self.value(bias));
        assert_eq!(b.shape(), (1, x.cols), "bias shape mismatch");
        let mut value = x.clone();
        for r in 0..value.rows {
            for (o, bb) in value.row_mut(r).iter_mut().zip(&b.data) {
                *o += bb;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddRow(a, bias), ng)
    }

    /// `out[r] = x[r] + table[index[r]]`.
    pub fn gather_add(&mut self, x: Var, table: Var, index: Rc<[usize]>) -> Var {
        let (xv, tv) = (self.value(x), self.value(table));
        assert_eq!(xv.cols, tv.cols, "gather_add width mismatch");
        assert_eq!(index.len(), xv.rows, "gather_add index length");
        let mut value = xv.clone();
        for (r, &i) in index.iter().enumerate() {
            for (o, t) in value.row_mut(r).iter_mut().zip(tv.row(i)) {
                *o += t;
            }
        }
        let ng = self.needs(x) || self.needs(table);
        self.push(value, Op::GatherAdd { x, table, index }, ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let value = Tensor::from_vec(x.rows, x.cols, data).unwrap();
        let ng = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// GELU (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(value, Op::Gelu(a), ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (1×n each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let n = xv.cols;
        assert_eq!(g.shape(), (1, n), "layer norm gain shape");
        assert_eq!(b.shape(), (1, n), "layer norm bias shape");
        let mut xhat = Tensor::zeros(xv.rows, n);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut value = Tensor::zeros(xv.rows, n);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let out = value.row_mut(r);
            for c in 0..n {
                out[c] = xh[c] * g.data[c] + b.data[c];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Multi-head scaled dot-product attention restricted to row groups.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, grouping: Rc<Grouping>, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert_eq!(qv.shape(), kv.shape(), "query/key shape mismatch");
        assert_eq!(qv.rows, vv.rows, "value rows mismatch");
        assert!(heads > 0 && qv.cols % heads == 0 && vv.cols % heads == 0);
        assert!(grouping.covered_rows() <= qv.rows);
        let (value, probs) = grouped_attention(qv, kv, vv, &grouping, heads);
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                grouping,
                heads,
                probs,
            },
            ng,
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let ng = self.needs(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// Multiplies row `r` by `factors[r]`.
    pub fn row_scale(&mut self, a: Var, factors: Vec<f64>) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(factors.len(), value.rows, "row_scale length");
        for (r, f) in factors.iter().enumerate() {
            for x in value.row_mut(r) {
                *x *= f;
            }
        }
        let ng = self.needs(a);
        self.push(value, Op::RowScale(a, factors), ng)
    }

    /// Elementwise multiplication by a fixed (already rescaled) mask.
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(mask.len(), x.len(), "dropout mask length");
        let data = x.data.iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::from_vec(x.rows, x.cols, data).unwrap();
        let ng = self.needs(a);
        self.push(value, Op::Dropout(a, mask), ng)
    }

    /// Mean of squared differences to a constant target, optionally weighting
    /// each row. Produces a 1×1 node.
    pub fn mse(&mut self, x: Var, target: Tensor, row_weights: Option<Vec<f64>>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), target.shape(), "mse shape mismatch");
        if let Some(w) = &row_weights {
            assert_eq!(w.len(), xv.rows, "mse weight length");
        }
        let mut total = 0.0;
        for r in 0..xv.rows {
            let w = row_weights.as_ref().map_or(1.0, |w| w[r]);
            let s: f64 = xv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += w * s;
        }
        let value = Tensor::scalar(total / xv.len() as f64);
        let ng = self.needs(x);
        self.push(
            value,
            Op::Mse {
                x,
                target,
                row_weights,
            },
            ng,
        )
    }

    /// Sum of all entries as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let ng = self.needs(a);
        self.push(value, Op::Sum(a), ng)
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Gradients {
            names: (0..self.params.len())
                .map(|i| self.params.name(ParamId(i)).to_string())
                .collect(),
            grads: vec![None; self.params.len()],
        };

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let send = |grads: &mut Vec<Option<Tensor>>, target: Var, delta: Tensor| {
                if !self.nodes[target.0].needs_grad {
                    return;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut da = Tensor::zeros(av.rows, av.cols);
                        gemm(&g, false, bv, true, &mut da, 0.0);
                        send(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Tensor::zeros(bv.rows, bv.cols);
                        gemm(av, true, &g, false, &mut db, 0.0);
                        send(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    send(&mut grads, *b, g.clone());
                    send(&mut grads, *a, g);
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        let mut db = Tensor::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                                *d += x;
                            }
                        }
                        send(&mut grads, *bias, db);
                    }
                    send(&mut grads, *a, g);
                }
                Op::GatherAdd { x, table, index } => {
                    if self.needs(*table) {
                        let tv = self.value(*table);
                        let mut dt = Tensor::zeros(tv.rows, tv.cols);
                        for (r, &i) in index.iter().enumerate() {
                            for (d, v) in dt.row_mut(i).iter_mut().zip(g.row(r)) {
                                *d += v;
                            }
                        }
                        send(&mut grads, *table, dt);
                    }
                    send(&mut grads, *x, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let d = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                        send(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, d)?);
                    }
                    if self.needs(*b) {
                        let d = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                        send(&mut grads, *b, Tensor::from_vec(g.rows, g.cols, d)?);
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let d = g.data.iter().zip(&av.data).map(|(x, y)| x * gelu_grad(*y)).collect();
                    send(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, d)?);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma);
                    let n = g.cols;
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dg = Tensor::zeros(1, n);
                        let mut db = Tensor::zeros(1, n);
                        for r in 0..g.rows {
                            for c in 0..n {
                                dg.data[c] += g.get(r, c) * xhat.get(r, c);
                                db.data[c] += g.get(r, c);
                            }
                        }
                        send(&mut grads, *gamma, dg);
                        send(&mut grads, *beta, db);
                    }
                    if self.needs(*x) {
                        let mut dx = Tensor::zeros(g.rows, n);
                        let mut dxh = vec![0.0; n];
                        for r in 0..g.rows {
                            let xh = xhat.row(r);
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for c in 0..n {
                                dxh[c] = g.get(r, c) * gv.data[c];
                                s1 += dxh[c];
                                s2 += dxh[c] * xh[c];
                            }
                            let k = inv_std[r] / n as f64;
                            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                                *o = k * (n as f64 * dxh[c] - s1 - xh[c] * s2);
                            }
                        }
                        send(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    grouping,
                    heads,
                    probs,
                } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        &g,
                        grouping,
                        *heads,
                        probs,
                    );
                    send(&mut grads, *q, dq);
                    send(&mut grads, *k, dk);
                    send(&mut grads, *v, dv);
                }
                Op::Scale(a, c) => {
                    send(&mut grads, *a, g.map(|x| x * c));
                }
                Op::RowScale(a, factors) => {
                    let mut d = g;
                    for (r, f) in factors.iter().enumerate() {
                        for x in d.row_mut(r) {
                            *x *= f;
                        }
                    }
                    send(&mut grads, *a, d);
                }
                Op::Dropout(a, mask) => {
                    let d = g.data.iter().zip(mask).map(|(x, m)| x * m).collect();
                    send(&mut grads, *a, Tensor::from_vec(g.rows, g.cols, d)?);
                }
                Op::Mse {
                    x,
                    target,
                    row_weights,
                } => {
                    let xv = self.value(*x);
                    let k = 2.0 * g.data[0] / xv.len() as f64;
                    let mut d = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        let w = row_weights.as_ref().map_or(1.0, |w| w[r]);
                        for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                            *o = k * w * (xv.get(r, c) - target.get(r, c));
                        }
                    }
                    send(&mut grads, *x, d);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    send(&mut grads, *a, Tensor::from_vec(av.rows, av.cols, vec![g.data[0]; av.len()])?);
                }
            }
        }
        Ok(out)
    }
}

fn attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    dout: &Tensor,
    grouping: &Grouping,
    heads: usize,
    probs: &[f64],
) -> (Tensor, Tensor, Tensor) {
    let dh = q.cols / heads;
    let dvw = v.cols / heads;
    let len = grouping.len;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Tensor::zeros(q.rows, q.cols);
    let mut dk = Tensor::zeros(k.rows, k.cols);
    let mut dv = Tensor::zeros(v.rows, v.cols);
    let mut dp = vec![0.0; len];
    for g in 0..grouping.starts.len() {
        for h in 0..heads {
            let qc = h * dh..(h + 1) * dh;
            let vc = h * dvw..(h + 1) * dvw;
            for i in 0..len {
                let ri = grouping.row(g, i);
                let p = &probs[((g * heads + h) * len + i) * len..][..len];
                let go = &dout.row(ri)[vc.clone()];
                let mut weighted = 0.0;
                for j in 0..len {
                    let rj = grouping.row(g, j);
                    let vj = &v.row(rj)[vc.clone()];
                    dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                    weighted += p[j] * dp[j];
                    for (d, x) in dv.row_mut(rj)[vc.clone()].iter_mut().zip(go) {
                        *d += p[j] * x;
                    }
                }
                for j in 0..len {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let rj = grouping.row(g, j);
                    for c in qc.clone() {
                        dq.data[ri * q.cols + c] += ds * k.data[rj * k.cols + c];
                        dk.data[rj * k.cols + c] += ds * q.data[ri * q.cols + c];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a parameter that took part in the forward pass.
    pub fn get(&self, id: ParamId) -> Result<&Tensor> {
        self.grads[id.0]
            .as_ref()
            .ok_or_else(|| Error::Unrecorded(self.names[id.0].clone()))
    }

    /// Like [`Gradients::get`] but `None` for parameters absent from the graph.
    pub fn try_get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of parameter `id`.
    fn numeric_grad(params: &mut ParamSet, id: ParamId, f: &dyn Fn(&ParamSet) -> f64) -> Tensor {
        let n = params.get(id).len();
        let shape = params.get(id).shape();
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            let orig = params.get(id).data[i];
            params.get_mut(id).data[i] = orig + 1e-6;
            let up = f(params);
            params.get_mut(id).data[i] = orig - 1e-6;
            let down = f(params);
            params.get_mut(id).data[i] = orig;
            *o = (up - down) / 2e-6;
        }
        Tensor::from_vec(shape.0, shape.1, out).unwrap()
    }

    #[test]
    fn squared_norm_gradient_is_twice_theta() {
        let mut ps = ParamSet::new();
        let theta = ps.add("theta", rand_tensor(3, 4, 1));
        let mut g = Graph::new(&ps);
        let t = g.param(theta);
        let sq = g.mul(t, t);
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        let expected = ps.get(theta).map(|x| 2.0 * x);
        assert_eq!(grads.get(theta).unwrap(), &expected);
    }

    #[test]
    fn unrecorded_parameter_is_an_error() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", rand_tensor(1, 1, 1));
        let b = ps.add("b", rand_tensor(1, 1, 2));
        let mut g = Graph::new(&ps);
        let x = g.param(a);
        let loss = g.sum(x);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_ok());
        assert!(matches!(grads.get(b), Err(Error::Unrecorded(name)) if name == "b"));
    }

    #[test]
    fn uniform_attention_spreads_value_gradient_evenly() {
        let mut ps = ParamSet::new();
        let v = ps.add("v", rand_tensor(4, 3, 3));
        let mut g = Graph::new(&ps);
        let q = g.input(rand_tensor(4, 2, 4));
        let k = g.input(Tensor::from_vec(4, 2, vec![0.3, -0.2].repeat(4)).unwrap());
        let vv = g.param(v);
        let out = g.attention(q, k, vv, Rc::new(Grouping::single(4)), 1);
        let loss = g.sum(out);
        let grads = g.backward(loss).unwrap();
        for x in grads.get(v).unwrap().data() {
            assert_relative_eq!(*x, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn layer_norm_normalizes_rows() {
        let mut ps = ParamSet::new();
        let gamma = ps.add("g", Tensor::from_vec(1, 6, vec![1.0; 6]).unwrap());
        let beta = ps.add("b", Tensor::zeros(1, 6));
        let mut g = Graph::new(&ps);
        let x = g.input(rand_tensor(5, 6, 9).map(|v| 40.0 * v + 3.0));
        let (gv, bv) = (g.param(gamma), g.param(beta));
        let y = g.layer_norm(x, gv, bv);
        let out = g.value(y);
        for r in 0..out.rows() {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 6.0;
            let sd = (row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 6.0).sqrt();
            assert!(mean.abs() <= 1e-10);
            assert!((sd - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", rand_tensor(3, 4, 10));
        let b = ps.add("b", rand_tensor(1, 4, 11));
        let table = ps.add("table", rand_tensor(2, 4, 12));
        let gamma = ps.add("gamma", rand_tensor(1, 4, 13).map(|x| 1.0 + 0.3 * x));
        let beta = ps.add("beta", rand_tensor(1, 4, 14));
        let x0 = rand_tensor(6, 3, 15);
        let target = rand_tensor(6, 4, 16);
        let index: Rc<[usize]> = Rc::from(vec![0, 1, 0, 1, 1, 0]);
        let grouping = Rc::new(Grouping {
            starts: vec![0, 1],
            stride: 2,
            len: 3,
        });
        let mask: Vec<f64> = (0..24).map(|i| if i % 5 == 0 { 0.0 } else { 1.25 }).collect();
        let forward = |ps: &ParamSet| -> (f64, Option<Gradients>) {
            let mut g = Graph::new(ps);
            let x = g.input(x0.clone());
            let wv = g.param(w);
            let h = g.matmul(x, wv);
            let bv = g.param(b);
            let h = g.add_row(h, bv);
            let tv = g.param(table);
            let h = g.gather_add(h, tv, index.clone());
            let h = g.gelu(h);
            let (gv, btv) = (g.param(gamma), g.param(beta));
            let n = g.layer_norm(h, gv, btv);
            let a = g.attention(n, h, n, grouping.clone(), 2);
            let a = g.dropout(a, mask.clone());
            let a = g.add(a, h);
            let a = g.row_scale(a, vec![1.0, 0.5, 2.0, -1.0, 0.3, 1.5]);
            let m = g.mse(a, target.clone(), Some(vec![1.0, 2.0, 0.5, 1.0, 1.0, 3.0]));
            let s = g.mul(a, a);
            let s = g.sum(s);
            let s = g.scale(s, 0.01);
            let loss = g.add(m, s);
            let value = g.value(loss).get(0, 0);
            (value, Some(g.backward(loss).unwrap()))
        };
        let (_, grads) = forward(&ps);
        let grads = grads.unwrap();
        for id in ps.clone().ids() {
            let analytic = grads.get(id).unwrap().clone();
            let numeric = numeric_grad(&mut ps, id, &|p| forward(p).0);
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let scale = a.abs().max(n.abs()).max(1e-3);
                assert!((a - n).abs() / scale < 1e-6, "{}: {a} vs {n}", ps.name(id));
            }
        }
    }
}

//! Reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] records operations on a tape; [`Graph::backward`] walks it in
//! reverse and returns gradients for every parameter leaf that requires
//! them. Parameters live in a [`ParamStore`] and enter a graph through
//! [`Graph::param`], which caches one leaf per parameter.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Tensor = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named parameter tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        id
    }

    pub fn reindex(&mut self) {
        self.by_name = self
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), ParamId(i)))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Gradients indexed by parameter id; `None` where nothing flowed.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => *m += t,
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, f: f64) {
        for t in self.grads.iter_mut().flatten() {
            *t *= f;
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global L2 norm is at most `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Affine(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LogSigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    StackRows(Vec<usize>),
    Gather(usize, Vec<usize>),
    MulConst(usize, Tensor),
    PickSum(usize, Vec<(usize, usize, f64)>),
    Sum(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    y
}

fn log_softmax_rows(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    y
}

fn row_sums(t: &Tensor) -> Tensor {
    t.sum_axis(Axis(1)).insert_axis(Axis(1))
}

fn col_sums(t: &Tensor) -> Tensor {
    t.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// An operation tape bound to a parameter store.
pub struct Graph<'p> {
    store: &'p ParamStore,
    trainable: Option<&'p [bool]>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    /// Every parameter is trainable.
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            trainable: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    /// Only parameters with `mask[id] == true` receive gradients.
    pub fn with_trainable(store: &'p ParamStore, mask: &'p [bool]) -> Self {
        assert_eq!(mask.len(), store.len());
        Graph {
            store,
            trainable: Some(mask),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let ng = self.trainable.map(|m| m[id.0]).unwrap_or(true);
        let v = self.push(self.store.get(id).clone(), Op::Param(id), ng);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::MatMul(a.0, b.0), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::MatMulT(a.0, b.0), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Sub(a.0, b.0), ng)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let v = self.value(a) + self.value(row);
        let ng = self.ng(a.0) || self.ng(row.0);
        self.push(v, Op::AddRow(a.0, row.0), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let ng = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Mul(a.0, b.0), ng)
    }

    /// `alpha · a + beta`.
    pub fn affine(&mut self, a: Var, alpha: f64, beta: f64) -> Var {
        let v = self.value(a).mapv(|x| alpha * x + beta);
        let ng = self.ng(a.0);
        self.push(v, Op::Affine(a.0, alpha), ng)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        self.affine(a, f, 0.0)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let ng = self.ng(a.0);
        self.push(v, Op::Tanh(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let ng = self.ng(a.0);
        self.push(v, Op::Sigmoid(a.0), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let ng = self.ng(a.0);
        self.push(v, Op::Gelu(a.0), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let ng = self.ng(a.0);
        self.push(v, Op::SoftmaxRows(a.0), ng)
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        let ng = self.ng(a.0);
        self.push(v, Op::LogSoftmaxRows(a.0), ng)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(log_sigmoid);
        let ng = self.ng(a.0);
        self.push(v, Op::LogSigmoid(a.0), ng)
    }

    /// Row-wise layer normalization with `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x.0) || self.ng(gamma.0) || self.ng(beta.0);
        self.push(
            v,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let ng = self.ng(a.0);
        self.push(v, Op::SliceCols(a.0, start), ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(a.0);
        self.push(v, Op::SliceRows(a.0, start), ng)
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        self.slice_rows(a, i, i + 1)
    }

    pub fn stack_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts agree");
        let ng = parts.iter().any(|p| self.ng(p.0));
        self.push(v, Op::StackRows(parts.iter().map(|p| p.0).collect()), ng)
    }

    /// Rows of `table` at `indices`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Var {
        let t = self.value(table);
        let mut v = Tensor::zeros((indices.len(), t.ncols()));
        for (r, &i) in indices.iter().enumerate() {
            v.row_mut(r).assign(&t.row(i));
        }
        let ng = self.ng(table.0);
        self.push(v, Op::Gather(table.0, indices.to_vec()), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let v = self.value(a) * &c;
        let ng = self.ng(a.0);
        self.push(v, Op::MulConst(a.0, c), ng)
    }

    /// `Σ w · a[r, c]` over `picks`, as a `1 × 1` tensor.
    pub fn pick_sum(&mut self, a: Var, picks: Vec<(usize, usize, f64)>) -> Var {
        let av = self.value(a);
        let total: f64 = picks.iter().map(|&(r, c, w)| w * av[[r, c]]).sum();
        let ng = self.ng(a.0);
        self.push(Tensor::from_elem((1, 1), total), Op::PickSum(a.0, picks), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        let ng = self.ng(a.0);
        self.push(Tensor::from_elem((1, 1), total), Op::Sum(a.0), ng)
    }

    /// Sum of `1 × 1` scalars.
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut it = parts.iter();
        let first = *it.next().expect("at least one term");
        it.fold(first, |acc, &p| self.add(acc, p))
    }

    /// Back-propagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::from_elem((1, 1), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(t) => *t += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let ng = |j: usize| self.nodes[j].needs_grad;
            let val = |j: usize| &self.nodes[j].value;
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.grads[id.0] = Some(g),
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.dot(val(*b)));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, g.t().dot(val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if ng(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*b) {
                        acc(&mut grads, *b, -&g);
                    }
                    if ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, r) => {
                    if ng(*r) {
                        acc(&mut grads, *r, col_sums(&g));
                    }
                    if ng(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, &g * val(*b));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, &g * val(*a));
                    }
                }
                Op::Affine(a, alpha) => acc(&mut grads, *a, g * *alpha),
                Op::Tanh(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, y| *d *= 1.0 - y * y);
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, x| *d *= gelu_grad(*x));
                    acc(&mut grads, *a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = row_sums(&(&g * y));
                    acc(&mut grads, *a, y * &(g - dot));
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let total = row_sums(&g);
                    acc(&mut grads, *a, g - p * total);
                }
                Op::LogSigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(val(*a), |d, x| *d *= sigmoid(-*x));
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if ng(*gamma) {
                        acc(&mut grads, *gamma, col_sums(&(&g * xhat)));
                    }
                    if ng(*beta) {
                        acc(&mut grads, *beta, col_sums(&g));
                    }
                    if ng(*x) {
                        let dxhat = &g * val(*gamma);
                        let n = xhat.ncols() as f64;
                        let mut dx = Tensor::zeros(xhat.raw_dim());
                        for r in 0..xhat.nrows() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let sum_d = dh.sum();
                            let sum_dx = dh.dot(&xh);
                            let is = inv_std[r];
                            for c in 0..xhat.ncols() {
                                dx[[r, c]] = is / n * (n * dh[c] - sum_d - xh[c] * sum_dx);
                            }
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if ng(p) {
                            acc(&mut grads, p, g.slice(s![.., c..c + w]).to_owned());
                        }
                        c += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Tensor::zeros(val(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::SliceRows(a, start) => {
                    let mut d = Tensor::zeros(val(*a).raw_dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::StackRows(parts) => {
                    let mut r = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        if ng(p) {
                            acc(&mut grads, p, g.slice(s![r..r + h, ..]).to_owned());
                        }
                        r += h;
                    }
                }
                Op::Gather(t, indices) => {
                    let mut d = Tensor::zeros(val(*t).raw_dim());
                    for (r, &i) in indices.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *t, d);
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, g * c),
                Op::PickSum(a, picks) => {
                    let go = g[[0, 0]];
                    let mut d = Tensor::zeros(val(*a).raw_dim());
                    for &(r, c, w) in picks {
                        d[[r, c]] += w * go;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let go = g[[0, 0]];
                    acc(&mut grads, *a, Tensor::from_elem(val(*a).raw_dim(), go));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Checks every parameter scalar against central differences.
    fn check<F>(store: &mut ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let grads = {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root)
        };
        let h = 1e-5;
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.get(id).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + h;
                    let up = {
                        let mut g = Graph::new(store);
                        let v = f(&mut g);
                        g.scalar(v)
                    };
                    store.get_mut(id)[[r, c]] = orig - h;
                    let down = {
                        let mut g = Graph::new(store);
                        let v = f(&mut g);
                        g.scalar(v)
                    };
                    store.get_mut(id)[[r, c]] = orig;
                    let num = (up - down) / (2.0 * h);
                    let ana = grads.get(id).map(|t| t[[r, c]]).unwrap_or(0.0);
                    let denom = num.abs().max(ana.abs()).max(1e-6);
                    assert!(
                        (num - ana).abs() / denom < 1e-5,
                        "{}[{r},{c}]: numeric {num} analytic {ana}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn elementwise_and_matmul_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let a = store.add("a", rand_tensor(&mut rng, 3, 4));
        let b = store.add("b", rand_tensor(&mut rng, 4, 2));
        let c = store.add("c", rand_tensor(&mut rng, 1, 2));
        let d = store.add("d", rand_tensor(&mut rng, 5, 4));
        check(&mut store, |g| {
            let a = g.param(a);
            let b = g.param(b);
            let c = g.param(c);
            let d = g.param(d);
            let x = g.matmul(a, b);
            let x = g.add_row(x, c);
            let t = g.tanh(x);
            let s = g.sigmoid(x);
            let m = g.mul(t, s);
            let e = g.gelu(m);
            let om = g.one_minus(e);
            let y = g.matmul_t(a, d);
            let ys = g.softmax_rows(y);
            let cat = g.concat_cols(&[om, ys]);
            let sl = g.slice_cols(cat, 1, 5);
            let r = g.row(sl, 2);
            let st = g.stack_rows(&[r, sl]);
            let sq = g.mul(st, st);
            g.sum(sq)
        });
    }

    #[test]
    fn losses_and_layer_norm_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_tensor(&mut rng, 3, 5));
        let gm = store.add("gamma", rand_tensor(&mut rng, 1, 5));
        let bt = store.add("beta", rand_tensor(&mut rng, 1, 5));
        let emb = store.add("emb", rand_tensor(&mut rng, 6, 5));
        check(&mut store, |g| {
            let x = g.param(x);
            let gm = g.param(gm);
            let bt = g.param(bt);
            let emb = g.param(emb);
            let e = g.gather_rows(emb, &[1, 4, 1]);
            let s = g.add(x, e);
            let ln = g.layer_norm(s, gm, bt, 1e-12);
            let lsm = g.log_softmax_rows(ln);
            let ls = g.log_sigmoid(ln);
            let neg = g.scale(ln, -1.0);
            let lsn = g.log_sigmoid(neg);
            let masked = g.mul_const(lsn, Tensor::from_elem((3, 5), 2.0));
            let p1 = g.pick_sum(lsm, vec![(0, 1, -1.0), (2, 4, -0.5)]);
            let p2 = g.pick_sum(ls, vec![(1, 1, 0.3)]);
            let p3 = g.sum(masked);
            let d = g.sub(p1, p2);
            g.add_all(&[d, p3])
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[1.0, 2.0]]);
        let b = store.add("b", array![[3.0, 4.0]]);
        let mask = vec![true, false];
        let mut g = Graph::with_trainable(&store, &mask);
        let av = g.param(a);
        let bv = g.param(b);
        let m = g.mul(av, bv);
        let root = g.sum(m);
        let grads = g.backward(root);
        assert_eq!(grads.get(a).unwrap(), &array![[3.0, 4.0]]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn softmax_is_normalized_and_stable() {
        let y = softmax_rows(&array![[1000.0, 1000.0, 0.0], [-5.0, 0.0, 5.0]]);
        for row in y.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((y[[0, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn clip_global_norm() {
        let mut gr = Gradients {
            grads: vec![Some(array![[3.0, 4.0]]), None],
        };
        assert_eq!(gr.clip_global_norm(1.0), 5.0);
        assert!((gr.global_norm() - 1.0).abs() < 1e-12);
    }
}

//! Tape-based reverse-mode differentiation over `f64` matrices.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use super::kernels;
use super::params::{ParamId, ParamStore};
use crate::error::{Result, TagsError};
use crate::volume::Shape3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Im2Col(Var, Shape3),
    Resize(Var, Shape3, Shape3),
    RowNormalize(Var, Vec<f64>),
    /// `[N, 2] -> [N, 1]`: foreground probability of a two-way softmax.
    Softmax2(Var),
    Focal(Var, Array2<f64>),
    Dice(Var, Array2<f64>),
    Sum(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    track_frozen: bool,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            params: HashMap::new(),
            track_frozen: false,
        }
    }

    /// Also propagates gradients into frozen parameters (for checks only).
    pub fn with_frozen_grads(mut self) -> Self {
        self.track_frozen = true;
        self
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is recorded.
    pub fn input_with_grad(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let rg = p.trainable() || self.track_frozen;
        let v = self.push(p.value.clone(), Op::Param, rg);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulBT(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, k), rg)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let w = self.param(w);
        let y = self.matmul(x, w);
        match b {
            Some(b) => {
                let b = self.param(b);
                self.add_row(y, b)
            }
            None => y,
        }
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(kernels::gelu);
        let rg = self.rg(&[a]);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(kernels::sigmoid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId) -> Var {
        let (g, b) = (self.param(gamma), self.param(beta));
        let (y, cache) = kernels::layer_norm(&self.value(x).view(), &self.value(g).view(), &self.value(b).view(), 1e-6);
        let rg = self.rg(&[x, g, b]);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma: g,
                beta: b,
                xhat: cache.xhat,
                inv_std: cache.inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = kernels::softmax_rows(&self.value(a).view());
        let rg = self.rg(&[a]);
        self.push(v, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat rows agree");
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn im2col3(&mut self, a: Var, grid: Shape3) -> Var {
        let v = kernels::im2col3(&self.value(a).view(), grid);
        let rg = self.rg(&[a]);
        self.push(v, Op::Im2Col(a, grid), rg)
    }

    /// Trilinear resize of a channels-last grid.
    pub fn resize(&mut self, a: Var, from: Shape3, to: Shape3) -> Var {
        if from == to {
            return a;
        }
        let v = kernels::upsample_trilinear(&self.value(a).view(), from, to);
        let rg = self.rg(&[a]);
        self.push(v, Op::Resize(a, from, to), rg)
    }

    pub fn row_normalize(&mut self, a: Var) -> Var {
        let (v, norms) = kernels::row_normalize(&self.value(a).view());
        let rg = self.rg(&[a]);
        self.push(v, Op::RowNormalize(a, norms), rg)
    }

    pub fn softmax2(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 2, "softmax2 expects two columns");
        let v = Array2::from_shape_fn((x.nrows(), 1), |(i, _)| kernels::sigmoid(x[[i, 0]] - x[[i, 1]]));
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax2(a), rg)
    }

    /// Mean focal loss of foreground probabilities `p` (`[N, 1]`) against binary `target`.
    pub fn focal_loss(&mut self, p: Var, target: Array2<f64>, alpha: f64, gamma: f64) -> Var {
        let (loss, grad) = kernels::focal_terms(&self.value(p).view(), &target.view(), alpha, gamma, super::LOG_CLAMP);
        let rg = self.rg(&[p]);
        self.push(Array2::from_elem((1, 1), loss), Op::Focal(p, grad), rg)
    }

    pub fn dice_loss(&mut self, p: Var, target: Array2<f64>, eps: f64) -> Var {
        let (loss, grad) = kernels::dice_terms(&self.value(p).view(), &target.view(), eps);
        let rg = self.rg(&[p]);
        self.push(Array2::from_elem((1, 1), loss), Op::Dice(p, grad), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    /// Fails when any value of `v` is NaN or infinite.
    pub fn ensure_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(TagsError::NonFinite(what.to_string()))
        }
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones(self.value(loss).raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let need = |v: &Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if need(b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulBT(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if need(b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if need(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if need(b) {
                        acc(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, row) => {
                    if need(row) {
                        acc(&mut grads, *row, kernels::sum_rows(&g.view()));
                    }
                    if need(a) {
                        acc(&mut grads, *a, g.clone());
                    }
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Gelu(a) => {
                    let d = ndarray::Zip::from(&g)
                        .and(self.value(*a))
                        .map_collect(|&g, &x| g * kernels::gelu_grad(x));
                    acc(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = ndarray::Zip::from(&g).and(&node.value).map_collect(|&g, &y| g * y * (1.0 - y));
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if need(gamma) {
                        acc(&mut grads, *gamma, kernels::sum_rows(&(&g * xhat).view()));
                    }
                    if need(beta) {
                        acc(&mut grads, *beta, kernels::sum_rows(&g.view()));
                    }
                    if need(x) {
                        let dxhat = &g * self.value(*gamma);
                        let c = dxhat.ncols() as f64;
                        let mut dx = dxhat.clone();
                        for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                            let dh = dxhat.row(i);
                            let xh = xhat.row(i);
                            let m1 = dh.sum() / c;
                            let m2 = dh.dot(&xh) / c;
                            let is = inv_std[i];
                            row.zip_mut_with(&xh, |d, &x| *d = is * (*d - m1 - x * m2));
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let s = row.sum();
                        let yr = y.row(i);
                        row.zip_mut_with(&yr, |v, &yy| *v -= yy * s);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        if need(p) {
                            acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut d = Array2::zeros(self.value(*a).raw_dim());
                    let w = g.ncols();
                    d.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::Im2Col(a, grid) => {
                    let c = self.value(*a).ncols();
                    acc(&mut grads, *a, kernels::col2im3(&g.view(), *grid, c));
                }
                Op::Resize(a, from, to) => {
                    acc(&mut grads, *a, kernels::upsample_trilinear_backward(&g.view(), *from, *to));
                }
                Op::RowNormalize(a, norms) => {
                    let y = &node.value;
                    let mut d = g.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let n = norms[i];
                        if n == 0.0 {
                            row.fill(0.0);
                            continue;
                        }
                        let yr = y.row(i);
                        let proj = row.dot(&yr);
                        row.zip_mut_with(&yr, |v, &yy| *v = (*v - yy * proj) / n);
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Softmax2(a) => {
                    let p = &node.value;
                    let mut d = Array2::zeros((p.nrows(), 2));
                    for i in 0..p.nrows() {
                        let t = g[[i, 0]] * p[[i, 0]] * (1.0 - p[[i, 0]]);
                        d[[i, 0]] = t;
                        d[[i, 1]] = -t;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Focal(p, local) | Op::Dice(p, local) => {
                    acc(&mut grads, *p, local * g[[0, 0]]);
                }
                Op::Sum(a) => {
                    acc(&mut grads, *a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]]));
                }
            }
        }

        let params = self
            .params
            .iter()
            .filter_map(|(id, v)| grads[v.0].take().map(|g| (*id, g)))
            .collect();
        Gradients { params, nodes: grads }
    }
}

/// Result of a backward sweep.
pub struct Gradients {
    params: HashMap<ParamId, Array2<f64>>,
    nodes: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn var(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Array2<f64>)> {
        self.params.iter()
    }
}

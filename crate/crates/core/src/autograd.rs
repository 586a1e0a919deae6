//! Reverse-mode automatic differentiation over row-major `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Each node keeps
//! its value plus whatever the backward rule needs. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node and
//! every parameter that was read through [`Tape::param`].
//!
//! Everything is a 2-D matrix. Sequences are stored one token per row and
//! batch/group structure is expressed through row index lists (see
//! [`AttnGroup`]), so no higher-rank tensors are needed.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};

use crate::error::Result;
use crate::objectives;
use crate::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention neighbourhood: every query row attends to exactly the
/// listed key rows. Rows of the query matrix that belong to no group get a
/// zero output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Rc<[usize]>,
    },
    ScatterRows {
        src: Var,
        idx: Rc<[usize]>,
    },
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Rc<[AttnGroup]>,
        heads: usize,
        probs: Vec<Matrix>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    // Scalar losses keep the gradient of the loss w.r.t. their input.
    ScalarLoss(Vec<(Var, Matrix)>),
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads {
    nodes: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Var>,
}

impl Grads {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id).and_then(|v| self.of(*v))
    }
}

fn row(m: &Matrix, i: usize) -> &[f64] {
    let cols = m.ncols();
    &m.as_slice().expect("standard layout")[i * cols..(i + 1) * cols]
}

fn row_mut(m: &mut Matrix, i: usize) -> &mut [f64] {
    let cols = m.ncols();
    &mut m.as_slice_mut().expect("standard layout")[i * cols..(i + 1) * cols]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn standard(m: Matrix) -> Matrix {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(standard(g)),
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: standard(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Reads a parameter. Repeated reads of the same id share one node, so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a))
    }

    /// `x · w + b` with `b` a 1×out row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let mut value = self.value(x).dot(self.value(w));
        value += &self.value(b).row(0);
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Elementwise product of equally shaped matrices.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let value = self.value(x) + &self.value(bias).row(0);
        self.push(value, Op::AddRow(x, bias))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        self.push(value, Op::Scale(x, factor))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|z| {
            let inner = GELU_C * (z + 0.044715 * z * z * z);
            0.5 * z * (1.0 + inner.tanh())
        });
        self.push(value, Op::Gelu(x))
    }

    /// Row-wise layer normalization with affine `gamma`/`beta` (both 1×d).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.dim();
        let mut normed = Matrix::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let src = row(input, r);
            let mean = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (dst, v) in row_mut(&mut normed, r).iter_mut().zip(src) {
                *dst = (v - mean) * is;
            }
        }
        let mut value = &normed * &self.value(gamma).row(0);
        value += &self.value(beta).row(0);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
        )
    }

    pub fn gather_rows(&mut self, src: Var, idx: Rc<[usize]>) -> Var {
        let value = self.value(src).select(Axis(0), &idx);
        self.push(value, Op::GatherRows { src, idx })
    }

    /// Places row `i` of `src` at row `idx[i]` of a `rows`-row zero matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, src: Var, idx: Rc<[usize]>, rows: usize) -> Var {
        let input = self.value(src);
        let mut value = Matrix::zeros((rows, input.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            value.row_mut(r).assign(&input.row(i));
        }
        self.push(value, Op::ScatterRows { src, idx })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Grouped multi-head scaled dot-product attention. `q`, `k` and `v`
    /// hold already-projected rows; heads split the columns evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        groups: Rc<[AttnGroup]>,
        heads: usize,
    ) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        assert!(heads > 0 && d % heads == 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros((qm.nrows(), d));
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for g in groups.iter() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let mut p = Matrix::zeros((g.queries.len(), g.keys.len()));
                for (a, &qi) in g.queries.iter().enumerate() {
                    let qrow = &row(qm, qi)[cols.clone()];
                    let prow = row_mut(&mut p, a);
                    let mut max = f64::NEG_INFINITY;
                    for (slot, &kj) in prow.iter_mut().zip(&g.keys) {
                        *slot = dot(qrow, &row(km, kj)[cols.clone()]) * scale;
                        max = max.max(*slot);
                    }
                    let mut total = 0.0;
                    for slot in prow.iter_mut() {
                        *slot = (*slot - max).exp();
                        total += *slot;
                    }
                    for slot in prow.iter_mut() {
                        *slot /= total;
                    }
                    let orow = &mut row_mut(&mut out, qi)[cols.clone()];
                    for (&w, &kj) in prow.iter().zip(&g.keys) {
                        axpy(w, &row(vm, kj)[cols.clone()], orow);
                    }
                }
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
        )
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let input = self.value(x);
        let norms: Vec<f64> = input
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        let mut value = input.clone();
        for (mut r, n) in value.rows_mut().into_iter().zip(&norms) {
            r /= *n;
        }
        self.push(value, Op::L2NormalizeRows { x, norms })
    }

    pub fn vtc_loss(&mut self, sims: Var, temperature: f64) -> Result<Var> {
        let (loss, grad) = objectives::vtc_loss_with_grad(self.value(sims), temperature)?;
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::ScalarLoss(vec![(sims, grad)]),
        ))
    }

    /// `pos` and `neg` are N×1 columns of matching logits.
    pub fn vtm_loss(&mut self, pos: Var, neg: Var) -> Result<Var> {
        let p = self.value(pos).column(0).to_vec();
        let n = self.value(neg).column(0).to_vec();
        let (loss, gp, gn) = objectives::vtm_loss_with_grad(&p, &n)?;
        let gp = Matrix::from_shape_vec((gp.len(), 1), gp).expect("column");
        let gn = Matrix::from_shape_vec((gn.len(), 1), gn).expect("column");
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::ScalarLoss(vec![(pos, gp), (neg, gn)]),
        ))
    }

    /// Mean cross-entropy of each logit row against its target class.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (loss, grad) = objectives::cross_entropy_with_grad(self.value(logits), targets)?;
        Ok(self.push(
            Matrix::from_elem((1, 1), loss),
            Op::ScalarLoss(vec![(logits, grad)]),
        ))
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let total = terms
            .iter()
            .fold(0.0, |acc, (v, w)| acc + w * self.scalar(*v));
        self.push(
            Matrix::from_elem((1, 1), total),
            Op::WeightedSum(terms.to_vec()),
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        self.push(Matrix::from_elem((1, 1), total), Op::Sum(x))
    }

    /// Back-propagates from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones(self.value(root).dim()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Grads {
            nodes: grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(g);
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
            Op::Linear { x, w, b } => {
                let gx = g.dot(&self.value(*w).t());
                let gw = self.value(*x).t().dot(g);
                let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[w.0], gw);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a.0], g * self.value(*b));
                accumulate(&mut grads[b.0], g * self.value(*a));
            }
            Op::AddRow(x, bias) => {
                accumulate(&mut grads[x.0], g.clone());
                accumulate(&mut grads[bias.0], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(x, f) => accumulate(&mut grads[x.0], g * *f),
            Op::Gelu(x) => {
                let mut gx = self.value(*x).mapv(|z| {
                    let inner = GELU_C * (z + 0.044715 * z * z * z);
                    let t = inner.tanh();
                    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * z * z);
                    0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * d_inner
                });
                gx *= g;
                accumulate(&mut grads[x.0], gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let ggamma = (g * normed).sum_axis(Axis(0)).insert_axis(Axis(0));
                let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                let dxhat = g * &gm.row(0);
                let cols = normed.ncols() as f64;
                let mut gx = Matrix::zeros(normed.dim());
                for r in 0..normed.nrows() {
                    let dh = row(&dxhat, r);
                    let xh = row(normed, r);
                    let mean_dh = dh.iter().sum::<f64>() / cols;
                    let mean_dh_xh = dot(dh, xh) / cols;
                    for ((o, d), xv) in row_mut(&mut gx, r).iter_mut().zip(dh).zip(xh) {
                        *o = inv_std[r] * (d - mean_dh - xv * mean_dh_xh);
                    }
                }
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[gamma.0], ggamma);
                accumulate(&mut grads[beta.0], gbeta);
            }
            Op::GatherRows { src, idx } => {
                let mut gs = Matrix::zeros(self.value(*src).dim());
                for (i, &r) in idx.iter().enumerate() {
                    axpy(1.0, row(g, i), row_mut(&mut gs, r));
                }
                accumulate(&mut grads[src.0], gs);
            }
            Op::ScatterRows { src, idx } => {
                let gs = g.select(Axis(0), idx);
                accumulate(&mut grads[src.0], gs);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).nrows();
                    accumulate(&mut grads[p.0], g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, groups, *heads, probs, g);
                accumulate(&mut grads[q.0], gq);
                accumulate(&mut grads[k.0], gk);
                accumulate(&mut grads[v.0], gv);
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                for r in 0..y.nrows() {
                    let yr = row(y, r);
                    let proj = dot(yr, row(g, r));
                    for (o, yv) in row_mut(&mut gx, r).iter_mut().zip(yr) {
                        *o = (*o - yv * proj) / norms[r];
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::ScalarLoss(inputs) => {
                let upstream = g[[0, 0]];
                for (input, local) in inputs {
                    accumulate(&mut grads[input.0], local * upstream);
                }
            }
            Op::WeightedSum(terms) => {
                let upstream = g[[0, 0]];
                for (v, w) in terms {
                    accumulate(&mut grads[v.0], Matrix::from_elem((1, 1), upstream * w));
                }
            }
            Op::Sum(x) => {
                let upstream = g[[0, 0]];
                accumulate(
                    &mut grads[x.0],
                    Matrix::from_elem(self.value(*x).dim(), upstream),
                );
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        groups: &[AttnGroup],
        heads: usize,
        probs: &[Matrix],
        g: &Matrix,
    ) -> (Matrix, Matrix, Matrix) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.ncols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Matrix::zeros(qm.dim());
        let mut gk = Matrix::zeros(km.dim());
        let mut gv = Matrix::zeros(vm.dim());
        let mut dp = Vec::new();
        let mut p_iter = probs.iter();
        for grp in groups {
            for h in 0..heads {
                let p = p_iter.next().expect("one probability block per group and head");
                let cols = h * dh..(h + 1) * dh;
                for (a, &qi) in grp.queries.iter().enumerate() {
                    let go = &row(g, qi)[cols.clone()];
                    let prow = row(p, a);
                    dp.clear();
                    for (&w, &kj) in prow.iter().zip(&grp.keys) {
                        dp.push(dot(go, &row(vm, kj)[cols.clone()]));
                        axpy(w, go, &mut row_mut(&mut gv, kj)[cols.clone()]);
                    }
                    let centre = dot(prow, &dp);
                    for ((&w, &kj), dpv) in prow.iter().zip(&grp.keys).zip(&dp) {
                        let ds = w * (dpv - centre) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        axpy(ds, &row(km, kj)[cols.clone()], &mut row_mut(&mut gq, qi)[cols.clone()]);
                        axpy(ds, &row(qm, qi)[cols.clone()], &mut row_mut(&mut gk, kj)[cols.clone()]);
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

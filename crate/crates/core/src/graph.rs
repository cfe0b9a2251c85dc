//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Values are rank-2 arrays (`Array2<S>`): sequences are `[len x dim]`,
//! vectors are `[1 x dim]`, scalars are `[1 x 1]`. Each operation records a
//! node with a backward closure; [`Graph::backward`] walks the tape in
//! reverse creation order, which is already a topological order.
//!
//! The element type is generic so training runs in `f32` while gradient
//! verification runs in `f64` (finite differences are unreliable in `f32`).

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{s, Array2, Axis};
use num_traits::Float;

/// Element type usable on the tape.
pub trait Scalar:
    Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + ndarray::LinalgScalar
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<S> = Box<dyn Fn(&Array2<S>) -> Vec<(usize, Array2<S>)>>;

enum BackKind<S: Scalar> {
    Plain(BackwardFn<S>),
    /// Product of a single-row activation with a weight matrix. Handled
    /// natively by `backward` so the weight gradient (an outer product the
    /// size of the weight matrix) is accumulated in place instead of being
    /// materialized per use — the dominant cost for large decoders.
    RowMatmul {
        a: usize,
        b: usize,
        va: Rc<Array2<S>>,
        vb: Rc<Array2<S>>,
    },
}

struct Node<S: Scalar> {
    value: Rc<Array2<S>>,
    backward: Option<BackKind<S>>,
}

pub struct Graph<S: Scalar> {
    nodes: RefCell<Vec<Node<S>>>,
    // one leaf per shared parameter allocation, keyed by Rc pointer
    rc_leaves: RefCell<std::collections::HashMap<usize, Var>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one scalar output with respect to tape nodes.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Array2<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `v`, or zeros if the loss does not depend on it.
    pub fn get(&self, g: &Graph<S>, v: Var) -> Array2<S> {
        match &self.grads[v.0] {
            Some(a) => a.clone(),
            None => Array2::zeros(g.value(v).raw_dim()),
        }
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            rc_leaves: RefCell::new(std::collections::HashMap::new()),
        }
    }

    fn push(&self, value: Array2<S>, backward: Option<BackwardFn<S>>) -> Var {
        self.push_kind(value, backward.map(BackKind::Plain))
    }

    fn push_kind(&self, value: Array2<S>, backward: Option<BackKind<S>>) -> Var {
        debug_assert!(
            value.iter().all(|x| x.is_finite()),
            "non-finite value produced on tape"
        );
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            backward,
        });
        Var(nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, v: Var) -> Rc<Array2<S>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn scalar_value(&self, v: Var) -> S {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "expected scalar node");
        val[(0, 0)]
    }

    /// Leaf holding an input or parameter; gradients flow into it.
    pub fn leaf(&self, value: Array2<S>) -> Var {
        self.push(value, None)
    }

    /// Leaf sharing an existing allocation (model parameters). Calling this
    /// twice with the same allocation returns the same node, so gradients for
    /// a parameter used at every timestep accumulate in one place.
    pub fn leaf_rc(&self, value: Rc<Array2<S>>) -> Var {
        let key = Rc::as_ptr(&value) as usize;
        if let Some(&v) = self.rc_leaves.borrow().get(&key) {
            return v;
        }
        debug_assert!(value.iter().all(|x| x.is_finite()));
        let var = {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node {
                value,
                backward: None,
            });
            Var(nodes.len() - 1)
        };
        self.rc_leaves.borrow_mut().insert(key, var);
        var
    }

    /// Leaf that participates in no gradient (targets, masks, constants).
    pub fn constant(&self, value: Array2<S>) -> Var {
        self.push(value, None)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        let out = &*va + &*vb;
        self.push(
            out,
            Some(Box::new(move |dz| {
                vec![(a.0, dz.clone()), (b.0, dz.clone())]
            })),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "sub: shape mismatch");
        let out = &*va - &*vb;
        self.push(
            out,
            Some(Box::new(move |dz| vec![(a.0, dz.clone()), (b.0, dz.mapv(|v| -v))])),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch");
        let out = &*va * &*vb;
        self.push(
            out,
            Some(Box::new(move |dz| {
                vec![(a.0, dz * &*vb), (b.0, dz * &*va)]
            })),
        )
    }

    pub fn neg(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| -v), Some(Box::new(move |dz| vec![(a.0, dz.mapv(|v| -v))])))
    }

    pub fn scale(&self, a: Var, c: S) -> Var {
        let va = self.value(a);
        self.push(&*va * c, Some(Box::new(move |dz| vec![(a.0, dz * c)])))
    }

    /// `mat [T x D] + bias [1 x D]`, broadcast over rows.
    pub fn add_bias(&self, mat: Var, bias: Var) -> Var {
        let (vm, vb) = (self.value(mat), self.value(bias));
        assert_eq!(vb.nrows(), 1, "add_bias: bias must be a row vector");
        assert_eq!(vm.ncols(), vb.ncols(), "add_bias: width mismatch");
        let out = &*vm + &*vb;
        self.push(
            out,
            Some(Box::new(move |dz| {
                let db = dz.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![(mat.0, dz.clone()), (bias.0, db)]
            })),
        )
    }

    /// `a . b` with a streaming path for single-row `a`: accumulating
    /// scaled rows of `b` reads the weight matrix row-contiguously and
    /// skips gemm packing, which dominates for `1 x K` activations against
    /// wide weights.
    fn row_matmul_values(va: &Array2<S>, vb: &Array2<S>) -> Array2<S> {
        if va.nrows() == 1 && va.ncols() > 1 {
            let ar = va.row(0);
            let mut out = Array2::zeros((1, vb.ncols()));
            for (k, brow) in vb.rows().into_iter().enumerate() {
                let s = ar[k];
                if s != S::zero() {
                    let mut orow = out.row_mut(0);
                    orow.zip_mut_with(&brow, |o, &v| *o = *o + s * v);
                }
            }
            out
        } else {
            va.dot(vb)
        }
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        let out = Self::row_matmul_values(&va, &vb);
        if va.nrows() == 1 {
            return self.push_kind(
                out,
                Some(BackKind::RowMatmul {
                    a: a.0,
                    b: b.0,
                    va,
                    vb,
                }),
            );
        }
        self.push(
            out,
            Some(Box::new(move |dz| {
                let da = dz.dot(&vb.t());
                let db = va.t().dot(dz);
                vec![(a.0, da), (b.0, db)]
            })),
        )
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(
            va.t().to_owned(),
            Some(Box::new(move |dz| vec![(a.0, dz.t().to_owned())])),
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        let one = S::one();
        let out = va.mapv(|x| one / (one + (-x).exp()));
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |dz| {
                vec![(a.0, dz * &y.mapv(|v| v * (S::one() - v)))]
            })),
        )
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.tanh());
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |dz| {
                vec![(a.0, dz * &y.mapv(|v| S::one() - v * v))]
            })),
        )
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| if x > S::zero() { x } else { S::zero() });
        let xa = va.clone();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let gate = xa.mapv(|x| if x > S::zero() { S::one() } else { S::zero() });
                vec![(a.0, dz * &gate)]
            })),
        )
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.exp());
        let y = out.clone();
        self.push(out, Some(Box::new(move |dz| vec![(a.0, dz * &y)])))
    }

    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x.abs());
        let xa = va.clone();
        self.push(
            out,
            Some(Box::new(move |dz| {
                // subgradient 0 at x == 0
                let sign = xa.mapv(|x| {
                    if x > S::zero() {
                        S::one()
                    } else if x < S::zero() {
                        -S::one()
                    } else {
                        S::zero()
                    }
                });
                vec![(a.0, dz * &sign)]
            })),
        )
    }

    pub fn square(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.mapv(|x| x * x);
        let xa = va.clone();
        let two = S::of(2.0);
        self.push(
            out,
            Some(Box::new(move |dz| vec![(a.0, dz * &(&*xa * two))])),
        )
    }

    /// Numerically stabilized softmax applied to each row independently.
    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        let mut out = va.as_ref().clone();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut dx = dz * &y;
                for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
                    let dot = drow.sum();
                    drow.zip_mut_with(&yrow, |d, &yv| *d = *d - yv * dot);
                }
                vec![(a.0, dx)]
            })),
        )
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let rows = values[0].nrows();
        assert!(values.iter().all(|v| v.nrows() == rows));
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let widths: Vec<usize> = values.iter().map(|v| v.ncols()).collect();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut grads = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&id, &w) in ids.iter().zip(&widths) {
                    grads.push((id, dz.slice(s![.., off..off + w]).to_owned()));
                    off += w;
                }
                grads
            })),
        )
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let cols = values[0].ncols();
        assert!(values.iter().all(|v| v.ncols() == cols));
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat_rows");
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let heights: Vec<usize> = values.iter().map(|v| v.nrows()).collect();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut grads = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&id, &h) in ids.iter().zip(&heights) {
                    grads.push((id, dz.slice(s![off..off + h, ..]).to_owned()));
                    off += h;
                }
                grads
            })),
        )
    }

    pub fn slice_cols(&self, a: Var, from: usize, to: usize) -> Var {
        let va = self.value(a);
        assert!(from < to && to <= va.ncols(), "slice_cols: bad range");
        let out = va.slice(s![.., from..to]).to_owned();
        let dim = va.raw_dim();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut da = Array2::zeros(dim);
                da.slice_mut(s![.., from..to]).assign(dz);
                vec![(a.0, da)]
            })),
        )
    }

    pub fn slice_rows(&self, a: Var, from: usize, to: usize) -> Var {
        let va = self.value(a);
        assert!(from < to && to <= va.nrows(), "slice_rows: bad range");
        let out = va.slice(s![from..to, ..]).to_owned();
        let dim = va.raw_dim();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut da = Array2::zeros(dim);
                da.slice_mut(s![from..to, ..]).assign(dz);
                vec![(a.0, da)]
            })),
        )
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = Array2::from_elem((1, 1), va.sum());
        let dim = va.raw_dim();
        self.push(
            out,
            Some(Box::new(move |dz| {
                vec![(a.0, Array2::from_elem(dim, dz[(0, 0)]))]
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = S::from_usize(va.len()).unwrap();
        let out = Array2::from_elem((1, 1), va.sum() / n);
        let dim = va.raw_dim();
        self.push(
            out,
            Some(Box::new(move |dz| {
                vec![(a.0, Array2::from_elem(dim, dz[(0, 0)] / n))]
            })),
        )
    }

    /// Elementwise product with a fixed mask (dropout, causal masks).
    pub fn mul_const(&self, a: Var, mask: &Array2<S>) -> Var {
        let va = self.value(a);
        assert_eq!(va.dim(), mask.dim(), "mul_const: shape mismatch");
        let out = &*va * mask;
        let m = mask.clone();
        self.push(out, Some(Box::new(move |dz| vec![(a.0, dz * &m)])))
    }

    /// Elementwise sum with a fixed array (attention masks).
    pub fn add_const(&self, a: Var, c: &Array2<S>) -> Var {
        let va = self.value(a);
        assert_eq!(va.dim(), c.dim(), "add_const: shape mismatch");
        self.push(&*va + c, Some(Box::new(move |dz| vec![(a.0, dz.clone())])))
    }

    /// Embedding lookup: selects rows of `table` by id; backward scatter-adds.
    pub fn rows_select(&self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value(table);
        let dim = vt.ncols();
        for (pos, &id) in ids.iter().enumerate() {
            assert!(id < vt.nrows(), "rows_select: id {id} at position {pos} out of range");
        }
        let mut out = Array2::zeros((ids.len(), dim));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&vt.row(id));
        }
        let ids = ids.to_vec();
        let tdim = vt.raw_dim();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut dt: Array2<S> = Array2::zeros(tdim);
                for (drow, &id) in dz.rows().into_iter().zip(&ids) {
                    let mut target = dt.row_mut(id);
                    target.zip_mut_with(&drow, |t, &d| *t = *t + d);
                }
                vec![(table.0, dt)]
            })),
        )
    }

    /// Unfolds `x [T x C]` into `[T x k*C]` windows with same padding so a
    /// convolution becomes a matmul. Window `t` covers positions
    /// `t - (k-1)/2 .. t + k/2`, zero padded at the edges.
    pub fn im2col(&self, x: Var, k: usize) -> Var {
        assert!(k >= 1);
        let vx = self.value(x);
        let (t_len, c) = vx.dim();
        let left = (k - 1) / 2;
        let mut out = Array2::zeros((t_len, k * c));
        for t in 0..t_len {
            for j in 0..k {
                let src = t as isize - left as isize + j as isize;
                if src >= 0 && (src as usize) < t_len {
                    out.slice_mut(s![t, j * c..(j + 1) * c])
                        .assign(&vx.row(src as usize));
                }
            }
        }
        let dim = vx.raw_dim();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut dx: Array2<S> = Array2::zeros(dim);
                for t in 0..t_len {
                    for j in 0..k {
                        let src = t as isize - left as isize + j as isize;
                        if src >= 0 && (src as usize) < t_len {
                            let slice = dz.slice(s![t, j * c..(j + 1) * c]);
                            let mut target = dx.row_mut(src as usize);
                            target.zip_mut_with(&slice, |a, &b| *a = *a + b);
                        }
                    }
                }
                vec![(x.0, dx)]
            })),
        )
    }

    /// Max-pool over time, width 2, stride 1, same length: `out[t] = max(x[t], x[t+1])`.
    pub fn maxpool2_rows(&self, x: Var) -> Var {
        let vx = self.value(x);
        let (t_len, c) = vx.dim();
        let mut out = Array2::zeros((t_len, c));
        let mut arg: Vec<usize> = Vec::with_capacity(t_len * c);
        for t in 0..t_len {
            for j in 0..c {
                let a = vx[(t, j)];
                if t + 1 < t_len && vx[(t + 1, j)] > a {
                    out[(t, j)] = vx[(t + 1, j)];
                    arg.push(t + 1);
                } else {
                    out[(t, j)] = a;
                    arg.push(t);
                }
            }
        }
        let dim = vx.raw_dim();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut dx: Array2<S> = Array2::zeros(dim);
                for t in 0..t_len {
                    for j in 0..c {
                        let src = arg[t * c + j];
                        dx[(src, j)] = dx[(src, j)] + dz[(t, j)];
                    }
                }
                vec![(x.0, dx)]
            })),
        )
    }

    /// Shifts a row vector `[1 x L]` one position right, filling with zero.
    pub fn shift_right(&self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.nrows(), 1, "shift_right: expects a row vector");
        let l = va.ncols();
        let mut out = Array2::zeros((1, l));
        if l > 1 {
            out.slice_mut(s![0, 1..]).assign(&va.slice(s![0, ..l - 1]));
        }
        self.push(
            out,
            Some(Box::new(move |dz| {
                let mut da = Array2::zeros((1, l));
                if l > 1 {
                    da.slice_mut(s![0, ..l - 1]).assign(&dz.slice(s![0, 1..]));
                }
                vec![(a.0, da)]
            })),
        )
    }

    /// `a / s` for scalar node `s [1 x 1]`.
    pub fn div_by_scalar(&self, a: Var, sv: Var) -> Var {
        let (va, vs) = (self.value(a), self.value(sv));
        assert_eq!(vs.dim(), (1, 1), "div_by_scalar: divisor must be scalar");
        let d = vs[(0, 0)];
        let out = &*va / d;
        self.push(
            out,
            Some(Box::new(move |dz| {
                let da = dz / d;
                let ds = -(dz * &*va).sum() / (d * d);
                vec![(a.0, da), (sv.0, Array2::from_elem((1, 1), ds))]
            })),
        )
    }

    /// Mean binary cross entropy with logits; targets are constants.
    /// Stable form: `max(x, 0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits_mean(&self, logits: Var, targets: &Array2<S>) -> Var {
        let vx = self.value(logits);
        assert_eq!(vx.dim(), targets.dim(), "bce: shape mismatch");
        let n = S::from_usize(vx.len()).unwrap();
        let mut total = S::zero();
        for (&x, &t) in vx.iter().zip(targets.iter()) {
            let pos = if x > S::zero() { x } else { S::zero() };
            total = total + pos - x * t + (S::one() + (-x.abs()).exp()).ln();
        }
        let out = Array2::from_elem((1, 1), total / n);
        let t = targets.clone();
        self.push(
            out,
            Some(Box::new(move |dz| {
                let scale = dz[(0, 0)] / n;
                let mut dx = vx.as_ref().clone();
                dx.zip_mut_with(&t, |x, &tv| {
                    let sig = S::one() / (S::one() + (-*x).exp());
                    *x = (sig - tv) * scale;
                });
                vec![(logits.0, dx)]
            })),
        )
    }

    /// Reverse pass from a `[1 x 1]` loss node.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<S>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::from_elem((1, 1), S::one()));
        let accumulate = |grads: &mut Vec<Option<Array2<S>>>, pid: usize, contrib: Array2<S>| {
            match &mut grads[pid] {
                Some(acc) => ndarray::Zip::from(&mut *acc)
                    .and(&contrib)
                    .for_each(|a, &c| *a = *a + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        for i in (0..=loss.0).rev() {
            let Some(dz) = grads[i].take() else { continue };
            match &nodes[i].backward {
                Some(BackKind::Plain(back)) => {
                    for (pid, contrib) in back(&dz) {
                        accumulate(&mut grads, pid, contrib);
                    }
                }
                Some(BackKind::RowMatmul { a, b, va, vb }) => {
                    // da = dz . b^T as contiguous row dot products
                    let dzr = dz.row(0);
                    let mut da = Array2::zeros((1, vb.nrows()));
                    for (k, brow) in vb.rows().into_iter().enumerate() {
                        da[(0, k)] = dzr.dot(&brow);
                    }
                    accumulate(&mut grads, *a, da);
                    // db = a^T . dz is rank-1: scale-and-add each row of the
                    // accumulator directly, no temporary the size of b
                    let ar = va.row(0);
                    let acc = grads[*b].get_or_insert_with(|| {
                        Array2::zeros((vb.nrows(), dz.ncols()))
                    });
                    for (k, mut arow) in acc.rows_mut().into_iter().enumerate() {
                        let s = ar[k];
                        if s != S::zero() {
                            arow.zip_mut_with(&dzr, |d, &z| *d = *d + s * z);
                        }
                    }
                }
                None => {}
            }
            grads[i] = Some(dz);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fd_check<F>(f: F, x0: Array2<f64>) -> f64
    where
        F: Fn(&Graph<f64>, Var) -> Var,
    {
        let mut params = vec![x0];
        crate::check::grad_check(
            |g, vars| f(g, vars[0]),
            &mut params,
            1e-5,
        )
        .unwrap()
    }

    #[test]
    fn matmul_chain_gradients() {
        let err = fd_check(
            |g, x| {
                let w = g.constant(array![[0.3, -0.7], [1.1, 0.2], [0.5, 0.9]]);
                let y = g.matmul(x, w);
                let y = g.tanh(y);
                g.mean_all(y)
            },
            array![[0.5, -0.2, 0.8], [1.0, 0.1, -0.4]],
        );
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn softmax_bce_conv_pool_gradients() {
        let err = fd_check(
            |g, x| {
                let col = g.im2col(x, 3);
                let pooled = g.maxpool2_rows(col);
                let sm = g.softmax_rows(pooled);
                let sq = g.square(sm);
                g.sum_all(sq)
            },
            array![[0.5, -0.2], [0.8, 0.3], [-1.0, 0.7], [0.2, 0.1]],
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn select_slice_concat_gradients() {
        let err = fd_check(
            |g, x| {
                let rows = g.rows_select(x, &[0, 2, 2, 1]);
                let a = g.slice_cols(rows, 0, 1);
                let b = g.slice_cols(rows, 1, 2);
                let cat = g.concat_cols(&[a, b]);
                let sig = g.sigmoid(cat);
                g.mean_all(sig)
            },
            array![[0.5, -0.2], [0.8, 0.3], [-1.0, 0.7]],
        );
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn normalized_shift_gradients() {
        // forward-attention-like normalization path
        let err = fd_check(
            |g, x| {
                let sm = g.softmax_rows(x);
                let shifted = g.shift_right(sm);
                let total = g.add(sm, shifted);
                let sum = g.sum_all(total);
                let alpha = g.div_by_scalar(total, sum);
                let sq = g.square(alpha);
                g.sum_all(sq)
            },
            array![[0.5, -0.2, 0.8, 0.1]],
        );
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn bce_matches_manual() {
        let g: Graph<f64> = Graph::new();
        let logits = g.leaf(array![[2.0], [-1.0]]);
        let targets = array![[1.0], [0.0]];
        let loss = g.bce_with_logits_mean(logits, &targets);
        let expected = ((1.0 + (-2.0f64).exp()).ln() + (1.0 + (-1.0f64).exp()).ln()) / 2.0;
        assert!((g.scalar_value(loss) - expected).abs() < 1e-12);
    }

    #[test]
    fn diamond_accumulates_both_paths() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(array![[3.0]]);
        let y = g.add(x, x); // dy/dx = 2
        let loss = g.sum_all(y);
        let grads = g.backward(loss);
        assert_eq!(grads.get(&g, x)[(0, 0)], 2.0);
    }
}

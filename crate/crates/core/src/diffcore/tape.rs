//! Record-and-replay reverse-mode differentiation.
//!
//! A [`Tape`] records each operation as a node holding the forward value and
//! a vector-Jacobian closure. [`Tape::backward`] walks the nodes in reverse,
//! propagating gradients only along paths that can reach a leaf, so frozen
//! subgraphs cost nothing extra.

use std::cell::{Ref, RefCell};

use rayon::prelude::*;

use super::array::{
    matmul_nn, matmul_nn_into, matmul_nt, matmul_nt_into, matmul_tn, matmul_tn_into, par_rows,
    NdArray, PAR_MACS,
};
use super::math::{fast_exp, fast_tanh};
use super::DiffError;

/// Gradient of each parent given: upstream gradient, parent values, own
/// value, and which parents actually want a gradient.
type Vjp = Box<dyn Fn(&NdArray, &[&NdArray], &NdArray, &[bool]) -> Vec<Option<NdArray>>>;

struct Node {
    value: NdArray,
    parents: Vec<usize>,
    vjp: Option<Vjp>,
    needs_grad: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-node gradients produced by [`Tape::backward`].
///
/// Only leaf gradients are retained; intermediate gradients are dropped as
/// soon as they have been consumed.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<NdArray> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    pub fn value(&self, v: Var) -> Ref<'_, NdArray> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn value_cloned(&self, v: Var) -> NdArray {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Single element of a one-element node.
    pub fn item_of(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.item()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// A node that never receives a gradient.
    pub fn constant(&self, value: NdArray) -> Var {
        self.push(value, vec![], None, false)
    }

    /// A gradient sink: its gradient is retained after `backward`.
    pub fn leaf(&self, value: NdArray) -> Var {
        self.push(value, vec![], None, true)
    }

    fn push(&self, value: NdArray, parents: Vec<usize>, vjp: Option<Vjp>, is_leaf: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = is_leaf || parents.iter().any(|&p| nodes[p].needs_grad);
        let vjp = if needs_grad { vjp } else { None };
        nodes.push(Node {
            value,
            parents,
            vjp,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn unary(
        &self,
        op: &'static str,
        a: Var,
        value: NdArray,
        vjp: impl Fn(&NdArray, &[&NdArray], &NdArray) -> NdArray + 'static,
    ) -> Result<Var, DiffError> {
        value.ensure_finite(op)?;
        Ok(self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, ps, out, wants| {
                vec![wants[0].then(|| vjp(g, ps, out))]
            })),
            false,
        ))
    }

    // ---- arithmetic ----

    pub fn add(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape("add", x, y)?;
            zip_map(x, y, |u, v| u + v)
        };
        value.ensure_finite("add")?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _, wants| {
                vec![
                    wants[0].then(|| g.clone()),
                    wants[1].then(|| g.clone()),
                ]
            })),
            false,
        ))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape("sub", x, y)?;
            zip_map(x, y, |u, v| u - v)
        };
        value.ensure_finite("sub")?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, _, _, wants| {
                vec![
                    wants[0].then(|| g.clone()),
                    wants[1].then(|| g.map(|v| -v)),
                ]
            })),
            false,
        ))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape("mul", x, y)?;
            zip_map(x, y, |u, v| u * v)
        };
        value.ensure_finite("mul")?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, ps, _, wants| {
                vec![
                    wants[0].then(|| zip_map(g, ps[1], |u, v| u * v)),
                    wants[1].then(|| zip_map(g, ps[0], |u, v| u * v)),
                ]
            })),
            false,
        ))
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var, DiffError> {
        let value = self.nodes.borrow()[a.0].value.map(|v| v * c);
        self.unary("scale", a, value, move |g, _, _| g.map(|v| v * c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var, DiffError> {
        let value = self.nodes.borrow()[a.0].value.map(|v| v + c);
        self.unary("add_scalar", a, value, |g, _, _| g.clone())
    }

    /// `x + p` where `p`'s shape is a suffix of `x`'s shape (e.g. a bias over
    /// the last axis, or a positional table over the last two axes).
    pub fn add_broadcast(&self, x: Var, p: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, pv) = (&nodes[x.0].value, &nodes[p.0].value);
            if xv.rank() < pv.rank()
                || xv.shape()[xv.rank() - pv.rank()..] != *pv.shape()
            {
                return Err(DiffError::ShapeMismatch {
                    op: "add_broadcast",
                    detail: format!("{:?} vs suffix {:?}", xv.shape(), pv.shape()),
                });
            }
            let plen = pv.len();
            let mut out = xv.clone();
            for chunk in out.data_mut().chunks_mut(plen) {
                for (o, &v) in chunk.iter_mut().zip(pv.data()) {
                    *o += v;
                }
            }
            out
        };
        value.ensure_finite("add_broadcast")?;
        Ok(self.push(
            value,
            vec![x.0, p.0],
            Some(Box::new(|g, ps, _, wants| {
                vec![
                    wants[0].then(|| g.clone()),
                    wants[1].then(|| {
                        let plen = ps[1].len();
                        let mut acc = NdArray::zeros(ps[1].shape());
                        for chunk in g.data().chunks(plen) {
                            for (a, &v) in acc.data_mut().iter_mut().zip(chunk) {
                                *a += v;
                            }
                        }
                        acc
                    }),
                ]
            })),
            false,
        ))
    }

    /// Elementwise product with a single-element variable (a learnable scale).
    pub fn mul_scalar_var(&self, x: Var, s: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let sv = &nodes[s.0].value;
            if sv.len() != 1 {
                return Err(DiffError::ShapeMismatch {
                    op: "mul_scalar_var",
                    detail: format!("scale has shape {:?}", sv.shape()),
                });
            }
            nodes[x.0].value.map(|v| v * sv.item())
        };
        value.ensure_finite("mul_scalar_var")?;
        Ok(self.push(
            value,
            vec![x.0, s.0],
            Some(Box::new(|g, ps, _, wants| {
                vec![
                    wants[0].then(|| g.map(|v| v * ps[1].item())),
                    wants[1].then(|| {
                        let dot: f64 =
                            g.data().iter().zip(ps[0].data()).map(|(u, v)| u * v).sum();
                        NdArray::scalar(dot)
                    }),
                ]
            })),
            false,
        ))
    }

    // ---- structure ----

    pub fn reshape(&self, a: Var, shape: Vec<usize>) -> Result<Var, DiffError> {
        // pure aliasing; the data was checked when it was produced
        let value = self.nodes.borrow()[a.0].value.reshaped(shape)?;
        Ok(self.push(
            value,
            vec![a.0],
            Some(Box::new(|g: &NdArray, ps: &[&NdArray], _: &NdArray, wants: &[bool]| {
                vec![wants[0]
                    .then(|| g.reshaped(ps[0].shape().to_vec()).expect("same length"))]
            })),
            false,
        ))
    }

    /// Contiguous window `start..start+len` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if axis >= x.rank() || start + len > x.shape()[axis] || len == 0 {
                return Err(DiffError::ShapeMismatch {
                    op: "narrow",
                    detail: format!(
                        "axis {axis} window {start}..{} of {:?}",
                        start + len,
                        x.shape()
                    ),
                });
            }
            narrow_copy(x, axis, start, len)
        };
        Ok(self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, ps, _, wants| {
                vec![wants[0].then(|| {
                    let x = ps[0];
                    let mut out = NdArray::zeros(x.shape());
                    let dim = x.shape()[axis];
                    let inner: usize = x.shape()[axis + 1..].iter().product();
                    let outer: usize = x.shape()[..axis].iter().product();
                    for o in 0..outer {
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        let dst = &mut out.data_mut()
                            [o * dim * inner + start * inner..o * dim * inner + (start + len) * inner];
                        dst.copy_from_slice(src);
                    }
                    out
                })]
            })),
            false,
        ))
    }

    pub fn permute_axes(&self, a: Var, perm: &[usize]) -> Result<Var, DiffError> {
        let perm = perm.to_vec();
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut seen = vec![false; x.rank()];
            if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
                return Err(DiffError::ShapeMismatch {
                    op: "permute_axes",
                    detail: format!("perm {:?} on {:?}", perm, x.shape()),
                });
            }
            permute_copy(x, &perm)
        };
        let inv = invert_perm(&perm);
        self.unary("permute_axes", a, value, move |g, _, _| {
            permute_copy(g, &inv)
        })
    }

    pub fn reverse_lastdim(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            reverse_lastdim_copy(&nodes[a.0].value)
        };
        self.unary("reverse_lastdim", a, value, |g, _, _| {
            reverse_lastdim_copy(g)
        })
    }

    /// Prepends a shared row to every sequence: `(G, N, C) + (C) -> (G, N+1, C)`.
    pub fn prepend_row_broadcast(&self, tokens: Var, row: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (t, r) = (&nodes[tokens.0].value, &nodes[row.0].value);
            if t.rank() != 3 || r.rank() != 1 || t.shape()[2] != r.shape()[0] {
                return Err(DiffError::ShapeMismatch {
                    op: "prepend_row_broadcast",
                    detail: format!("{:?} with row {:?}", t.shape(), r.shape()),
                });
            }
            let (g_count, n, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut out = NdArray::zeros(&[g_count, n + 1, c]);
            for gi in 0..g_count {
                let dst = &mut out.data_mut()[gi * (n + 1) * c..(gi + 1) * (n + 1) * c];
                dst[..c].copy_from_slice(r.data());
                dst[c..].copy_from_slice(&t.data()[gi * n * c..(gi + 1) * n * c]);
            }
            out
        };
        value.ensure_finite("prepend_row_broadcast")?;
        Ok(self.push(
            value,
            vec![tokens.0, row.0],
            Some(Box::new(|g, ps, _, wants| {
                let (g_count, n, c) = (ps[0].shape()[0], ps[0].shape()[1], ps[0].shape()[2]);
                vec![
                    wants[0].then(|| {
                        let mut out = NdArray::zeros(ps[0].shape());
                        for gi in 0..g_count {
                            out.data_mut()[gi * n * c..(gi + 1) * n * c].copy_from_slice(
                                &g.data()[gi * (n + 1) * c + c..(gi + 1) * (n + 1) * c],
                            );
                        }
                        out
                    }),
                    wants[1].then(|| {
                        let mut out = NdArray::zeros(ps[1].shape());
                        for gi in 0..g_count {
                            let src = &g.data()[gi * (n + 1) * c..gi * (n + 1) * c + c];
                            for (o, &v) in out.data_mut().iter_mut().zip(src) {
                                *o += v;
                            }
                        }
                        out
                    }),
                ]
            })),
            false,
        ))
    }

    /// Builds `K` sequences sharing one context block, each with its own
    /// inserted row: `(W, C) x (K, C) -> (K, W+1, C)` with the k-th row of
    /// `inserts` placed at index `at` of sequence k.
    pub fn insert_rows(&self, context: Var, inserts: Var, at: usize) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ctx, ins) = (&nodes[context.0].value, &nodes[inserts.0].value);
            if ctx.rank() != 2 || ins.rank() != 2 || ctx.shape()[1] != ins.shape()[1] {
                return Err(DiffError::ShapeMismatch {
                    op: "insert_rows",
                    detail: format!("{:?} with {:?}", ctx.shape(), ins.shape()),
                });
            }
            let (w, c) = (ctx.shape()[0], ctx.shape()[1]);
            if at > w {
                return Err(DiffError::ShapeMismatch {
                    op: "insert_rows",
                    detail: format!("insert index {at} beyond {w} rows"),
                });
            }
            let k_count = ins.shape()[0];
            let mut out = NdArray::zeros(&[k_count, w + 1, c]);
            for k in 0..k_count {
                let dst = &mut out.data_mut()[k * (w + 1) * c..(k + 1) * (w + 1) * c];
                dst[..at * c].copy_from_slice(&ctx.data()[..at * c]);
                dst[at * c..(at + 1) * c].copy_from_slice(&ins.data()[k * c..(k + 1) * c]);
                dst[(at + 1) * c..].copy_from_slice(&ctx.data()[at * c..]);
            }
            out
        };
        value.ensure_finite("insert_rows")?;
        Ok(self.push(
            value,
            vec![context.0, inserts.0],
            Some(Box::new(move |g, ps, _, wants| {
                let (w, c) = (ps[0].shape()[0], ps[0].shape()[1]);
                let k_count = ps[1].shape()[0];
                vec![
                    wants[0].then(|| {
                        let mut out = NdArray::zeros(ps[0].shape());
                        for k in 0..k_count {
                            let src = &g.data()[k * (w + 1) * c..(k + 1) * (w + 1) * c];
                            let od = out.data_mut();
                            for (o, &v) in od[..at * c].iter_mut().zip(&src[..at * c]) {
                                *o += v;
                            }
                            for (o, &v) in od[at * c..].iter_mut().zip(&src[(at + 1) * c..]) {
                                *o += v;
                            }
                        }
                        out
                    }),
                    wants[1].then(|| {
                        let mut out = NdArray::zeros(ps[1].shape());
                        for k in 0..k_count {
                            out.data_mut()[k * c..(k + 1) * c].copy_from_slice(
                                &g.data()[k * (w + 1) * c + at * c..k * (w + 1) * c + (at + 1) * c],
                            );
                        }
                        out
                    }),
                ]
            })),
            false,
        ))
    }

    pub fn diag_part(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 || x.shape()[0] != x.shape()[1] {
                return Err(DiffError::ShapeMismatch {
                    op: "diag_part",
                    detail: format!("{:?} is not square", x.shape()),
                });
            }
            let n = x.shape()[0];
            NdArray::from_vec(vec![n], (0..n).map(|i| x.data()[i * n + i]).collect())?
        };
        self.unary("diag_part", a, value, |g, ps, _| {
            let n = ps[0].shape()[0];
            let mut out = NdArray::zeros(ps[0].shape());
            for i in 0..n {
                out.data_mut()[i * n + i] = g.data()[i];
            }
            out
        })
    }

    /// Overwrites the diagonal with a large negative constant so softmax-style
    /// reductions ignore it. No gradient flows through the diagonal.
    pub fn mask_diag(&self, a: Var) -> Result<Var, DiffError> {
        const MASK: f64 = -1e30;
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if x.rank() != 2 || x.shape()[0] != x.shape()[1] {
                return Err(DiffError::ShapeMismatch {
                    op: "mask_diag",
                    detail: format!("{:?} is not square", x.shape()),
                });
            }
            let n = x.shape()[0];
            let mut out = x.clone();
            for i in 0..n {
                out.data_mut()[i * n + i] = MASK;
            }
            out
        };
        self.unary("mask_diag", a, value, |g, ps, _| {
            let n = ps[0].shape()[0];
            let mut out = g.clone();
            for i in 0..n {
                out.data_mut()[i * n + i] = 0.0;
            }
            out
        })
    }

    // ---- reductions ----

    pub fn mean_axis(&self, a: Var, axis: usize) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            if axis >= x.rank() {
                return Err(DiffError::ShapeMismatch {
                    op: "mean_axis",
                    detail: format!("axis {axis} of {:?}", x.shape()),
                });
            }
            let dim = x.shape()[axis];
            let inner: usize = x.shape()[axis + 1..].iter().product();
            let outer: usize = x.shape()[..axis].iter().product();
            let mut shape = x.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            let mut out = NdArray::zeros(&shape);
            for o in 0..outer {
                for d in 0..dim {
                    let src = &x.data()[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                    let dst = &mut out.data_mut()[o * inner..(o + 1) * inner];
                    for (acc, &v) in dst.iter_mut().zip(src) {
                        *acc += v;
                    }
                }
            }
            let scale = 1.0 / dim as f64;
            for v in out.data_mut() {
                *v *= scale;
            }
            out
        };
        value.ensure_finite("mean_axis")?;
        Ok(self.push(
            value,
            vec![a.0],
            Some(Box::new(move |g, ps, _, wants| {
                vec![wants[0].then(|| {
                    let x = ps[0];
                    let dim = x.shape()[axis];
                    let inner: usize = x.shape()[axis + 1..].iter().product();
                    let outer: usize = x.shape()[..axis].iter().product();
                    let scale = 1.0 / dim as f64;
                    let mut out = NdArray::zeros(x.shape());
                    for o in 0..outer {
                        let src = &g.data()[o * inner..(o + 1) * inner];
                        for d in 0..dim {
                            let dst = &mut out.data_mut()
                                [(o * dim + d) * inner..(o * dim + d + 1) * inner];
                            for (t, &v) in dst.iter_mut().zip(src) {
                                *t = v * scale;
                            }
                        }
                    }
                    out
                })]
            })),
            false,
        ))
    }

    pub fn mean_all(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            NdArray::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        };
        self.unary("mean_all", a, value, |g, ps, _| {
            NdArray::filled(ps[0].shape(), g.item() / ps[0].len() as f64)
        })
    }

    /// Running sum along the last axis.
    pub fn prefix_sum_lastdim(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let w = *x.shape().last().unwrap();
            let mut out = x.clone();
            for row in out.data_mut().chunks_mut(w) {
                for i in 1..w {
                    row[i] += row[i - 1];
                }
            }
            out
        };
        value.ensure_finite("prefix_sum_lastdim")?;
        self.unary("prefix_sum_lastdim", a, value, |g, _, _| {
            let w = *g.shape().last().unwrap();
            let mut out = g.clone();
            for row in out.data_mut().chunks_mut(w) {
                for i in (0..w.saturating_sub(1)).rev() {
                    row[i] += row[i + 1];
                }
            }
            out
        })
    }

    /// `log(sum(exp(x)))` over the last axis, numerically stabilized.
    pub fn logsumexp_lastdim(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let w = *x.shape().last().unwrap();
            let mut shape = x.shape().to_vec();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            let data: Vec<f64> = x
                .data()
                .chunks(w)
                .map(|row| {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    m + row.iter().map(|&v| fast_exp(v - m)).sum::<f64>().ln()
                })
                .collect();
            NdArray::from_vec(shape, data)?
        };
        value.ensure_finite("logsumexp_lastdim")?;
        self.unary("logsumexp_lastdim", a, value, |g, ps, out| {
            let x = ps[0];
            let w = *x.shape().last().unwrap();
            let mut dx = NdArray::zeros(x.shape());
            for (r, row) in x.data().chunks(w).enumerate() {
                let lse = out.data()[r];
                let gv = g.data()[r];
                let dst = &mut dx.data_mut()[r * w..(r + 1) * w];
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = gv * fast_exp(v - lse);
                }
            }
            dx
        })
    }

    // ---- dense products ----

    /// `a @ b`. Accepts rank-2 x rank-2, a batched lhs with a rank-2 rhs
    /// (shared weight matrix), or two batched operands with equal leading
    /// dimensions.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (value, batched) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            matmul_forward(x, y, false)?
        };
        value.ensure_finite("matmul")?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, ps, _, wants| {
                matmul_backward(g, ps[0], ps[1], batched, false, wants)
            })),
            false,
        ))
    }

    /// `a @ b^T` over the last two axes; same operand forms as [`Tape::matmul`]
    /// except the shared-rhs form, which is not needed.
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (value, batched) = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            matmul_forward(x, y, true)?
        };
        value.ensure_finite("matmul_nt")?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(move |g, ps, _, wants| {
                matmul_backward(g, ps[0], ps[1], batched, true, wants)
            })),
            false,
        ))
    }

    // ---- nonlinearities ----

    pub fn gelu(&self, a: Var) -> Result<Var, DiffError> {
        // tanh values are kept for the backward rule
        let (value, tanh_cache) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let mut out = NdArray::zeros(x.shape());
            let mut cache = vec![0.0f64; x.len()];
            let chunk = x.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
            out.data_mut()
                .par_chunks_mut(chunk)
                .zip(cache.par_chunks_mut(chunk))
                .zip(x.data().par_chunks(chunk))
                .for_each(|((oc, tc), xc)| {
                    for ((o, t), &v) in oc.iter_mut().zip(tc.iter_mut()).zip(xc) {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let th = fast_tanh(u);
                        *t = th;
                        *o = 0.5 * v * (1.0 + th);
                    }
                });
            (out, cache)
        };
        value.ensure_finite("gelu")?;
        self.unary("gelu", a, value, move |g, ps, _| {
            let x = ps[0];
            let mut dx = NdArray::zeros(x.shape());
            let chunk = x.len().div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
            dx.data_mut()
                .par_chunks_mut(chunk)
                .zip(g.data().par_chunks(chunk))
                .zip(x.data().par_chunks(chunk))
                .zip(tanh_cache.par_chunks(chunk))
                .for_each(|(((dc, gc), xc), tc)| {
                    for (((d, &gv), &v), &t) in
                        dc.iter_mut().zip(gc).zip(xc).zip(tc)
                    {
                        let sech2 = 1.0 - t * t;
                        *d = gv
                            * (0.5 * (1.0 + t)
                                + 0.5 * v * sech2 * GELU_C * (1.0 + 3.0 * 0.044715 * v * v));
                    }
                });
            dx
        })
    }

    /// Elementwise square root; the subgradient at zero is taken as zero.
    pub fn sqrt_elem(&self, a: Var) -> Result<Var, DiffError> {
        let value = {
            let x = &self.nodes.borrow()[a.0].value;
            if x.data().iter().any(|&v| v < 0.0) {
                return Err(DiffError::NonFinite { op: "sqrt_elem" });
            }
            x.map(f64::sqrt)
        };
        self.unary("sqrt_elem", a, value, |g, _, out| {
            zip_map(g, out, |gv, y| if y > 1e-150 { gv * 0.5 / y } else { 0.0 })
        })
    }

    /// Elementwise absolute value; the subgradient at zero is taken as zero.
    pub fn abs_elem(&self, a: Var) -> Result<Var, DiffError> {
        let value = self.nodes.borrow()[a.0].value.map(f64::abs);
        self.unary("abs_elem", a, value, |g, ps, _| {
            zip_map(g, ps[0], |gv, x| {
                if x > 0.0 {
                    gv
                } else if x < 0.0 {
                    -gv
                } else {
                    0.0
                }
            })
        })
    }

    /// Row-wise normalization over the last axis: `y = x_hat * gain + bias`
    /// with `x_hat = (x - mean) / sqrt(var + eps)` (biased variance).
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, DiffError> {
        let (value, stats) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let gv = &nodes[gain.0].value;
            let bv = &nodes[bias.0].value;
            let c = *xv.shape().last().unwrap();
            if gv.shape() != [c] || bv.shape() != [c] {
                return Err(DiffError::ShapeMismatch {
                    op: "layer_norm",
                    detail: format!(
                        "gain {:?} / bias {:?} for rows of {c}",
                        gv.shape(),
                        bv.shape()
                    ),
                });
            }
            let mut out = NdArray::zeros(xv.shape());
            let stats: Vec<(f64, f64)> = xv
                .data()
                .par_chunks(c)
                .map(|row| {
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    (mean, 1.0 / (var + eps).sqrt())
                })
                .collect();
            let xdata = xv.data();
            par_rows(out.data_mut(), c, |r, dst| {
                let (mean, inv) = stats[r];
                let row = &xdata[r * c..(r + 1) * c];
                for ((d, &v), (&g0, &b0)) in
                    dst.iter_mut().zip(row).zip(gv.data().iter().zip(bv.data()))
                {
                    *d = (v - mean) * inv * g0 + b0;
                }
            });
            (out, stats)
        };
        value.ensure_finite("layer_norm")?;
        Ok(self.push(
            value,
            vec![x.0, gain.0, bias.0],
            Some(Box::new(move |g, ps, _, wants| {
                let (xv, gainv) = (ps[0], ps[1]);
                let c = *xv.shape().last().unwrap();
                let cf = c as f64;
                let dx = wants[0].then(|| {
                    let mut out = NdArray::zeros(xv.shape());
                    let xdata = xv.data();
                    par_rows(out.data_mut(), c, |r, dst| {
                        let (mean, inv) = stats[r];
                        let row = &xdata[r * c..(r + 1) * c];
                        let grow = &g.data()[r * c..(r + 1) * c];
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for ((&gv, &xv0), &ga) in grow.iter().zip(row).zip(gainv.data()) {
                            let h = gv * ga;
                            mean_h += h;
                            mean_hx += h * (xv0 - mean) * inv;
                        }
                        mean_h /= cf;
                        mean_hx /= cf;
                        for ((d, (&gv, &xv0)), &ga) in dst
                            .iter_mut()
                            .zip(grow.iter().zip(row))
                            .zip(gainv.data())
                        {
                            let h = gv * ga;
                            let xh = (xv0 - mean) * inv;
                            *d = inv * (h - mean_h - xh * mean_hx);
                        }
                    });
                    out
                });
                let dgain = wants[1].then(|| {
                    let mut out = NdArray::zeros(&[c]);
                    for (r, row) in xv.data().chunks(c).enumerate() {
                        let (mean, inv) = stats[r];
                        let grow = &g.data()[r * c..(r + 1) * c];
                        for ((o, &gv), &xv0) in out.data_mut().iter_mut().zip(grow).zip(row) {
                            *o += gv * (xv0 - mean) * inv;
                        }
                    }
                    out
                });
                let dbias = wants[2].then(|| {
                    let mut out = NdArray::zeros(&[c]);
                    for grow in g.data().chunks(c) {
                        for (o, &gv) in out.data_mut().iter_mut().zip(grow) {
                            *o += gv;
                        }
                    }
                    out
                });
                vec![dx, dgain, dbias]
            })),
            false,
        ))
    }

    pub fn softmax_lastdim(&self, a: Var) -> Result<Var, DiffError> {
        self.softmax_scaled_lastdim(a, 1.0)
    }

    /// `softmax(c * x)` over the last axis with the scale fused in.
    pub fn softmax_scaled_lastdim(&self, a: Var, c: f64) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let w = *x.shape().last().unwrap();
            let mut out = x.clone();
            par_rows(out.data_mut(), w, |_, row| {
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v * c));
                for v in row.iter_mut() {
                    *v = fast_exp(*v * c - m);
                }
                let sum: f64 = row.iter().sum();
                let inv = 1.0 / sum;
                for v in row.iter_mut() {
                    *v *= inv;
                }
            });
            out
        };
        value.ensure_finite("softmax_lastdim")?;
        self.unary("softmax_lastdim", a, value, move |g, _, out| {
            let w = *out.shape().last().unwrap();
            let mut dx = NdArray::zeros(out.shape());
            par_rows(dx.data_mut(), w, |r, dst| {
                let yrow = &out.data()[r * w..(r + 1) * w];
                let grow = &g.data()[r * w..(r + 1) * w];
                let s: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                for ((d, &y), &gv) in dst.iter_mut().zip(yrow).zip(grow) {
                    *d = c * y * (gv - s);
                }
            });
            dx
        })
    }

    /// Rows (last axis) scaled to unit Euclidean norm.
    pub fn l2_normalize_rows(&self, a: Var) -> Result<Var, DiffError> {
        let (value, norms) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[a.0].value;
            let w = *x.shape().last().unwrap();
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.len() / w);
            for row in out.data_mut().chunks_mut(w) {
                let n = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(DiffError::ZeroVector {
                        op: "l2_normalize_rows",
                    });
                }
                norms.push(n);
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            (out, norms)
        };
        value.ensure_finite("l2_normalize_rows")?;
        self.unary("l2_normalize_rows", a, value, move |g, _, out| {
            let w = *out.shape().last().unwrap();
            let mut dx = NdArray::zeros(out.shape());
            for (r, (yrow, grow)) in out.data().chunks(w).zip(g.data().chunks(w)).enumerate() {
                let dot: f64 = yrow.iter().zip(grow).map(|(y, gv)| y * gv).sum();
                let n = norms[r];
                let dst = &mut dx.data_mut()[r * w..(r + 1) * w];
                for ((d, &y), &gv) in dst.iter_mut().zip(yrow).zip(grow) {
                    *d = (gv - y * dot) / n;
                }
            }
            dx
        })
    }

    /// Cosine similarity of two vectors (single-element result).
    pub fn cosine_sim(&self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = {
            let nodes = self.nodes.borrow();
            let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape("cosine_sim", x, y)?;
            let na = l2_norm(x.data());
            let nb = l2_norm(y.data());
            if na == 0.0 || nb == 0.0 {
                return Err(DiffError::ZeroVector { op: "cosine_sim" });
            }
            let dot: f64 = x.data().iter().zip(y.data()).map(|(u, v)| u * v).sum();
            NdArray::scalar(dot / (na * nb))
        };
        value.ensure_finite("cosine_sim")?;
        Ok(self.push(
            value,
            vec![a.0, b.0],
            Some(Box::new(|g, ps, out, wants| {
                let (x, y) = (ps[0], ps[1]);
                let na = l2_norm(x.data());
                let nb = l2_norm(y.data());
                let cos = out.item();
                let gv = g.item();
                let da = wants[0].then(|| {
                    let mut d = NdArray::zeros(x.shape());
                    for ((o, &xv), &yv) in d.data_mut().iter_mut().zip(x.data()).zip(y.data()) {
                        *o = gv * (yv / (na * nb) - cos * xv / (na * na));
                    }
                    d
                });
                let db = wants[1].then(|| {
                    let mut d = NdArray::zeros(y.shape());
                    for ((o, &yv), &xv) in d.data_mut().iter_mut().zip(y.data()).zip(x.data()) {
                        *o = gv * (xv / (na * nb) - cos * yv / (nb * nb));
                    }
                    d
                });
                vec![da, db]
            })),
            false,
        ))
    }

    /// Leftmost score at which the piecewise-linear interpolation of the
    /// cumulative sums of `probs` (knots at `anchors`, plus a synthetic left
    /// anchor one mean spacing before the first) reaches `theta`.
    ///
    /// The subgradient at plateau edges is the left derivative.
    pub fn quantile_from_probs(
        &self,
        probs: Var,
        anchors: &[f64],
        theta: f64,
    ) -> Result<Var, DiffError> {
        if !(0.0 < theta && theta < 1.0) {
            return Err(DiffError::ThetaOutOfRange { theta });
        }
        let (value, seg) = {
            let nodes = self.nodes.borrow();
            let p = &nodes[probs.0].value;
            let k = p.len();
            if p.rank() != 1 || anchors.len() != k || k == 0 {
                return Err(DiffError::ShapeMismatch {
                    op: "quantile_from_probs",
                    detail: format!("{k} probabilities vs {} anchors", anchors.len()),
                });
            }
            let (xs, cs) = quantile_knots(p.data(), anchors);
            let seg = interp_leftmost(&xs, &cs, theta);
            (NdArray::scalar(seg.4), (seg.0, seg.1, seg.2, seg.3))
        };
        value.ensure_finite("quantile_from_probs")?;
        let (t, d, u, w) = seg;
        self.unary("quantile_from_probs", probs, value, move |g, ps, _| {
            let k = ps[0].len();
            let gv = g.item();
            let mut dp = NdArray::zeros(&[k]);
            if d > 0.0 {
                // cumulative at knot j (j >= 1) is sum of probs[..j]
                let d_lo = if t >= 2 { w * (u - d) / (d * d) } else { 0.0 };
                let d_hi = -u * w / (d * d);
                for (i, o) in dp.data_mut().iter_mut().enumerate() {
                    let mut acc = 0.0;
                    if t >= 2 && i <= t - 2 {
                        acc += d_lo;
                    }
                    if i <= t - 1 {
                        acc += d_hi;
                    }
                    *o = gv * acc;
                }
            }
            dp
        })
    }

    // ---- backward ----

    /// Reverse sweep from a single-element root. Returns leaf gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        if nodes[root.0].value.len() != 1 {
            return Err(DiffError::NotScalar);
        }
        let mut grads: Vec<Option<NdArray>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(NdArray::filled(nodes[root.0].value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let node = &nodes[id];
            if !node.needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(vjp) = &node.vjp else {
                continue; // leaf: keep its gradient
            };
            let g = grads[id].take().expect("checked above");
            g.ensure_finite("backward")?;
            let parent_vals: Vec<&NdArray> =
                node.parents.iter().map(|&p| &nodes[p].value).collect();
            let wants: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].needs_grad)
                .collect();
            let pgrads = vjp(&g, &parent_vals, &node.value, &wants);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if let Some(pg) = pg {
                    debug_assert_eq!(pg.shape(), nodes[p].value.shape());
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

// ---- free helpers ----

fn same_shape(op: &'static str, a: &NdArray, b: &NdArray) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::ShapeMismatch {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn zip_map(a: &NdArray, b: &NdArray, f: impl Fn(f64, f64) -> f64) -> NdArray {
    debug_assert_eq!(a.len(), b.len());
    NdArray::from_vec(
        a.shape().to_vec(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&u, &v)| f(u, v))
            .collect(),
    )
    .expect("same shape")
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Leftmost point where the piecewise-linear curve through `(xs, cs)`
/// reaches `theta`. Returns `(knot index, rise, theta - lower, run, score)`;
/// since the scan takes the first knot at or above `theta`, a plateau at
/// exactly `theta` resolves to its left edge.
pub(crate) fn interp_leftmost(
    xs: &[f64],
    cs: &[f64],
    theta: f64,
) -> (usize, f64, f64, f64, f64) {
    let t = (1..xs.len())
        .find(|&i| cs[i] >= theta)
        .unwrap_or(xs.len() - 1);
    let d = cs[t] - cs[t - 1];
    let u = theta - cs[t - 1];
    let w = xs[t] - xs[t - 1];
    let s = if d > 0.0 { xs[t - 1] + u * w / d } else { xs[t] };
    (t, d, u, w, s)
}

/// Interpolation knots: a synthetic left anchor one mean spacing before the
/// first anchor at cumulative 0, then the running sums at each anchor.
pub(crate) fn quantile_knots(probs: &[f64], anchors: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let k = probs.len();
    let spacing = if k >= 2 {
        (anchors[k - 1] - anchors[0]) / (k - 1) as f64
    } else {
        1.0
    };
    let mut xs = Vec::with_capacity(k + 1);
    let mut cs = Vec::with_capacity(k + 1);
    xs.push(anchors[0] - spacing);
    cs.push(0.0);
    let mut acc = 0.0;
    for (&p, &a) in probs.iter().zip(anchors) {
        acc += p;
        xs.push(a);
        cs.push(acc);
    }
    (xs, cs)
}

fn narrow_copy(x: &NdArray, axis: usize, start: usize, len: usize) -> NdArray {
    let dim = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = NdArray::zeros(&shape);
    for o in 0..outer {
        let src = &x.data()[o * dim * inner + start * inner..o * dim * inner + (start + len) * inner];
        out.data_mut()[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
    }
    out
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

fn permute_copy(x: &NdArray, perm: &[usize]) -> NdArray {
    let rank = x.rank();
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    // stride of out axis i in the input layout
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = NdArray::zeros(&out_shape);
    let slice_len: usize = out_shape[1..].iter().product();
    let walk = |o0: usize, chunk: &mut [f64]| {
        let mut coords = vec![0usize; rank];
        let mut src = o0 * strides[0];
        for o in chunk.iter_mut() {
            *o = x.data()[src];
            for axis in (1..rank).rev() {
                coords[axis] += 1;
                src += strides[axis];
                if coords[axis] < out_shape[axis] {
                    break;
                }
                src -= strides[axis] * out_shape[axis];
                coords[axis] = 0;
            }
        }
    };
    if out.len() >= (1 << 16) && out_shape[0] > 1 {
        out.data_mut()
            .par_chunks_mut(slice_len)
            .enumerate()
            .for_each(|(o0, chunk)| walk(o0, chunk));
    } else {
        for (o0, chunk) in out.data_mut().chunks_mut(slice_len).enumerate() {
            walk(o0, chunk);
        }
    }
    out
}

fn reverse_lastdim_copy(x: &NdArray) -> NdArray {
    let w = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

/// Shared shape logic for `matmul` / `matmul_nt`. Returns the product and
/// whether both operands were batched with equal leading dimensions.
fn matmul_forward(x: &NdArray, y: &NdArray, nt: bool) -> Result<(NdArray, bool), DiffError> {
    let op: &'static str = if nt { "matmul_nt" } else { "matmul" };
    let xr = x.rank();
    let yr = y.rank();
    if xr < 2 {
        return Err(DiffError::ShapeMismatch {
            op,
            detail: format!("lhs rank {} too small", xr),
        });
    }
    let (m, k) = (x.shape()[xr - 2], x.shape()[xr - 1]);
    if yr == 2 && !nt {
        // shared rhs: flatten lhs rows
        let (k2, n) = (y.shape()[0], y.shape()[1]);
        if k2 != k {
            return Err(DiffError::ShapeMismatch {
                op,
                detail: format!("{:?} @ {:?}", x.shape(), y.shape()),
            });
        }
        let rows = x.len() / k;
        let data = matmul_nn(x.data(), y.data(), rows, k, n);
        let mut shape = x.shape().to_vec();
        shape[xr - 1] = n;
        return Ok((NdArray::from_vec(shape, data)?, false));
    }
    if xr != yr || x.shape()[..xr - 2] != y.shape()[..yr - 2] {
        return Err(DiffError::ShapeMismatch {
            op,
            detail: format!("{:?} with {:?}", x.shape(), y.shape()),
        });
    }
    let (yk, n) = if nt {
        (y.shape()[yr - 1], y.shape()[yr - 2])
    } else {
        (y.shape()[yr - 2], y.shape()[yr - 1])
    };
    if yk != k {
        return Err(DiffError::ShapeMismatch {
            op,
            detail: format!("{:?} with {:?}", x.shape(), y.shape()),
        });
    }
    let batch: usize = x.shape()[..xr - 2].iter().product();
    let mut shape = x.shape()[..xr - 2].to_vec();
    shape.push(m);
    shape.push(n);
    let mut out = NdArray::zeros(&shape);
    let kernel = |xa: &[f64], ya: &[f64], oa: &mut [f64]| {
        if nt {
            matmul_nt_into(xa, ya, m, k, n, oa);
        } else {
            matmul_nn_into(xa, ya, m, k, n, oa);
        }
    };
    if batch > 1 && batch * m * k * n >= PAR_MACS {
        out.data_mut()
            .par_chunks_mut(m * n)
            .zip(x.data().par_chunks(m * k))
            .zip(y.data().par_chunks(k * n))
            .for_each(|((oa, xa), ya)| kernel(xa, ya, oa));
    } else {
        for ((oa, xa), ya) in out
            .data_mut()
            .chunks_mut(m * n)
            .zip(x.data().chunks(m * k))
            .zip(y.data().chunks(k * n))
        {
            kernel(xa, ya, oa);
        }
    }
    Ok((out, batch > 0 && xr > 2))
}

fn matmul_backward(
    g: &NdArray,
    x: &NdArray,
    y: &NdArray,
    batched: bool,
    nt: bool,
    wants: &[bool],
) -> Vec<Option<NdArray>> {
    let xr = x.rank();
    let (m, k) = (x.shape()[xr - 2], x.shape()[xr - 1]);
    if !batched && y.rank() == 2 && !nt {
        // flattened rows against a shared weight matrix
        let n = y.shape()[1];
        let rows = x.len() / k;
        let dx = wants[0].then(|| {
            NdArray::from_vec(
                x.shape().to_vec(),
                matmul_nt(g.data(), y.data(), rows, n, k),
            )
            .expect("shape")
        });
        let dy = wants[1].then(|| {
            NdArray::from_vec(
                y.shape().to_vec(),
                matmul_tn(x.data(), g.data(), rows, k, n),
            )
            .expect("shape")
        });
        return vec![dx, dy];
    }
    if !batched && !nt {
        // plain rank-2 x rank-2 handled above; unreachable
        unreachable!("non-batched matmul always has a rank-2 rhs");
    }
    if !batched && nt {
        let n = y.shape()[0];
        let dx = wants[0].then(|| {
            NdArray::from_vec(x.shape().to_vec(), matmul_nn(g.data(), y.data(), m, n, k))
                .expect("shape")
        });
        let dy = wants[1].then(|| {
            NdArray::from_vec(y.shape().to_vec(), matmul_tn(g.data(), x.data(), m, n, k))
                .expect("shape")
        });
        return vec![dx, dy];
    }
    // batched, equal leading dims
    let n = *g.shape().last().unwrap();
    let batch: usize = x.shape()[..xr - 2].iter().product();
    let dx = wants[0].then(|| {
        let mut out = NdArray::zeros(x.shape());
        let body = |oa: &mut [f64], ga: &[f64], ya: &[f64]| {
            if nt {
                matmul_nn_into(ga, ya, m, n, k, oa);
            } else {
                matmul_nt_into(ga, ya, m, n, k, oa);
            }
        };
        if batch > 1 && batch * m * n * k >= PAR_MACS {
            out.data_mut()
                .par_chunks_mut(m * k)
                .zip(g.data().par_chunks(m * n))
                .zip(y.data().par_chunks(y.len() / batch))
                .for_each(|((oa, ga), ya)| body(oa, ga, ya));
        } else {
            for ((oa, ga), ya) in out
                .data_mut()
                .chunks_mut(m * k)
                .zip(g.data().chunks(m * n))
                .zip(y.data().chunks(y.len() / batch))
            {
                body(oa, ga, ya);
            }
        }
        out
    });
    let dy = wants[1].then(|| {
        let mut out = NdArray::zeros(y.shape());
        let slice = y.len() / batch;
        let body = |oa: &mut [f64], ga: &[f64], xa: &[f64]| {
            if nt {
                matmul_tn_into(ga, xa, m, n, k, oa);
            } else {
                matmul_tn_into(xa, ga, m, k, n, oa);
            }
        };
        if batch > 1 && batch * m * n * k >= PAR_MACS {
            out.data_mut()
                .par_chunks_mut(slice)
                .zip(g.data().par_chunks(m * n))
                .zip(x.data().par_chunks(m * k))
                .for_each(|((oa, ga), xa)| body(oa, ga, xa));
        } else {
            for ((oa, ga), xa) in out
                .data_mut()
                .chunks_mut(slice)
                .zip(g.data().chunks(m * n))
                .zip(x.data().chunks(m * k))
            {
                body(oa, ga, xa);
            }
        }
        out
    });
    vec![dx, dy]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let t = Tape::new();
        let x = t.leaf(NdArray::zeros(&[5]));
        let y = t.softmax_lastdim(x).unwrap();
        for &v in t.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let t = Tape::new();
        let x = t.leaf(NdArray::from_vec(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 3.0, -1.0]).unwrap());
        let y = t.softmax_lastdim(x).unwrap();
        let v = t.value_cloned(y);
        for row in v.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cosine_of_self_is_one() {
        let t = Tape::new();
        let a = t.leaf(NdArray::from_vec(vec![3], vec![0.3, -1.2, 2.0]).unwrap());
        let c = t.cosine_sim(a, a).unwrap();
        assert!((t.item_of(c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_rejects_zero_vector() {
        let t = Tape::new();
        let a = t.leaf(NdArray::zeros(&[3]));
        let b = t.leaf(NdArray::from_vec(vec![3], vec![1.0, 0.0, 0.0]).unwrap());
        assert!(matches!(
            t.cosine_sim(a, b),
            Err(DiffError::ZeroVector { .. })
        ));
    }

    #[test]
    fn gelu_matches_direct_formula_evaluation() {
        // direct scalar evaluation of the tanh form at x = 1
        let x = 1.0f64;
        let direct = 0.5 * x
            * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh());
        let t = Tape::new();
        let a = t.leaf(NdArray::scalar(1.0));
        let y = t.gelu(a).unwrap();
        assert!((t.item_of(y) - direct).abs() < 1e-15);
        assert!((direct - 0.841_191_990_607_477_3).abs() < 1e-12);
    }

    #[test]
    fn quadratic_backward_is_exact() {
        // loss = 0.5 * ||x||^2, gradient is x itself
        let t = Tape::new();
        let x = t.leaf(NdArray::from_vec(vec![4], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let sq = t.mul(x, x).unwrap();
        let mean = t.mean_all(sq).unwrap();
        let loss = t.scale(mean, 2.0).unwrap(); // 0.5 * sum = 2 * mean for len 4
        let grads = t.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        for (g, v) in gx.data().iter().zip([1.0, -2.0, 3.0, 0.5]) {
            assert!((g - v).abs() < 1e-14);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let t = Tape::new();
        let x = t.leaf(NdArray::scalar(2.0));
        let c = t.constant(NdArray::scalar(3.0));
        let y = t.mul(x, c).unwrap();
        let grads = t.backward(y).unwrap();
        assert!((grads.get(x).unwrap().item() - 3.0).abs() < 1e-15);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let t = Tape::new();
        let x = t.leaf(NdArray::zeros(&[3]));
        assert!(matches!(t.backward(x), Err(DiffError::NotScalar)));
    }

    #[test]
    fn permute_roundtrip() {
        let t = Tape::new();
        let x = t.leaf(NdArray::from_vec(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap());
        let p = t.permute_axes(x, &[2, 0, 1]).unwrap();
        let back = t.permute_axes(p, &[1, 2, 0]).unwrap();
        assert_eq!(t.value_cloned(back).data(), t.value_cloned(x).data());
        assert_eq!(t.shape_of(p), vec![4, 2, 3]);
    }

    #[test]
    fn prefix_sum_matches_manual() {
        let t = Tape::new();
        let x = t.leaf(NdArray::from_vec(vec![5], vec![0.1, 0.2, 0.3, 0.25, 0.15]).unwrap());
        let c = t.prefix_sum_lastdim(x).unwrap();
        let got = t.value_cloned(c);
        let want = [0.1, 0.3, 0.6, 0.85, 1.0];
        for (a, b) in got.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn narrow_and_scatter_back() {
        let t = Tape::new();
        let x = t.leaf(NdArray::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let w = t.narrow(x, 1, 1, 2).unwrap();
        assert_eq!(t.value_cloned(w).data(), &[2., 3., 5., 6.]);
        let m = t.mean_all(w).unwrap();
        let grads = t.backward(m).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx.data(), &[0.0, 0.25, 0.25, 0.0, 0.25, 0.25]);
    }
}

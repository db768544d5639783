//! Define-by-run tape: every forward op appends a node; `backward` walks the
//! nodes in exact reverse order of recording.

use std::collections::HashMap;

use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;

use super::param::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sum(Var),
    MaskedSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    let k = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = T::lit(GELU_C);
    let half = T::lit(0.5);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * x * x);
    (y, dy)
}

/// c[m×n] += a[m×k] · b[k×n]
fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m×k] += g[m×n] · b[k×n]ᵀ
fn mm_bt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                s += gv * bv;
            }
            c[i * k + p] += s;
        }
    }
}

/// c[k×n] += a[m×k]ᵀ · g[m×n]
fn mm_at_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("recorded node shape is consistent")
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    /// Loads a parameter onto the tape; repeated loads return the same handle.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.shape().to_vec(), p.value.data().to_vec(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: s.to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(vec![c, r], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// `x[r×c] + row[c]`, broadcasting the row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = dims2(self.shape(x));
        if self.value(row).len() != c {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let b = self.value(row);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|r| r.iter().zip(b).map(|(&u, &v)| u + v))
            .collect();
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Row-wise softmax over positions whose mask entry is 0; positions whose
    /// mask entry is −∞ are excluded from the normalizer and output exactly 0.
    pub fn masked_softmax(&mut self, logits: Var, mask: &Tensor<T>) -> Result<Var> {
        if self.shape(logits) != mask.shape() {
            return Err(Error::Shape {
                op: "masked_softmax",
                left: self.shape(logits).to_vec(),
                right: mask.shape().to_vec(),
            });
        }
        let (rows, cols) = dims2(self.shape(logits));
        let x = self.value(logits);
        let m = mask.data();
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mr = &m[r * cols..(r + 1) * cols];
            let mut max = T::neg_infinity();
            let mut any = false;
            for (&xv, &mv) in xr.iter().zip(mr) {
                if mv == T::zero() {
                    any = true;
                    if xv > max {
                        max = xv;
                    }
                } else if !(mv.is_infinite() && mv < T::zero()) {
                    return Err(contract(format!("mask entry {mv} is neither 0 nor -inf")));
                }
            }
            if !any {
                return Err(Error::DegenerateRow { row: r });
            }
            let or = &mut out[r * cols..(r + 1) * cols];
            let mut z = T::zero();
            for ((o, &xv), &mv) in or.iter_mut().zip(xr).zip(mr) {
                if mv == T::zero() {
                    *o = (xv - max).exp();
                    z += *o;
                }
            }
            for o in or.iter_mut() {
                *o /= z;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(self.shape(logits).to_vec(), out, Op::MaskedSoftmax(logits), rg))
    }

    /// Per-row normalization to zero mean / unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (rows, d) = dims2(self.shape(x));
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gain).to_vec(),
            });
        }
        if eps <= T::zero() {
            return Err(contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let dn = T::from_usize(d).expect("dim");
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Gaussian-error linear unit, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), rg)
    }

    /// Selects rows of a matrix by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index {
                what: "row",
                index: bad,
                bound: rows,
            });
        }
        if ids.is_empty() {
            return Err(contract("gather_rows with no indices"));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = dims2(self.shape(x));
        if len == 0 || start + len > cols {
            return Err(Error::Index {
                what: "column",
                index: start + len,
                bound: cols,
            });
        }
        let src = self.value(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, len], out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = dims2(self.shape(parts[0])).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = dims2(self.shape(p));
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = dims2(self.shape(p)).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = dims2(self.shape(parts[0])).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2(self.shape(p));
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean over rows of `−log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, classes) = dims2(self.shape(logits));
        if rows != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Index {
                what: "class",
                index: bad,
                bound: classes,
            });
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); rows * classes];
        let mut total = T::zero();
        for r in 0..rows {
            let xr = &x[r * classes..(r + 1) * classes];
            let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = xr.iter().map(|&v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            total += log_z - xr[targets[r]];
            for (p, &v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(xr) {
                *p = (v - log_z).exp();
            }
        }
        let loss = total / T::from_usize(rows).expect("rows");
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) back through the tape and returns the
    /// gradients of every parameter the loss depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Param | Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let entries = self
            .params
            .iter()
            .filter_map(|(&id, &v)| grads.get_mut(v.0).and_then(Option::take).map(|g| (id, g)))
            .collect();
        Ok(Gradients::from_entries(entries))
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(&self.nodes[a.0].shape);
                let n = node.shape[1];
                if self.rg(*a) {
                    let da = slot(grads, *a, m * k);
                    mm_bt_acc(g, self.value(*b), da, m, n, k);
                }
                if self.rg(*b) {
                    let db = slot(grads, *b, k * n);
                    mm_at_acc(self.value(*a), g, db, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let (c, r) = (node.shape[0], node.shape[1]);
                let da = slot(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        da[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        let d = slot(grads, *v, g.len());
                        d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b);
                    let d = slot(grads, *a, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * bv[i];
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a);
                    let d = slot(grads, *b, g.len());
                    for i in 0..g.len() {
                        d[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    let d = slot(grads, *x, g.len());
                    d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                if self.rg(*row) {
                    let c = len(*row);
                    let d = slot(grads, *row, c);
                    for chunk in g.chunks(c) {
                        d.iter_mut().zip(chunk).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Scale(x, s) => {
                let d = slot(grads, *x, g.len());
                d.iter_mut().zip(g).for_each(|(a, &b)| *a += b * *s);
            }
            Op::Sum(x) => {
                let n = len(*x);
                let d = slot(grads, *x, n);
                d.iter_mut().for_each(|a| *a += g[0]);
            }
            Op::MaskedSoftmax(x) => {
                let (rows, cols) = dims2(&node.shape);
                let y = &node.value;
                let d = slot(grads, *x, rows * cols);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        d[r * cols + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, dim) = dims2(&node.shape);
                let gv = self.value(*gain);
                if self.rg(*gain) {
                    let dg = slot(grads, *gain, dim);
                    for r in 0..rows {
                        for j in 0..dim {
                            dg[j] += g[r * dim + j] * xhat[r * dim + j];
                        }
                    }
                }
                if self.rg(*bias) {
                    let db = slot(grads, *bias, dim);
                    for r in 0..rows {
                        for j in 0..dim {
                            db[j] += g[r * dim + j];
                        }
                    }
                }
                if self.rg(*x) {
                    let dn = T::from_usize(dim).expect("dim");
                    let dx = slot(grads, *x, rows * dim);
                    let mut dxhat = vec![T::zero(); dim];
                    for r in 0..rows {
                        let h = &xhat[r * dim..(r + 1) * dim];
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..dim {
                            dxhat[j] = g[r * dim + j] * gv[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * h[j];
                        }
                        let k = inv_std[r] / dn;
                        for j in 0..dim {
                            dx[r * dim + j] += k * (dn * dxhat[j] - s1 - h[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = slot(grads, *x, g.len());
                for i in 0..g.len() {
                    d[i] += g[i] * gelu_parts(xv[i]).1;
                }
            }
            Op::Gather { table, ids } => {
                let dim = node.shape[1];
                let d = slot(grads, *table, len(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut d[id * dim..(id + 1) * dim];
                    dst.iter_mut()
                        .zip(&g[r * dim..(r + 1) * dim])
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let (rows, width) = (node.shape[0], node.shape[1]);
                let cols = dims2(&self.nodes[x.0].shape).1;
                let d = slot(grads, *x, len(*x));
                for r in 0..rows {
                    for j in 0..width {
                        d[r * cols + start + j] += g[r * width + j];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for &p in parts {
                    let c = dims2(&self.nodes[p.0].shape).1;
                    if self.rg(p) {
                        let d = slot(grads, p, rows * c);
                        for r in 0..rows {
                            for j in 0..c {
                                d[r * c + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = len(p);
                    if self.rg(p) {
                        let d = slot(grads, p, n);
                        d.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, &b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let classes = probs.len() / rows;
                let scale = g[0] / T::from_usize(rows).expect("rows");
                let d = slot(grads, *logits, rows * classes);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..classes {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        d[r * classes + j] += scale * (probs[r * classes + j] - onehot);
                    }
                }
            }
        }
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Nodes are appended in evaluation
//! order, so walking the tape backwards is already a topological traversal and
//! each node is visited exactly once.
//!
//! Matrices are rank-2 `[rows × cols]`; vectors are `[1 × n]` rows and scalars
//! are rank-0.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::params::{GradBuffers, ParamId, ParamStore};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

/// Additive logit for masked attention positions.
pub const MASK_LOGIT: f64 = -1e9;
/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Affine(Var, F),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    ConcatCols(Vec<Var>),
    SliceRow(Var, usize),
    StackRows(Vec<Option<Var>>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Unfold1d {
        x: Var,
        width: usize,
    },
    Unfold2d {
        x: Var,
    },
    Reshape(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanRows {
        x: Var,
        rows: Vec<usize>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SumAll(Var),
    Bce {
        g: Var,
        label: F,
        eps: F,
    },
    ScaleGrad(Var, F),
}

struct Node<'a, F: Scalar> {
    value: Cow<'a, Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape position.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<'a, F: Scalar> {
    nodes: Vec<Node<'a, F>>,
    store: Option<&'a ParamStore<F>>,
    param_vars: Vec<Option<Var>>,
}

impl<'a, F: Scalar> Default for Tape<'a, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Scalar> Tape<'a, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            store: None,
            param_vars: Vec::new(),
        }
    }

    /// A tape whose parameter leaves borrow from `store` without copying.
    pub fn with_params(store: &'a ParamStore<F>) -> Self {
        Self {
            nodes: Vec::with_capacity(1024),
            store: Some(store),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input; gradients are not tracked.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A free leaf that records its gradient.
    pub fn leaf(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Registers (once) and returns the leaf for a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let store = self.store.expect("tape was created without a parameter store");
        let entry = store.get(id);
        self.nodes.push(Node {
            value: Cow::Borrowed(&entry.value),
            op: Op::Leaf,
            requires_grad: entry.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let mut out = vec![F::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.same_shape(a, b, op)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` row to every row of `x[m×n]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(row).numel() != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: vec![m, n],
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data();
        let mut out = self.value(x).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(x, row), rg))
    }

    /// `scale · x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, b) = (F::of(scale), F::of(shift));
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| s * e + b).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Affine(x, s), rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn map(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |e| if e > F::zero() { e } else { F::zero() })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |e| e.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Row `i` of `x` as a `[1×n]` matrix.
    pub fn slice_row(&mut self, x: Var, i: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "slice_row")?;
        if i >= m {
            return Err(Error::Contract(format!("row {i} out of range for {m} rows")));
        }
        let out = self.value(x).row(i).to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::SliceRow(x, i), rg))
    }

    /// Stacks `[1×n]` rows into `[len×n]`; `None` slots become zero rows.
    pub fn stack_rows(&mut self, rows: &[Option<Var>], n: usize) -> Result<Var> {
        let mut out = vec![F::zero(); rows.len() * n];
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                if self.value(r).numel() != n {
                    return Err(Error::Shape {
                        op: "stack_rows",
                        lhs: vec![1, n],
                        rhs: self.shape(r).to_vec(),
                    });
                }
                out[i * n..(i + 1) * n].copy_from_slice(self.value(r).data());
            }
        }
        let rg = rows.iter().flatten().any(|&r| self.rg(r));
        Ok(self.push(Tensor::new(vec![rows.len(), n], out)?, Op::StackRows(rows.to_vec()), rg))
    }

    /// Row-wise softmax. Masked positions (`false`) receive an additive
    /// [`MASK_LOGIT`] before normalization.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims2(x, "softmax_rows")?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::Shape {
                    op: "softmax_rows",
                    lhs: vec![m, n],
                    rhs: vec![mask.len()],
                });
            }
            for i in 0..m {
                if !mask[i * n..(i + 1) * n].iter().any(|&b| b) {
                    return Err(Error::InvalidMask(format!("row {i} is fully masked")));
                }
            }
        }
        let neg = F::of(MASK_LOGIT);
        let mut out = self.value(x).data().to_vec();
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            if let Some(mask) = mask {
                for (v, &keep) in row.iter_mut().zip(&mask[i * n..(i + 1) * n]) {
                    if !keep {
                        *v += neg;
                    }
                }
            }
            let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut sum = F::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::Softmax(x), rg))
    }

    /// Normalizes over the last axis, then applies `gain` and `offset`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gain).numel() != n || self.value(offset).numel() != n {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![m, n],
                rhs: self.shape(gain).to_vec(),
            });
        }
        let eps = F::of(LAYER_NORM_EPS);
        let nf = F::of(n as f64);
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let o = self.value(offset).data();
        let mut xhat = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<F>() / nf;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / nf;
            let r = F::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + o[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(offset);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Sliding windows of `width` rows with zero padding of `(width-1)/2` on
    /// each end: `[T×d] → [T × width·d]`.
    pub fn unfold1d(&mut self, x: Var, width: usize) -> Result<Var> {
        if width.is_multiple_of(2) {
            return Err(Error::Config(format!("convolution width must be odd, got {width}")));
        }
        let (t, d) = self.dims2(x, "unfold1d")?;
        let pad = (width - 1) / 2;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); t * width * d];
        for j in 0..t {
            for o in 0..width {
                let src = j + o;
                if src < pad || src - pad >= t {
                    continue;
                }
                let s = src - pad;
                let dst = j * width * d + o * d;
                out[dst..dst + d].copy_from_slice(&xv[s * d..(s + 1) * d]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![t, width * d], out)?, Op::Unfold1d { x, width }, rg))
    }

    /// 3×3 patches with SAME zero padding: `[C×H×W] → [(H·W) × (C·9)]`.
    pub fn unfold2d(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            other => {
                return Err(Error::Shape {
                    op: "unfold2d",
                    lhs: other.to_vec(),
                    rhs: vec![],
                })
            }
        };
        let xv = self.value(x).data();
        let cols = c * 9;
        let mut out = vec![F::zero(); h * w * cols];
        for i in 0..h {
            for j in 0..w {
                let row = (i * w + j) * cols;
                for ch in 0..c {
                    for di in 0..3 {
                        let si = i + di;
                        if si < 1 || si > h {
                            continue;
                        }
                        for dj in 0..3 {
                            let sj = j + dj;
                            if sj < 1 || sj > w {
                                continue;
                            }
                            out[row + ch * 9 + di * 3 + dj] = xv[ch * h * w + (si - 1) * w + (sj - 1)];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![h * w, cols], out)?, Op::Unfold2d { x }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn pool_rows(&self, x: Var, mask: &[bool], op: &'static str) -> Result<(usize, usize, Vec<usize>)> {
        let (m, n) = self.dims2(x, op)?;
        if mask.len() != m {
            return Err(Error::Shape {
                op,
                lhs: vec![m, n],
                rhs: vec![mask.len()],
            });
        }
        let rows: Vec<usize> = (0..m).filter(|&i| mask[i]).collect();
        if rows.is_empty() {
            return Err(Error::InvalidMask(format!("{op}: every row is masked")));
        }
        Ok((m, n, rows))
    }

    /// Column-wise maximum over unmasked rows: `[T×n] → [1×n]`.
    pub fn max_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (_, n, rows) = self.pool_rows(x, mask, "max_rows")?;
        let xv = self.value(x).data();
        let mut argmax = vec![rows[0]; n];
        let mut out = xv[rows[0] * n..(rows[0] + 1) * n].to_vec();
        for &r in &rows[1..] {
            for c in 0..n {
                let v = xv[r * n + c];
                if v > out[c] {
                    out[c] = v;
                    argmax[c] = r;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MaxRows { x, argmax }, rg))
    }

    /// Column-wise mean over unmasked rows: `[T×n] → [1×n]`.
    pub fn mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (_, n, rows) = self.pool_rows(x, mask, "mean_rows")?;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); n];
        for &r in &rows {
            for c in 0..n {
                out[c] += xv[r * n + c];
            }
        }
        let count = F::of(rows.len() as f64);
        for v in &mut out {
            *v /= count;
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![1, n], out)?, Op::MeanRows { x, rows }, rg))
    }

    /// Gathers rows of `table[V×d]`. Id 0 is padding and never receives gradient.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2(table, "gather")?;
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let i = id as usize;
            if i >= v {
                return Err(Error::IdOutOfRange { id, size: v });
            }
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<F>();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Sums a list of equally shaped values left to right.
    pub fn add_all(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs
            .split_first()
            .ok_or_else(|| Error::Contract("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// Binary cross-entropy of a probability `g` against `label`, with `g`
    /// clamped to `[eps, 1-eps]` before the logarithm.
    pub fn bce(&mut self, g: Var, label: f64, eps: f64) -> Result<Var> {
        if self.value(g).numel() != 1 {
            return Err(Error::Contract(format!(
                "bce expects a single probability, got shape {:?}",
                self.shape(g)
            )));
        }
        let (y, e) = (F::of(label), F::of(eps));
        let p = self.value(g).data()[0].max(e).min(F::one() - e);
        let loss = -(y * p.ln() + (F::one() - y) * (F::one() - p).ln());
        let rg = self.rg(g);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { g, label: y, eps: e }, rg))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `factor`.
    pub fn scale_grad(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x).clone();
        let rg = self.rg(x);
        self.push(v, Op::ScaleGrad(x, F::of(factor)), rg)
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    /// Collects the gradients of every registered parameter, scaled by `scale`.
    pub fn param_grads(&self, grads: &Gradients<F>, scale: F, into: &mut GradBuffers<F>) {
        for (i, v) in self.param_vars.iter().enumerate() {
            if let Some(v) = v {
                if let Some(g) = grads.wrt(*v) {
                    into.accumulate(ParamId(i), g, scale);
                }
            }
        }
    }

    fn propagate(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    gemm_nt(g, self.value(*b).data(), self.slot(grads, *a), m, n, k);
                }
                if self.rg(*b) {
                    gemm_tn(self.value(*a).data(), g, self.slot(grads, *b), k, m, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).shape()[0];
                if self.rg(*a) {
                    gemm_nn(g, self.value(*b).data(), self.slot(grads, *a), m, n, k);
                }
                if self.rg(*b) {
                    gemm_tn(g, self.value(*a).data(), self.slot(grads, *b), n, m, k);
                }
            }
            Op::Add(a, b) => {
                for &v in &[*a, *b] {
                    if self.rg(v) {
                        add_into(self.slot(grads, v), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(self.slot(grads, *a), g);
                }
                if self.rg(*b) {
                    for (d, &e) in self.slot(grads, *b).iter_mut().zip(g) {
                        *d -= e;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    for ((d, &e), &o) in self.slot(grads, *a).iter_mut().zip(g).zip(bv) {
                        *d += e * o;
                    }
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    for ((d, &e), &o) in self.slot(grads, *b).iter_mut().zip(g).zip(av) {
                        *d += e * o;
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.rg(*x) {
                    add_into(self.slot(grads, *x), g);
                }
                if self.rg(*row) {
                    let n = self.value(*row).numel();
                    let dr = self.slot(grads, *row);
                    for chunk in g.chunks(n) {
                        add_into(dr, chunk);
                    }
                }
            }
            Op::Affine(x, s) => {
                for (d, &e) in self.slot(grads, *x).iter_mut().zip(g) {
                    *d += *s * e;
                }
            }
            Op::Relu(x) => {
                for ((d, &e), &o) in self.slot(grads, *x).iter_mut().zip(g).zip(y) {
                    if o > F::zero() {
                        *d += e;
                    }
                }
            }
            Op::Tanh(x) => {
                for ((d, &e), &o) in self.slot(grads, *x).iter_mut().zip(g).zip(y) {
                    *d += e * (F::one() - o * o);
                }
            }
            Op::Sigmoid(x) => {
                for ((d, &e), &o) in self.slot(grads, *x).iter_mut().zip(g).zip(y) {
                    *d += e * o * (F::one() - o);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.rg(p) {
                        let dp = self.slot(grads, p);
                        for r in 0..m {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceRow(x, r) => {
                let n = g.len();
                add_into(&mut self.slot(grads, *x)[r * n..(r + 1) * n], g);
            }
            Op::StackRows(rows) => {
                let n = node.value.shape()[1];
                for (r, v) in rows.iter().enumerate() {
                    if let Some(v) = *v {
                        if self.rg(v) {
                            add_into(self.slot(grads, v), &g[r * n..(r + 1) * n]);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = node.value.shape()[1];
                let dx = self.slot(grads, *x);
                for ((drow, grow), yrow) in dx.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: F = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for ((d, &e), &o) in drow.iter_mut().zip(grow).zip(yrow) {
                        *d += o * (e - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                xhat,
                rstd,
            } => {
                let n = node.value.shape()[1];
                let gv = self.value(*gain).data().to_vec();
                if self.rg(*gain) {
                    let dg = self.slot(grads, *gain);
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for ((d, &e), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                            *d += e * h;
                        }
                    }
                }
                if self.rg(*offset) {
                    let db = self.slot(grads, *offset);
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                }
                if self.rg(*x) {
                    let nf = F::of(n as f64);
                    let dx = self.slot(grads, *x);
                    for (r, (drow, (grow, hrow))) in dx
                        .chunks_mut(n)
                        .zip(g.chunks(n).zip(xhat.chunks(n)))
                        .enumerate()
                    {
                        let dh: Vec<F> = grow.iter().zip(&gv).map(|(&e, &w)| e * w).collect();
                        let mean_dh = dh.iter().copied().sum::<F>() / nf;
                        let mean_dh_h = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() / nf;
                        for ((d, &a), &h) in drow.iter_mut().zip(&dh).zip(hrow) {
                            *d += rstd[r] * (a - mean_dh - h * mean_dh_h);
                        }
                    }
                }
            }
            Op::Unfold1d { x, width } => {
                let (t, d) = self.value(*x).dims2().unwrap();
                let pad = (width - 1) / 2;
                let dx = self.slot(grads, *x);
                for j in 0..t {
                    for o in 0..*width {
                        let src = j + o;
                        if src < pad || src - pad >= t {
                            continue;
                        }
                        let s = src - pad;
                        let off = j * width * d + o * d;
                        add_into(&mut dx[s * d..(s + 1) * d], &g[off..off + d]);
                    }
                }
            }
            Op::Unfold2d { x } => {
                let (c, h, w) = {
                    let s = self.value(*x).shape();
                    (s[0], s[1], s[2])
                };
                let cols = c * 9;
                let dx = self.slot(grads, *x);
                for i in 0..h {
                    for j in 0..w {
                        let row = (i * w + j) * cols;
                        for ch in 0..c {
                            for di in 0..3 {
                                let si = i + di;
                                if si < 1 || si > h {
                                    continue;
                                }
                                for dj in 0..3 {
                                    let sj = j + dj;
                                    if sj < 1 || sj > w {
                                        continue;
                                    }
                                    dx[ch * h * w + (si - 1) * w + (sj - 1)] += g[row + ch * 9 + di * 3 + dj];
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => add_into(self.slot(grads, *x), g),
            Op::MaxRows { x, argmax } => {
                let n = g.len();
                let dx = self.slot(grads, *x);
                for (c, &r) in argmax.iter().enumerate() {
                    dx[r * n + c] += g[c];
                }
            }
            Op::MeanRows { x, rows } => {
                let n = g.len();
                let count = F::of(rows.len() as f64);
                let dx = self.slot(grads, *x);
                for &r in rows {
                    for c in 0..n {
                        dx[r * n + c] += g[c] / count;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                let dt = self.slot(grads, *table);
                for (k, &id) in ids.iter().enumerate() {
                    if id == 0 {
                        continue;
                    }
                    let i = id as usize;
                    add_into(&mut dt[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                }
            }
            Op::SumAll(x) => {
                for d in self.slot(grads, *x).iter_mut() {
                    *d += g[0];
                }
            }
            Op::Bce { g: p, label, eps } => {
                let pv = self.value(*p).data()[0];
                if pv > *eps && pv < F::one() - *eps {
                    let one = F::one();
                    let dp = -*label / pv + (one - *label) / (one - pv);
                    self.slot(grads, *p)[0] += g[0] * dp;
                }
            }
            Op::ScaleGrad(x, f) => {
                for (d, &e) in self.slot(grads, *x).iter_mut().zip(g) {
                    *d += *f * e;
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> &'g mut [F] {
        let numel = self.value(v).numel();
        grads[v.0].get_or_insert_with(|| vec![F::zero(); numel])
    }
}

#[inline]
fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

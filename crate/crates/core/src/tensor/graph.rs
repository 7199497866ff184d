use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor, View, ViewMut};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const LAYER_NORM_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Softmax(Var),
    Dropout(Var, Vec<T>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A single-use tape: values are recorded as operations are applied, then
/// [`Graph::backward`] sweeps the tape once in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// Gradient buffer of `v`, allocated on first use; `None` for constants.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; node.value.len()]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable input whose gradient will be kept.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last [`Graph::backward`] loss with respect to `v`, if
    /// `v` was reachable and differentiable.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims2(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        match self.shape_of(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(format!("{what} expects a matrix, got shape {s:?}"))),
        }
    }

    /// `op(a) * op(b)` where `op` optionally transposes a matrix.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (ar, ac) = self.dims2(a, "matmul")?;
        let (br, bc) = self.dims2(b, "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::ZERO; m * n];
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            View::matrix(self.value(a).data(), ac, ta),
            View::matrix(self.value(b).data(), bc, tb),
            T::ZERO,
            ViewMut { data: &mut out, row_stride: n, col_stride: 1 },
        );
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul { a, b, ta, tb }, needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(format!("{what}: shapes {:?} and {:?}", self.shape_of(a), self.shape_of(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(&[a, b]);
        self.push(Tensor { shape, data }, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a vector of length `cols(a)` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(row).len() != cols {
            return Err(Error::shape(format!("add_row: {} values for {cols} columns", self.value(row).len())));
        }
        let r = self.value(row).data();
        let data = self.value(a).data().chunks(cols).flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| x + y)).collect();
        let shape = self.shape_of(a).to_vec();
        let needs = self.needs(&[a, row]);
        Ok(self.push(Tensor { shape, data }, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a);
        let out = Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&x| x * s).collect() };
        let needs = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), needs)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let needs = self.needs(&[a]);
        Ok(self.push(t, Op::Reshape(a), needs))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let cols = self.dims2(*first, "concat_rows")?.1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape(format!("concat_rows: {c} columns vs {cols}")));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor { shape: vec![rows, cols], data }, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let rows = self.dims2(*first, "concat_cols")?.0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::shape(format!("concat_cols: {r} rows vs {rows}")));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let c = self.value(p).cols();
                data.extend_from_slice(&self.value(p).data()[i * c..(i + 1) * c]);
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Tensor { shape: vec![rows, total], data }, Op::ConcatCols(parts.to_vec()), needs))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::shape(format!("slice_rows {start}..{} of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![len, c], data }, Op::SliceRows(a, start), needs))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!("slice_cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![r, len], data }, Op::SliceCols(a, start), needs))
    }

    /// Rows of `a` at `idx`, in that order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a, "gather_rows")?;
        if idx.is_empty() || idx.iter().any(|&i| i >= r) {
            return Err(Error::shape(format!("gather_rows indices out of range for {r} rows")));
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let needs = self.needs(&[a]);
        Ok(self.push(Tensor { shape: vec![idx.len(), c], data }, Op::GatherRows(a, idx.to_vec()), needs))
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * half * (T::ONE + (x * inv_sqrt2).erf())).collect();
        let out = Tensor { shape: t.shape().to_vec(), data };
        let needs = self.needs(&[a]);
        self.push(out, Op::Gelu(a), needs)
    }

    /// Normalizes each row to zero mean and unit variance, then applies
    /// `gain` and `bias` (length `cols`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(format!(
                "layer_norm over {d} features with gain/bias of {}/{}",
                self.value(gain).len(),
                self.value(bias).len()
            )));
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::from_f64(1.0 / d as f64);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let src = self.value(x);
        let mut xhat = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.rows());
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = src.shape().to_vec();
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(Tensor { shape, data: out }, Op::LayerNorm { x, gain, bias, xhat, rstd }, needs))
    }

    /// Row-wise softmax where columns with `key_mask[j] == false` get exactly
    /// zero probability (as if their logits were `-inf`).
    pub fn masked_softmax(&mut self, a: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let cols = self.value(a).cols();
        if let Some(m) = key_mask {
            if m.len() != cols {
                return Err(Error::shape(format!("softmax mask of {} for {cols} columns", m.len())));
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::invalid("softmax row with every position masked"));
            }
        }
        let valid = |j: usize| key_mask.is_none_or(|m| m[j]);
        let src = self.value(a);
        let mut out = vec![T::ZERO; src.len()];
        for (row, dst) in src.data().chunks(cols).zip(out.chunks_mut(cols)) {
            let mut max = None;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) && max.is_none_or(|m| v > m) {
                    max = Some(v);
                }
            }
            let max = max.unwrap_or(T::ZERO);
            let mut total = T::ZERO;
            for (j, &v) in row.iter().enumerate() {
                if valid(j) {
                    let e = (v - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            let inv = T::ONE / total;
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor { shape: src.shape().to_vec(), data: out };
        if out.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax produced a non-finite value".into()));
        }
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), needs))
    }

    /// Inverted dropout. With `rng` set, each element is zeroed with
    /// probability `rate` and survivors are scaled by `1 / (1 - rate)`;
    /// without it the op is the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let rng = match rng {
            Some(r) if rate > 0.0 => r,
            _ => return Ok(a),
        };
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let t = self.value(a);
        let keep: Vec<T> = (0..t.len()).map(|_| if rng.gen::<f64>() < rate { T::ZERO } else { keep_scale }).collect();
        let data = t.data().iter().zip(&keep).map(|(&x, &k)| x * k).collect();
        let out = Tensor { shape: t.shape().to_vec(), data };
        let needs = self.needs(&[a]);
        Ok(self.push(out, Op::Dropout(a, keep), needs))
    }

    /// Mean over rows of `-log softmax(row)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, cols) = self.dims2(logits, "cross_entropy")?;
        if labels.len() != rows {
            return Err(Error::shape(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::invalid(format!("label {bad} out of range for {cols} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::ZERO; rows * cols];
        let mut loss = T::ZERO;
        for (i, (row, p)) in src.chunks(cols).zip(probs.chunks_mut(cols)).enumerate() {
            let max = row.iter().copied().fold(row[0], |m, v| if v > m { v } else { m });
            let total: T = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + total.ln();
            for (pj, &v) in p.iter_mut().zip(row) {
                *pj = (v - log_z).exp();
            }
            loss += log_z - row[labels[i]];
        }
        let loss = loss / T::from_f64(rows as f64);
        if !loss.is_finite() {
            return Err(Error::Numeric("cross-entropy is not finite".into()));
        }
        let needs = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let needs = self.needs(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    /// Reverse sweep from a scalar `loss`, leaving gradients on every
    /// differentiable node it depends on. Calling it again restarts from zero.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!("backward needs a scalar loss, got shape {:?}", self.shape_of(loss))));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else { continue };
            self.propagate(i, &gout);
            self.grads[i] = Some(gout);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, gout: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, n) = (out_shape[0], out_shape[1]);
                let k = if ta { va.shape()[0] } else { va.shape()[1] };
                let (ac, bc) = (va.cols(), vb.cols());
                let dc = View::matrix(gout, n, false);
                if let Some(ga) = slot(nodes, grads, a) {
                    // d op(a) = dC * op(b)^T, written through op(a)'s strides.
                    let av = View::matrix(ga.as_slice(), ac, ta);
                    let (rs, cs) = (av.row_stride, av.col_stride);
                    T::gemm(m, n, k, T::ONE, dc, View::matrix(vb.data(), bc, tb).t(), T::ONE, ViewMut { data: ga, row_stride: rs, col_stride: cs });
                }
                if let Some(gb) = slot(nodes, grads, b) {
                    let bv = View::matrix(gb.as_slice(), bc, tb);
                    let (rs, cs) = (bv.row_stride, bv.col_stride);
                    T::gemm(k, m, n, T::ONE, View::matrix(va.data(), ac, ta).t(), dc, T::ONE, ViewMut { data: gb, row_stride: rs, col_stride: cs });
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(g) = slot(nodes, grads, v) {
                        g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(g) = slot(nodes, grads, a) {
                    g.iter_mut().zip(gout).zip(vb).for_each(|((g, &d), &y)| *g += d * y);
                }
                if let Some(g) = slot(nodes, grads, b) {
                    g.iter_mut().zip(gout).zip(va).for_each(|((g, &d), &x)| *g += d * x);
                }
            }
            &Op::AddRow(a, row) => {
                if let Some(g) = slot(nodes, grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                }
                if let Some(g) = slot(nodes, grads, row) {
                    let cols = g.len();
                    for chunk in gout.chunks(cols) {
                        g.iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Scale(a, s) => {
                if let Some(g) = slot(nodes, grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d * s);
                }
            }
            &Op::Transpose(a) => {
                let (r, c) = (out_shape[1], out_shape[0]);
                if let Some(g) = slot(nodes, grads, a) {
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gout[j * r + i];
                        }
                    }
                }
            }
            &Op::Reshape(a) => {
                if let Some(g) = slot(nodes, grads, a) {
                    g.iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = nodes[p.0].value.len();
                    if let Some(g) = slot(nodes, grads, p) {
                        g.iter_mut().zip(&gout[offset..offset + n]).for_each(|(g, &d)| *g += d);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out_shape[1];
                let mut start = 0;
                for &p in parts {
                    let c = nodes[p.0].value.cols();
                    if let Some(g) = slot(nodes, grads, p) {
                        for (i, row) in g.chunks_mut(c).enumerate() {
                            row.iter_mut().zip(&gout[i * total + start..i * total + start + c]).for_each(|(g, &d)| *g += d);
                        }
                    }
                    start += c;
                }
            }
            &Op::SliceRows(a, start) => {
                let c = out_shape[1];
                if let Some(g) = slot(nodes, grads, a) {
                    g[start * c..start * c + gout.len()].iter_mut().zip(gout).for_each(|(g, &d)| *g += d);
                }
            }
            &Op::SliceCols(a, start) => {
                let len = out_shape[1];
                let c = nodes[a.0].value.cols();
                if let Some(g) = slot(nodes, grads, a) {
                    for (i, chunk) in gout.chunks(len).enumerate() {
                        g[i * c + start..i * c + start + len].iter_mut().zip(chunk).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let c = out_shape[1];
                if let Some(g) = slot(nodes, grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        g[i * c..(i + 1) * c].iter_mut().zip(&gout[k * c..(k + 1) * c]).for_each(|(g, &d)| *g += d);
                    }
                }
            }
            &Op::Gelu(a) => {
                let x = nodes[a.0].value.data();
                if let Some(g) = slot(nodes, grads, a) {
                    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
                    for ((g, &d), &xv) in g.iter_mut().zip(gout).zip(x) {
                        let xf = xv.to_f64();
                        let dydx = gelu_cdf(xf) + xf * norm * (-0.5 * xf * xf).exp();
                        *g += d * T::from_f64(dydx);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = out_shape[out_shape.len() - 1];
                let gvals = nodes[gain.0].value.data();
                if let Some(gg) = slot(nodes, grads, *gain) {
                    for (dy, h) in gout.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += dy[j] * h[j];
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *bias) {
                    for dy in gout.chunks(d) {
                        gb.iter_mut().zip(dy).for_each(|(g, &v)| *g += v);
                    }
                }
                if let Some(gx) = slot(nodes, grads, *x) {
                    let inv_d = T::from_f64(1.0 / d as f64);
                    for (r, ((dy, h), gxr)) in gout.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dh = T::ZERO;
                        let mut mean_dh_h = T::ZERO;
                        for j in 0..d {
                            let dh = dy[j] * gvals[j];
                            mean_dh += dh;
                            mean_dh_h += dh * h[j];
                        }
                        mean_dh *= inv_d;
                        mean_dh_h *= inv_d;
                        for j in 0..d {
                            gxr[j] += rstd[r] * (dy[j] * gvals[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                let y = node.value.data();
                let cols = node.value.cols();
                if let Some(g) = slot(nodes, grads, a) {
                    for ((gr, dy), yr) in g.chunks_mut(cols).zip(gout.chunks(cols)).zip(y.chunks(cols)) {
                        let dot: T = dy.iter().zip(yr).map(|(&d, &p)| d * p).sum();
                        for j in 0..cols {
                            gr[j] += yr[j] * (dy[j] - dot);
                        }
                    }
                }
            }
            Op::Dropout(a, keep) => {
                if let Some(g) = slot(nodes, grads, *a) {
                    g.iter_mut().zip(gout).zip(keep).for_each(|((g, &d), &k)| *g += d * k);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let cols = nodes[logits.0].value.cols();
                let scale = gout[0] / T::from_f64(labels.len() as f64);
                if let Some(g) = slot(nodes, grads, *logits) {
                    for (i, (gr, p)) in g.chunks_mut(cols).zip(probs.chunks(cols)).enumerate() {
                        for j in 0..cols {
                            let target = if j == labels[i] { T::ONE } else { T::ZERO };
                            gr[j] += scale * (p[j] - target);
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(g) = slot(nodes, grads, a) {
                    g.iter_mut().for_each(|g| *g += gout[0]);
                }
            }
        }
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied to its [`Var`]s in evaluation
//! order. [`Graph::backward`] walks the tape in reverse and accumulates
//! vector-Jacobian products into every node that (transitively) depends on a
//! leaf created with `requires_grad = true`. Constants never get a gradient
//! buffer.

use std::collections::HashMap;

use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    MatMul { a: Var, b: Var, transpose_b: bool },
    Permute { input: Var, axes: Vec<usize> },
    Reshape(Var),
    Softmax { input: Var, axis: usize },
    LayerNorm { input: Var, eps: f64 },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Sum { input: Var, axis: usize },
    Mean { input: Var, axis: usize },
    SumAll(Var),
    Gather { table: Var, indices: Vec<usize> },
    Mse(Var, Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// How the right operand of a binary elementwise op maps onto the left.
enum Broadcast {
    Same,
    /// `b` repeats with period `len` (its shape is a suffix of `a`'s, or it is a scalar).
    Suffix(usize),
    /// Explicit index of `b` for every element of `a`.
    General(Vec<usize>),
}

impl Broadcast {
    fn resolve(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        if a == b {
            return Ok(Broadcast::Same);
        }
        let nb = numel(b);
        if nb == 1 {
            return Ok(Broadcast::Suffix(1));
        }
        if b.len() > a.len() {
            return Err(NumError::shape(op, a, b));
        }
        let offset = a.len() - b.len();
        for (i, &d) in b.iter().enumerate() {
            if d != a[offset + i] && d != 1 {
                return Err(NumError::shape(op, a, b));
            }
        }
        let mut lead = 0;
        while lead < b.len() && b[lead] == 1 {
            lead += 1;
        }
        if b[lead..] == a[offset + lead..] {
            return Ok(Broadcast::Suffix(nb));
        }
        // General case: zero strides on broadcast axes.
        let mut b_strides = vec![0usize; a.len()];
        let mut s = 1;
        for i in (0..b.len()).rev() {
            if b[i] != 1 {
                b_strides[offset + i] = s;
            }
            s *= b[i];
        }
        let total = numel(a);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; a.len()];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for ax in (0..a.len()).rev() {
                idx[ax] += 1;
                off += b_strides[ax];
                if idx[ax] < a[ax] {
                    break;
                }
                off -= b_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Broadcast::General(map))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Suffix(len) => i % len,
            Broadcast::General(map) => map[i],
        }
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(NumError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

/// (outer, len, inner) decomposition of `shape` around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    // Innermost output axis handled as a strided run.
    let last = rank - 1;
    let run = out_shape[last];
    let run_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut produced = 0;
    while produced < total {
        let mut o = off;
        for _ in 0..run {
            out.push(data[o]);
            o += run_stride;
        }
        produced += run;
        for ax in (0..last).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// Gradients of the leaves that were created with `requires_grad = true`.
pub struct Gradients<T> {
    grads: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Tape of recorded operations and their forward values.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient in [`Graph::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    // ---- elementwise binary -------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let bc = Broadcast::resolve(name, av.shape(), bv.shape())?;
        let bd = bv.data();
        let data: Vec<T> = match &bc {
            Broadcast::Same => av.data().iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[bc.index(i)]))
                .collect(),
        };
        let value = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|v| v.is_zero()) {
            return Err(NumError::domain("div", "division by zero"));
        }
        self.binary("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    // ---- elementwise unary --------------------------------------------------

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let st = T::from_f64_lossy(s);
        self.unary(a, Op::MulScalar(a, s), |x| x * st)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), |x| T::one() / (T::one() + (-x).exp()))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= T::zero()) {
            return Err(NumError::domain("log", "non-positive operand"));
        }
        Ok(self.unary(a, Op::Log(a), |x| x.ln()))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < T::zero()) {
            return Err(NumError::domain("sqrt", "negative operand"));
        }
        Ok(self.unary(a, Op::Sqrt(a), |x| x.sqrt()))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    // ---- linear algebra -----------------------------------------------------

    fn matmul_impl(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let name = if transpose_b { "matmul_t" } else { "matmul" };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(NumError::shape(name, ash, bsh));
        }
        let r = ash.len();
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let rb = bsh.len();
        let (bk, n) = if transpose_b {
            (bsh[rb - 1], bsh[rb - 2])
        } else {
            (bsh[rb - 2], bsh[rb - 1])
        };
        if bk != k {
            return Err(NumError::shape(name, ash, bsh));
        }
        let (brs, bcs) = if transpose_b {
            (1isize, k as isize)
        } else {
            (n as isize, 1isize)
        };
        let mut out_shape = ash[..r - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![T::zero(); numel(&out_shape)];
        if rb == 2 {
            let rows = av.numel() / k.max(1);
            if rows > 0 && n > 0 {
                unsafe {
                    T::gemm(
                        rows,
                        k,
                        n,
                        T::one(),
                        av.data().as_ptr(),
                        k as isize,
                        1,
                        bv.data().as_ptr(),
                        brs,
                        bcs,
                        T::zero(),
                        out.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        } else {
            if rb != r || ash[..r - 2] != bsh[..rb - 2] {
                return Err(NumError::shape(name, ash, bsh));
            }
            let batch = numel(&ash[..r - 2]);
            for i in 0..batch {
                unsafe {
                    T::gemm(
                        m,
                        k,
                        n,
                        T::one(),
                        av.data().as_ptr().add(i * m * k),
                        k as isize,
                        1,
                        bv.data().as_ptr().add(i * k * n),
                        brs,
                        bcs,
                        T::zero(),
                        out.as_mut_ptr().add(i * m * n),
                        n as isize,
                        1,
                    );
                }
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, transpose_b }, rg))
    }

    /// `a @ b` over the last two axes. `b` is either a rank-2 matrix shared by
    /// every leading index of `a`, or has the same leading (batch) axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two axes, same batching rules as [`Graph::matmul`].
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    /// `x @ w + b` with `w: [in, out]` and `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(NumError::shape("permute", &shape, axes));
        }
        for &ax in axes {
            check_axis("permute", ax, shape.len())?;
            if seen[ax] {
                return Err(NumError::invalid("permute", format!("repeated axis {ax}")));
            }
            seen[ax] = true;
        }
        let data = permute_data(self.value(a).data(), &shape, axes);
        let out_shape: Vec<usize> = axes.iter().map(|&x| shape[x]).collect();
        let value = Tensor::new(&out_shape, data)?;
        let rg = self.rg(a);
        Ok(self.push(
            value,
            Op::Permute {
                input: a,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(NumError::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    // ---- normalisation ------------------------------------------------------

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..len {
                    mx = mx.max(x[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (x[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { input: a, axis }, rg))
    }

    /// Zero-mean, unit-variance normalisation over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| NumError::invalid("layer_norm", "rank-0 input"))?;
        let x = self.value(a).data();
        let epsv = T::from_f64_lossy(eps);
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); x.len()];
        for (row, orow) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rstd = T::one() / (var + epsv).sqrt();
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - mean) * rstd;
            }
        }
        let value = Tensor::new(&shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LayerNorm { input: a, eps }, rg))
    }

    // ---- structural ---------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| NumError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(NumError::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&out_shape, axis);
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let value = Tensor::new(&out_shape, out)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        check_axis("narrow", axis, shape.len())?;
        if start + len > shape[axis] {
            return Err(NumError::invalid(
                "narrow",
                format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, full, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * full + start) * inner;
            out.extend_from_slice(&x[s..s + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Narrow { input: a, axis, start }, rg))
    }

    /// Split along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = *self.shape(a).get(axis).ok_or(NumError::InvalidAxis {
            op: "split",
            axis,
            rank: self.shape(a).len(),
        })?;
        if sizes.iter().sum::<usize>() != extent {
            return Err(NumError::shape("split", self.shape(a), sizes));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }

    // ---- reductions ---------------------------------------------------------

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let shape = self.shape(a).to_vec();
        check_axis(name, axis, shape.len())?;
        let (outer, len, inner) = split_at_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
        if mean {
            let scale = T::one() / T::from_usize(len).unwrap();
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(a);
        let op = if mean {
            Op::Mean { input: a, axis }
        } else {
            Op::Sum { input: a, axis }
        };
        Ok(self.push(value, op, rg))
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel().max(1);
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n as f64)
    }

    /// Row lookup: `table[indices[i], ..]` stacked along a new leading axis.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.is_empty() {
            return Err(NumError::invalid("gather_rows", "rank-0 table"));
        }
        let rows = shape[0];
        let width = numel(&shape[1..]);
        let x = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            if i >= rows {
                return Err(NumError::invalid(
                    "gather_rows",
                    format!("index {i} out of range for {rows} rows"),
                ));
            }
            out.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        let mut out_shape = vec![indices.len()];
        out_shape.extend_from_slice(&shape[1..]);
        let value = Tensor::new(&out_shape, out)?;
        let rg = self.rg(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(NumError::shape("mse", av.shape(), bv.shape()));
        }
        let n = T::from_usize(av.numel().max(1)).unwrap();
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<T>()
            / n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::Mse(a, b), rg))
    }

    // ---- backward -----------------------------------------------------------

    /// Reverse sweep from a single-element `loss`. Returns gradients for every
    /// leaf with `requires_grad`; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumError::invalid(
                "backward",
                format!("loss must have one element, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                if matches!(node.op, Op::Leaf) {
                    out.insert(Var(i), Tensor::zeros(node.value.shape()));
                }
                continue;
            };
            if matches!(node.op, Op::Leaf) {
                out.insert(Var(i), Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads: out })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backprop_binary(
        &self,
        a: Var,
        b: Var,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
        da: impl Fn(T, T, T) -> T,
        db: impl Fn(T, T, T) -> T,
    ) -> Result<()> {
        let av = self.value(a);
        let bv = self.value(b);
        let bc = Broadcast::resolve("backward", av.shape(), bv.shape())?;
        let (ad, bd) = (av.data(), bv.data());
        if let Some(ga) = self.acc(grads, a) {
            for (i, gi) in ga.iter_mut().enumerate() {
                *gi = *gi + da(g[i], ad[i], bd[bc.index(i)]);
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for i in 0..g.len() {
                let j = bc.index(i);
                gb[j] = gb[j] + db(g[i], ad[i], bd[j]);
            }
        }
        Ok(())
    }

    fn backprop_unary(&self, a: Var, g: &[T], grads: &mut [Option<Vec<T>>], f: impl Fn(T, T, T) -> T, out: &[T]) {
        let x = self.value(a).data();
        if let Some(ga) = self.acc(grads, a) {
            for i in 0..g.len() {
                ga[i] = ga[i] + f(g[i], x[i], out[i]);
            }
        }
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => self.backprop_binary(*a, *b, g, grads, |g, _, _| g, |g, _, _| g)?,
            Op::Sub(a, b) => self.backprop_binary(*a, *b, g, grads, |g, _, _| g, |g, _, _| -g)?,
            Op::Mul(a, b) => self.backprop_binary(*a, *b, g, grads, |g, _, y| g * y, |g, x, _| g * x)?,
            Op::Div(a, b) => self.backprop_binary(*a, *b, g, grads, |g, _, y| g / y, |g, x, y| -g * x / (y * y))?,
            Op::AddScalar(a) => self.backprop_unary(*a, g, grads, |g, _, _| g, out),
            Op::MulScalar(a, s) => {
                let s = T::from_f64_lossy(*s);
                self.backprop_unary(*a, g, grads, |g, _, _| g * s, out)
            }
            Op::Relu(a) => self.backprop_unary(*a, g, grads, |g, x, _| if x > T::zero() { g } else { T::zero() }, out),
            Op::Sigmoid(a) => self.backprop_unary(*a, g, grads, |g, _, y| g * y * (T::one() - y), out),
            Op::Tanh(a) => self.backprop_unary(*a, g, grads, |g, _, y| g * (T::one() - y * y), out),
            Op::Exp(a) => self.backprop_unary(*a, g, grads, |g, _, y| g * y, out),
            Op::Log(a) => self.backprop_unary(*a, g, grads, |g, x, _| g / x, out),
            Op::Sqrt(a) => {
                let half = T::from_f64_lossy(0.5);
                self.backprop_unary(*a, g, grads, |g, _, y| g * half / y, out)
            }
            Op::MatMul { a, b, transpose_b } => self.backprop_matmul(*a, *b, *transpose_b, g, grads)?,
            Op::Permute { input, axes } => {
                let mut inv = vec![0; axes.len()];
                for (k, &ax) in axes.iter().enumerate() {
                    inv[ax] = k;
                }
                let back = permute_data(g, node.value.shape(), &inv);
                if let Some(ga) = self.acc(grads, *input) {
                    for (d, s) in ga.iter_mut().zip(back) {
                        *d = *d + s;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                }
            }
            Op::Softmax { input, axis } => {
                let (outer, len, inner) = split_at_axis(node.value.shape(), *axis);
                if let Some(ga) = self.acc(grads, *input) {
                    for o in 0..outer {
                        for k in 0..inner {
                            let base = o * len * inner + k;
                            let mut dot = T::zero();
                            for l in 0..len {
                                let j = base + l * inner;
                                dot = dot + g[j] * out[j];
                            }
                            for l in 0..len {
                                let j = base + l * inner;
                                ga[j] = ga[j] + out[j] * (g[j] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { input, eps } => {
                let x = self.value(*input).data();
                let d = *node.value.shape().last().unwrap();
                let dn = T::from_usize(d).unwrap();
                let epsv = T::from_f64_lossy(*eps);
                if let Some(ga) = self.acc(grads, *input) {
                    for r in 0..x.len() / d.max(1) {
                        let row = &x[r * d..(r + 1) * d];
                        let mean = row.iter().copied().sum::<T>() / dn;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                        let rstd = T::one() / (var + epsv).sqrt();
                        let gr = &g[r * d..(r + 1) * d];
                        let yr = &out[r * d..(r + 1) * d];
                        let gm = gr.iter().copied().sum::<T>() / dn;
                        let gym = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / dn;
                        for j in 0..d {
                            let idx = r * d + j;
                            ga[idx] = ga[idx] + rstd * (gr[j] - gm - yr[j] * gym);
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_at_axis(node.value.shape(), *axis);
                let mut offset = 0;
                let total = node.value.shape()[*axis] * inner;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if let Some(gv) = self.acc(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + len];
                            for (d, &s) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Narrow { input, axis, start } => {
                let in_shape = self.shape(*input).to_vec();
                let (outer, full, inner) = split_at_axis(&in_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(ga) = self.acc(grads, *input) {
                    for o in 0..outer {
                        let d0 = (o * full + start) * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &s) in ga[d0..d0 + len * inner].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Sum { input, axis } | Op::Mean { input, axis } => {
                let in_shape = self.shape(*input).to_vec();
                let (outer, len, inner) = split_at_axis(&in_shape, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::from_usize(len).unwrap()
                } else {
                    T::one()
                };
                if let Some(ga) = self.acc(grads, *input) {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let d0 = (o * len + l) * inner;
                            for (d, &s) in ga[d0..d0 + inner].iter_mut().zip(src) {
                                *d = *d + s * scale;
                            }
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d = *d + g[0]);
                }
            }
            Op::Gather { table, indices } => {
                let width = numel(&self.shape(*table)[1..]);
                if let Some(gt) = self.acc(grads, *table) {
                    for (k, &row) in indices.iter().enumerate() {
                        let src = &g[k * width..(k + 1) * width];
                        for (d, &s) in gt[row * width..(row + 1) * width].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                let scale = T::from_f64_lossy(2.0) * g[0] / T::from_usize(ad.len().max(1)).unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for j in 0..ad.len() {
                        ga[j] = ga[j] + scale * (ad[j] - bd[j]);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..ad.len() {
                        gb[j] = gb[j] - scale * (ad[j] - bd[j]);
                    }
                }
            }
        }
        Ok(())
    }

    fn backprop_matmul(&self, a: Var, b: Var, transpose_b: bool, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ash, bsh) = (av.shape(), bv.shape());
        let r = ash.len();
        let (m, k) = (ash[r - 2], ash[r - 1]);
        let rb = bsh.len();
        let n = if transpose_b { bsh[rb - 2] } else { bsh[rb - 1] };
        let (adata, bdata) = (av.data(), bv.data());
        // Shared rank-2 weight: fold all leading axes of `a` into rows.
        let (batch, rows) = if rb == 2 {
            (1, av.numel() / k.max(1))
        } else {
            (numel(&ash[..r - 2]), m)
        };
        if rows == 0 || n == 0 || k == 0 {
            return Ok(());
        }
        let (ni, ki) = (n as isize, k as isize);
        if let Some(ga) = self.acc(grads, a) {
            for bi in 0..batch {
                let goff = bi * rows * n;
                let boff = if rb == 2 { 0 } else { bi * k * n };
                let aoff = bi * rows * k;
                // dA = dC @ B^T  (or dC @ B when transposed)
                let (rsb, csb) = if transpose_b { (ki, 1) } else { (1, ni) };
                unsafe {
                    T::gemm(
                        rows,
                        n,
                        k,
                        T::one(),
                        g.as_ptr().add(goff),
                        ni,
                        1,
                        bdata.as_ptr().add(boff),
                        rsb,
                        csb,
                        T::one(),
                        ga.as_mut_ptr().add(aoff),
                        ki,
                        1,
                    );
                }
            }
        }
        if let Some(gb) = self.acc(grads, b) {
            for bi in 0..batch {
                let goff = bi * rows * n;
                let boff = if rb == 2 { 0 } else { bi * k * n };
                let aoff = bi * rows * k;
                unsafe {
                    if transpose_b {
                        // dB[n,k] = dC^T @ A
                        T::gemm(
                            n,
                            rows,
                            k,
                            T::one(),
                            g.as_ptr().add(goff),
                            1,
                            ni,
                            adata.as_ptr().add(aoff),
                            ki,
                            1,
                            T::one(),
                            gb.as_mut_ptr().add(boff),
                            ki,
                            1,
                        );
                    } else {
                        // dB[k,n] = A^T @ dC
                        T::gemm(
                            k,
                            rows,
                            n,
                            T::one(),
                            adata.as_ptr().add(aoff),
                            1,
                            ki,
                            g.as_ptr().add(goff),
                            ni,
                            1,
                            T::one(),
                            gb.as_mut_ptr().add(boff),
                            ni,
                            1,
                        );
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(5.0));
        let y = g.mul(x, c).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 5.0);
        assert_eq!(grads.len(), 1);
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(Tensor::ones(&[3]));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[4, 2]"),
            "{msg}"
        );
        let err = g.add(a, b).unwrap_err();
        assert!(matches!(err, NumError::ShapeMismatch { op: "add", .. }));
    }

    #[test]
    fn log_and_div_reject_bad_operands() {
        let mut g = Graph::<f32>::new();
        let z = g.constant(Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap());
        assert!(matches!(g.log(z), Err(NumError::Domain { op: "log", .. })));
        let one = g.constant(Tensor::ones(&[2]));
        assert!(matches!(g.div(one, z), Err(NumError::Domain { op: "div", .. })));
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn general_broadcast_matches_manual() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[10., 100.]).unwrap());
        let y = g.mul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[10., 20., 30., 400., 500., 600.]);
        let c = g.constant(Tensor::from_f64(&[3], &[1., 0., -1.]).unwrap());
        let y = g.add(a, c).unwrap();
        assert_eq!(g.value(y).data(), &[2., 2., 2., 5., 5., 5.]);
    }

    #[test]
    fn permute_round_trips() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let a = g.constant(Tensor::from_f64(&[2, 3, 4], &data).unwrap());
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[i,j,k] = in[j,k,i]
        assert_eq!(g.value(p).data()[6 + 3 + 2], data[12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn batched_and_shared_matmul_agree() {
        let mut g = Graph::<f64>::new();
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect();
        let w: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect();
        let av = g.constant(Tensor::from_f64(&[2, 2, 3], &a).unwrap());
        let wv = g.constant(Tensor::from_f64(&[3, 2], &w).unwrap());
        let shared = g.matmul(av, wv).unwrap();
        let mut wb = w.clone();
        wb.extend_from_slice(&w);
        let wbv = g.constant(Tensor::from_f64(&[2, 3, 2], &wb).unwrap());
        let batched = g.matmul(av, wbv).unwrap();
        assert_eq!(g.value(shared).data(), g.value(batched).data());
        let wt = g.transpose(wv).unwrap();
        let via_t = g.matmul_t(av, wt).unwrap();
        assert_eq!(g.value(shared).data(), g.value(via_t).data());
    }
}

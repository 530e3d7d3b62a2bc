use std::rc::Rc;

use super::{fast_sum, gemm, Result, Scalar, Tape, Tensor, TensorError, Var};

/// Single-input elementwise kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Square,
    /// `max(x, c)`; the subgradient at `x == c` is 0.
    MaxScalar(f64),
    Sqrt,
    /// `ln(1 + e^x)` in overflow-free form.
    Softplus,
    Scale(f64),
    AddScalar(f64),
}

/// Two-input elementwise kinds. Operands have equal shapes, or one of them
/// holds a single element and is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
    Min,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Neg => "neg",
            Unary::Relu => "relu",
            Unary::LeakyRelu(_) => "leaky_relu",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Square => "square",
            Unary::MaxScalar(_) => "max_scalar",
            Unary::Sqrt => "sqrt",
            Unary::Softplus => "softplus",
            Unary::Scale(_) => "scale",
            Unary::AddScalar(_) => "add_scalar",
        }
    }

    fn forward<T: Scalar>(self, x: &[T]) -> Vec<T> {
        fn map<T: Scalar>(x: &[T], f: impl Fn(T) -> T) -> Vec<T> {
            x.iter().map(|&v| f(v)).collect()
        }
        let zero = T::zero();
        match self {
            Unary::Neg => map(x, |v| -v),
            Unary::Relu => map(x, |v| if v > zero { v } else { zero }),
            Unary::LeakyRelu(s) => {
                let s = T::from_f64(s);
                map(x, |v| if v > zero { v } else { v * s })
            }
            Unary::Tanh => map(x, |v| v.tanh()),
            Unary::Sigmoid => map(x, sigmoid),
            Unary::Square => map(x, |v| v * v),
            Unary::MaxScalar(c) => {
                let c = T::from_f64(c);
                map(x, |v| if v > c { v } else { c })
            }
            Unary::Sqrt => map(x, |v| v.sqrt()),
            Unary::Softplus => map(x, softplus),
            Unary::Scale(c) => {
                let c = T::from_f64(c);
                map(x, |v| v * c)
            }
            Unary::AddScalar(c) => {
                let c = T::from_f64(c);
                map(x, |v| v + c)
            }
        }
    }

    /// `g · dy/dx` given input `x` and output `y`.
    fn backward<T: Scalar>(self, x: &[T], y: &[T], g: &[T]) -> Vec<T> {
        fn map<T: Scalar>(x: &[T], y: &[T], g: &[T], f: impl Fn(T, T, T) -> T) -> Vec<T> {
            x.iter().zip(y).zip(g).map(|((&a, &b), &c)| f(a, b, c)).collect()
        }
        let (zero, one) = (T::zero(), T::one());
        match self {
            Unary::Neg => g.iter().map(|&v| -v).collect(),
            Unary::Relu => map(x, y, g, |a, _, c| if a > zero { c } else { zero }),
            Unary::LeakyRelu(s) => {
                let s = T::from_f64(s);
                map(x, y, g, |a, _, c| if a > zero { c } else { c * s })
            }
            Unary::Tanh => map(x, y, g, |_, b, c| c * (one - b * b)),
            Unary::Sigmoid => map(x, y, g, |_, b, c| c * b * (one - b)),
            Unary::Square => map(x, y, g, |a, _, c| c * (a + a)),
            Unary::MaxScalar(k) => {
                let k = T::from_f64(k);
                map(x, y, g, |a, _, c| if a > k { c } else { zero })
            }
            Unary::Sqrt => {
                let half = T::from_f64(0.5);
                map(x, y, g, |_, b, c| c * half / b)
            }
            Unary::Softplus => map(x, y, g, |a, _, c| c * sigmoid(a)),
            Unary::Scale(k) => {
                let k = T::from_f64(k);
                g.iter().map(|&v| v * k).collect()
            }
            Unary::AddScalar(_) => g.to_vec(),
        }
    }
}

#[derive(Clone, Copy)]
enum Broadcast {
    None,
    Left,
    Right,
}

impl Broadcast {
    /// Mode for pairing an output-shaped tensor with the right operand.
    fn rhs_only(self) -> Self {
        match self {
            Broadcast::Right => Broadcast::Right,
            _ => Broadcast::None,
        }
    }

    /// Mode for pairing the left operand with an output-shaped tensor.
    fn lhs_only(self) -> Self {
        match self {
            Broadcast::Left => Broadcast::Left,
            _ => Broadcast::None,
        }
    }
}

fn zip_with<T: Scalar>(mode: &Broadcast, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    match mode {
        Broadcast::None => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Left => b.iter().map(|&y| f(a[0], y)).collect(),
        Broadcast::Right => a.iter().map(|&x| f(x, b[0])).collect(),
    }
}

fn broadcast_mode(op: &'static str, a: &[usize], an: usize, b: &[usize], bn: usize) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::None)
    } else if bn == 1 {
        Ok(Broadcast::Right)
    } else if an == 1 {
        Ok(Broadcast::Left)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            left: a.to_vec(),
            right: b.to_vec(),
        })
    }
}

fn sum_to_scalar<T: Scalar>(t: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, t.sum())
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
        Binary::Div => "div",
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn unary(self, kind: Unary) -> Result<Var<'t, T>> {
        let x = self.value();
        let y = Rc::new(Tensor::new(x.shape().to_vec(), kind.forward(x.data()))?);
        let y_saved = Rc::clone(&y);
        self.tape.custom(
            kind.name(),
            &[self],
            y,
            Box::new(move |g, _| {
                let d = kind.backward(x.data(), y_saved.data(), g.data());
                vec![Some(Tensor::new(x.shape().to_vec(), d).expect("same shape"))]
            }),
        )
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Neg)
    }
    pub fn relu(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Relu)
    }
    pub fn leaky_relu(self, slope: f64) -> Result<Var<'t, T>> {
        self.unary(Unary::LeakyRelu(slope))
    }
    pub fn tanh(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Tanh)
    }
    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sigmoid)
    }
    pub fn square(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Square)
    }
    pub fn max_scalar(self, c: f64) -> Result<Var<'t, T>> {
        self.unary(Unary::MaxScalar(c))
    }
    pub fn sqrt(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Sqrt)
    }
    pub fn softplus(self) -> Result<Var<'t, T>> {
        self.unary(Unary::Softplus)
    }
    pub fn scale(self, c: f64) -> Result<Var<'t, T>> {
        self.unary(Unary::Scale(c))
    }
    pub fn add_scalar(self, c: f64) -> Result<Var<'t, T>> {
        self.unary(Unary::AddScalar(c))
    }

    pub fn binary(self, other: Var<'t, T>, kind: Binary) -> Result<Var<'t, T>> {
        let op = binary_name(kind);
        self.tape.check_owner(&other)?;
        let a = self.value();
        let b = other.value();
        let mode = broadcast_mode(op, a.shape(), a.numel(), b.shape(), b.numel())?;
        let out_shape = match mode {
            Broadcast::Left => b.shape().to_vec(),
            _ => a.shape().to_vec(),
        };
        let data = match kind {
            Binary::Add => zip_with(&mode, a.data(), b.data(), |x, y| x + y),
            Binary::Sub => zip_with(&mode, a.data(), b.data(), |x, y| x - y),
            Binary::Mul => zip_with(&mode, a.data(), b.data(), |x, y| x * y),
            Binary::Div => zip_with(&mode, a.data(), b.data(), |x, y| x / y),
        };
        let value = Tensor::new(out_shape.clone(), data)?;
        self.tape.custom(
            op,
            &[self, other],
            value,
            Box::new(move |g, needs| {
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let fold = |d: Vec<T>, broadcast: bool, shape: &[usize]| {
                    let t = Tensor::new(out_shape.clone(), d).expect("shape");
                    if broadcast {
                        sum_to_scalar(t, shape)
                    } else {
                        t
                    }
                };
                // Gradients are formed at the output shape, with the
                // broadcast operand expanded, then folded back.
                let ga = needs[0].then(|| {
                    let d = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => zip_with(&mode.rhs_only(), gd, bd, |g, y| g * y),
                        Binary::Div => zip_with(&mode.rhs_only(), gd, bd, |g, y| g / y),
                    };
                    fold(d, matches!(mode, Broadcast::Left), a.shape())
                });
                let gb = needs[1].then(|| {
                    let d = match kind {
                        Binary::Add => gd.to_vec(),
                        Binary::Sub => gd.iter().map(|&v| -v).collect(),
                        Binary::Mul => zip_with(&mode.lhs_only(), ad, gd, |x, g| g * x),
                        Binary::Div => {
                            // -g·a/b² = -g·y/b with y = a/b.
                            let q = zip_with(&mode, ad, bd, |x, y| x / y);
                            zip_with(&mode.rhs_only(), &q, bd, |q, y| q / y)
                                .iter()
                                .zip(gd)
                                .map(|(&v, &g)| -g * v)
                                .collect()
                        }
                    };
                    fold(d, matches!(mode, Broadcast::Right), b.shape())
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Add)
    }
    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Sub)
    }
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Mul)
    }
    pub fn div(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.binary(other, Binary::Div)
    }

    /// `[M×K] · [K×N] → [M×N]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.tape.check_owner(&other)?;
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![T::zero(); m * n];
        gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
        let value = Tensor::new(vec![m, n], c)?;
        self.tape.custom(
            "matmul",
            &[self, other],
            value,
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                    Tensor::new(vec![m, k], d).expect("shape")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); k * n];
                    gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                    Tensor::new(vec![k, n], d).expect("shape")
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let value = Tensor::clone(&x).reshape(shape)?;
        self.tape.custom(
            "reshape",
            &[self],
            value,
            Box::new(move |g, _| vec![Some(g.clone().reshape(&in_shape).expect("numel preserved"))]),
        )
    }

    /// Reduces over `axes`, dropping them from the shape (a full reduction
    /// yields shape `[1]`).
    pub fn reduce(self, kind: Reduce, axes: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(TensorError::InvalidAxis {
                    op: "reduce",
                    axis: a,
                    rank,
                });
            }
            reduced[a] = true;
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| !r)
            .map(|(&e, _)| e)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out_n: usize = out_shape.iter().product();
        let group: usize = x.numel() / out_n;
        if matches!(kind, Reduce::Sum | Reduce::Mean) {
            if let Some(lo) = reduced.iter().position(|&r| r) {
                let hi = reduced.iter().rposition(|&r| r).expect("some axis reduced");
                if reduced[lo..=hi].iter().all(|&r| r) {
                    let outer: usize = shape[..lo].iter().product();
                    let inner: usize = shape[hi + 1..].iter().product();
                    let scale = if kind == Reduce::Mean {
                        T::one() / T::from_f64(group as f64)
                    } else {
                        T::one()
                    };
                    return self.sum_contiguous(outer, group, inner, scale, out_shape);
                }
            }
        }
        let map = Rc::new(reduction_map(&shape, &reduced));
        let xd = x.data();

        let mut arg = Vec::new();
        let out: Vec<T> = match kind {
            Reduce::Sum | Reduce::Mean => {
                let mut acc = vec![T::zero(); out_n];
                for (v, &o) in xd.iter().zip(map.iter()) {
                    acc[o] = acc[o] + *v;
                }
                if kind == Reduce::Mean {
                    let inv = T::one() / T::from_f64(group as f64);
                    acc.iter_mut().for_each(|v| *v = *v * inv);
                }
                acc
            }
            Reduce::Max | Reduce::Min => {
                let mut best: Vec<Option<(T, usize)>> = vec![None; out_n];
                for (i, (&v, &o)) in xd.iter().zip(map.iter()).enumerate() {
                    let better = match best[o] {
                        None => true,
                        Some((b, _)) => {
                            if kind == Reduce::Max {
                                v > b
                            } else {
                                v < b
                            }
                        }
                    };
                    if better {
                        best[o] = Some((v, i));
                    }
                }
                best.into_iter()
                    .map(|b| {
                        let (v, i) = b.expect("non-empty group");
                        arg.push(i);
                        v
                    })
                    .collect()
            }
        };
        let value = Tensor::new(out_shape, out)?;
        self.tape.custom(
            "reduce",
            &[self],
            value,
            Box::new(move |g, _| {
                let gd = g.data();
                let d: Vec<T> = match kind {
                    Reduce::Sum => map.iter().map(|&o| gd[o]).collect(),
                    Reduce::Mean => {
                        let inv = T::one() / T::from_f64(group as f64);
                        map.iter().map(|&o| gd[o] * inv).collect()
                    }
                    Reduce::Max | Reduce::Min => {
                        let mut d = vec![T::zero(); map.len()];
                        for (o, &i) in arg.iter().enumerate() {
                            d[i] = gd[o];
                        }
                        d
                    }
                };
                vec![Some(Tensor::new(shape.clone(), d).expect("shape"))]
            }),
        )
    }

    /// `scale · Σ_r x[o, r, i]` over a `[outer, red, inner]` view.
    fn sum_contiguous(self, outer: usize, red: usize, inner: usize, scale: T, out_shape: Vec<usize>) -> Result<Var<'t, T>> {
        let x = self.value();
        let xd = x.data();
        let mut acc = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let block = &xd[o * red * inner..(o + 1) * red * inner];
            if inner == 1 {
                acc[o] = fast_sum(block) * scale;
                continue;
            }
            let dst = &mut acc[o * inner..(o + 1) * inner];
            for row in block.chunks_exact(inner) {
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * scale);
        }
        let in_shape = x.shape().to_vec();
        drop(x);
        self.tape.custom(
            "reduce",
            &[self],
            Tensor::new(out_shape, acc)?,
            Box::new(move |g, _| {
                let gd = g.data();
                let mut d = Vec::with_capacity(outer * red * inner);
                for o in 0..outer {
                    if inner == 1 {
                        d.resize(d.len() + red, gd[o] * scale);
                        continue;
                    }
                    let src: Vec<T> = gd[o * inner..(o + 1) * inner].iter().map(|&v| v * scale).collect();
                    for _ in 0..red {
                        d.extend_from_slice(&src);
                    }
                }
                vec![Some(Tensor::new(in_shape.clone(), d).expect("shape"))]
            }),
        )
    }

    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(Reduce::Sum, &axes)
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(Reduce::Mean, &axes)
    }

    /// Selects rows along the leading axis (repeats allowed).
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rows = shape[0];
        let width = x.numel() / rows;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: format!("row {bad} out of range for {rows} rows"),
            });
        }
        if indices.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                reason: "empty index list".into(),
            });
        }
        let mut data = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let value = Tensor::new(out_shape, data)?;
        let indices = indices.to_vec();
        self.tape.custom(
            "gather_rows",
            &[self],
            value,
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); rows * width];
                for (r, &i) in indices.iter().enumerate() {
                    let src = &g.data()[r * width..(r + 1) * width];
                    for (dst, &s) in d[i * width..(i + 1) * width].iter_mut().zip(src) {
                        *dst = *dst + s;
                    }
                }
                vec![Some(Tensor::new(shape.clone(), d).expect("shape"))]
            }),
        )
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t, T>> {
        let rows = self.shape()[0];
        if start >= end || end > rows {
            return Err(TensorError::InvalidArgument {
                op: "slice_rows",
                reason: format!("range {start}..{end} invalid for {rows} rows"),
            });
        }
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(&idx)
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat_rows",
            reason: "no inputs".into(),
        })?;
        let tape: &'t Tape<T> = first.tape;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let tail = values[0].shape()[1..].to_vec();
        let mut rows = Vec::with_capacity(values.len());
        let mut data = Vec::new();
        for v in &values {
            if v.shape()[1..] != tail[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: values[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows.push(v.shape()[0]);
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows.iter().sum()];
        shape.extend_from_slice(&tail);
        let width: usize = tail.iter().product();
        let value = Tensor::new(shape, data)?;
        tape.custom(
            "concat_rows",
            parts,
            value,
            Box::new(move |g, needs| {
                let mut offset = 0;
                rows.iter()
                    .zip(needs)
                    .map(|(&r, &need)| {
                        let start = offset * width;
                        offset += r;
                        need.then(|| {
                            let mut s = vec![r];
                            s.extend_from_slice(&tail);
                            Tensor::new(s, g.data()[start..start + r * width].to_vec()).expect("shape")
                        })
                    })
                    .collect()
            }),
        )
    }
}

/// Output flat index for every input flat index.
fn reduction_map(shape: &[usize], reduced: &[bool]) -> Vec<usize> {
    let rank = shape.len();
    let mut out_strides = vec![0usize; rank];
    let mut stride = 1;
    for a in (0..rank).rev() {
        if !reduced[a] {
            out_strides[a] = stride;
            stride *= shape[a];
        }
    }
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for _ in 0..numel {
        map.push(o);
        for a in (0..rank).rev() {
            idx[a] += 1;
            o += out_strides[a];
            if idx[a] < shape[a] {
                break;
            }
            o -= out_strides[a] * shape[a];
            idx[a] = 0;
        }
    }
    map
}

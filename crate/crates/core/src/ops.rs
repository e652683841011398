//! Differentiable tensor operations: elementwise math with broadcasting,
//! matrix products, reductions, shape manipulation and the stable
//! logistic loss.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kernels;
use crate::tensor::{strides, Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
    Neg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divisor `n`).
    Var,
}

/// Numpy-style broadcast of two shapes, or `None` if incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, with 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

/// Visits every output element with its flat offsets into `a` and `b`.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn unary_fwd<T: Float>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Relu => {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        }
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Neg => -x,
    }
}

/// Logistic function in a form that does not overflow for large |x|.
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn reduced_shape(shape: &[usize], axes: &[usize], keepdim: bool) -> Vec<usize> {
    let mut out = Vec::with_capacity(shape.len());
    for (i, &d) in shape.iter().enumerate() {
        if axes.contains(&i) {
            if keepdim {
                out.push(1);
            }
        } else {
            out.push(d);
        }
    }
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// For every input element, the flat index of the reduction bucket it falls into.
fn reduce_index(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let kept: Vec<usize> = (0..shape.len()).filter(|i| !axes.contains(i)).collect();
    let kept_shape: Vec<usize> = kept.iter().map(|&i| shape[i]).collect();
    let kept_strides = strides(&kept_shape);
    let mut out_stride = vec![0; shape.len()];
    for (j, &i) in kept.iter().enumerate() {
        out_stride[i] = kept_strides[j];
    }
    let zero = vec![0; shape.len()];
    let mut map = Vec::with_capacity(shape.iter().product());
    for_each_pair(shape, &out_stride, &zero, |_, o, _| map.push(o));
    map
}

impl<T: Float> Graph<T> {
    // ---- elementwise ---------------------------------------------------

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (sa_shape, sb_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let out_shape =
            broadcast_shape(&sa_shape, &sb_shape).ok_or_else(|| Error::shape(name, &sa_shape, &sb_shape))?;
        let f = move |x: T, y: T| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Sub => x - y,
            BinaryOp::Mul => x * y,
            BinaryOp::Div => x / y,
        };
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let n: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(n);
        let same = sa_shape == sb_shape;
        let (sa, sb) = (broadcast_strides(&sa_shape, &out_shape), broadcast_strides(&sb_shape, &out_shape));
        if same {
            out.extend(va.iter().zip(vb).map(|(&x, &y)| f(x, y)));
        } else {
            for_each_pair(&out_shape, &sa, &sb, |_, ia, ib| out.push(f(va[ia], vb[ib])));
        }
        let value = Tensor::from_parts(out_shape.clone(), out);
        Ok(self.custom(value, &[a, b], move |ctx| {
            let g = ctx.grad.data();
            let (x, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let mut ga = ctx.needs(0).then(|| vec![T::zero(); x.len()]);
            let mut gb = ctx.needs(1).then(|| vec![T::zero(); y.len()]);
            let mut visit = |o: usize, ia: usize, ib: usize| {
                let (da, db) = match op {
                    BinaryOp::Add => (g[o], g[o]),
                    BinaryOp::Sub => (g[o], -g[o]),
                    BinaryOp::Mul => (g[o] * y[ib], g[o] * x[ia]),
                    BinaryOp::Div => (g[o] / y[ib], -g[o] * x[ia] / (y[ib] * y[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            };
            if same {
                for o in 0..g.len() {
                    visit(o, o, o);
                }
            } else {
                for_each_pair(&out_shape, &sa, &sb, visit);
            }
            vec![
                ga.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
            ]
        }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let value = self.value(x).map(|v| unary_fwd(op, v));
        self.custom(value, &[x], move |ctx| {
            let (g, xin, y) = (ctx.grad.data(), ctx.inputs[0].data(), ctx.out.data());
            let one = T::one();
            let d: Vec<T> = (0..g.len())
                .map(|i| {
                    let local = match op {
                        UnaryOp::Relu => {
                            if xin[i] > T::zero() {
                                one
                            } else {
                                T::zero()
                            }
                        }
                        UnaryOp::Sigmoid => y[i] * (one - y[i]),
                        UnaryOp::Exp => y[i],
                        UnaryOp::Log => one / xin[i],
                        UnaryOp::Sqrt => one / (y[i] + y[i]),
                        UnaryOp::Neg => -one,
                    };
                    g[i] * local
                })
                .collect();
            vec![Some(Tensor::from_parts(ctx.grad.shape().to_vec(), d))]
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sqrt, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Neg, x)
    }

    /// `x * c` for a constant `c`.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        self.custom(value, &[x], move |ctx| vec![Some(ctx.grad.map(|g| g * c))])
    }

    /// `x + c` for a constant `c`.
    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(x).map(|v| v + c);
        self.custom(value, &[x], |ctx| vec![Some(ctx.grad.clone())])
    }

    // ---- matrix products -----------------------------------------------

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let value = Tensor::from_parts(vec![m, n], c);
        Ok(self.custom(value, &[a, b], move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let ga = ctx
                .needs(0)
                .then(|| Tensor::from_parts(vec![m, k], kernels::matmul_nt(m, n, k, g, bv)));
            let gb = ctx
                .needs(1)
                .then(|| Tensor::from_parts(vec![k, n], kernels::matmul_tn(m, k, n, av, g)));
            vec![ga, gb]
        }))
    }

    /// Batched product `a[B×M×K] · b[B×K×N]`, or `a[B×M×K] · b[B×N×K]ᵀ` when `transpose_b`.
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("bmm", &sa, &sb));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * m * n);
        for i in 0..batch {
            let ai = &av[i * m * k..(i + 1) * m * k];
            let bi = &bv[i * k * n..(i + 1) * k * n];
            let c = if transpose_b {
                kernels::matmul_nt(m, k, n, ai, bi)
            } else {
                kernels::matmul(m, k, n, ai, bi)
            };
            out.extend(c);
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.custom(value, &[a, b], move |ctx| {
            let (av, bv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let mut ga = ctx.needs(0).then(|| Vec::with_capacity(av.len()));
            let mut gb = ctx.needs(1).then(|| Vec::with_capacity(bv.len()));
            for i in 0..batch {
                let ai = &av[i * m * k..(i + 1) * m * k];
                let bi = &bv[i * k * n..(i + 1) * k * n];
                let gi = &g[i * m * n..(i + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    // dA = dC · Bᵀ  (or dC · B when B was transposed)
                    ga.extend(if transpose_b {
                        kernels::matmul(m, n, k, gi, bi)
                    } else {
                        kernels::matmul_nt(m, n, k, gi, bi)
                    });
                }
                if let Some(gb) = gb.as_mut() {
                    // dB = Aᵀ · dC  (or dCᵀ · A)
                    gb.extend(if transpose_b {
                        kernels::matmul_tn(m, n, k, gi, ai)
                    } else {
                        kernels::matmul_tn(m, k, n, ai, gi)
                    });
                }
            }
            vec![
                ga.map(|d| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(ctx.inputs[1].shape().to_vec(), d)),
            ]
        }))
    }

    /// Affine map over the last axis: `x[…×in] · weight[out×in]ᵀ + bias[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sw.len() != 2 || sx.last() != Some(&sw[1]) {
            return Err(Error::shape("linear", &sx, &sw));
        }
        let (out_f, in_f) = (sw[0], sw[1]);
        if let Some(b) = bias {
            if self.shape(b) != [out_f] {
                return Err(Error::shape("linear", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / in_f;
        let mut y = kernels::matmul_nt(rows, in_f, out_f, self.value(x).data(), self.value(weight).data());
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in y.chunks_mut(out_f) {
                for (v, &bb) in row.iter_mut().zip(bv) {
                    *v += bb;
                }
            }
        }
        let mut out_shape = sx.clone();
        *out_shape.last_mut().expect("rank >= 1") = out_f;
        let value = Tensor::from_parts(out_shape, y);
        let parents: Vec<Var> = std::iter::once(x).chain(std::iter::once(weight)).chain(bias).collect();
        Ok(self.custom(value, &parents, move |ctx| {
            let (xv, wv, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad.data());
            let gx = ctx
                .needs(0)
                .then(|| Tensor::from_parts(ctx.inputs[0].shape().to_vec(), kernels::matmul(rows, out_f, in_f, g, wv)));
            let gw = ctx
                .needs(1)
                .then(|| Tensor::from_parts(vec![out_f, in_f], kernels::matmul_tn(rows, out_f, in_f, g, xv)));
            let mut grads = vec![gx, gw];
            if ctx.inputs.len() == 3 {
                grads.push(ctx.needs(2).then(|| {
                    let mut gb = vec![T::zero(); out_f];
                    for row in g.chunks(out_f) {
                        for (a, &b) in gb.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                    Tensor::from_parts(vec![out_f], gb)
                }));
            }
            grads
        }))
    }

    // ---- reductions ----------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes.is_empty() {
            return Err(Error::invalid("reduce", "empty reduction axis set"));
        }
        if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
            return Err(Error::invalid("reduce", format!("axis {bad} out of range for {shape:?}")));
        }
        let out_shape = reduced_shape(&shape, axes, keepdim);
        let map = reduce_index(&shape, axes);
        let nout: usize = out_shape.iter().product();
        let count = shape.iter().product::<usize>() / nout;
        let inv = T::one() / T::of(count as f64);
        let xv = self.value(x).data();
        let mut sums = vec![T::zero(); nout];
        for (&o, &v) in map.iter().zip(xv) {
            sums[o] += v;
        }
        let out = match op {
            ReduceOp::Sum => sums,
            ReduceOp::Mean => sums.iter().map(|&s| s * inv).collect(),
            ReduceOp::Var => {
                let mean: Vec<T> = sums.iter().map(|&s| s * inv).collect();
                let mut sq = vec![T::zero(); nout];
                for (&o, &v) in map.iter().zip(xv) {
                    let d = v - mean[o];
                    sq[o] += d * d;
                }
                sq.iter().map(|&s| s * inv).collect()
            }
        };
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.custom(value, &[x], move |ctx| {
            let g = ctx.grad.data();
            let xv = ctx.inputs[0].data();
            let d: Vec<T> = match op {
                ReduceOp::Sum => map.iter().map(|&o| g[o]).collect(),
                ReduceOp::Mean => map.iter().map(|&o| g[o] * inv).collect(),
                ReduceOp::Var => {
                    let mut mean = vec![T::zero(); g.len()];
                    for (&o, &v) in map.iter().zip(xv) {
                        mean[o] += v;
                    }
                    mean.iter_mut().for_each(|m| *m *= inv);
                    let two = T::of(2.0);
                    map.iter()
                        .zip(xv)
                        .map(|(&o, &v)| g[o] * two * (v - mean[o]) * inv)
                        .collect()
                }
            };
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
        }))
    }

    pub fn sum(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axes, keepdim)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axes, keepdim)
    }

    pub fn var_population(&mut self, x: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        self.reduce(ReduceOp::Var, x, axes, keepdim)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.custom(value, &[x], |ctx| {
            vec![Some(Tensor::full(ctx.inputs[0].shape().to_vec(), ctx.grad.item()))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    // ---- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.custom(value, &[x], |ctx| {
            vec![Some(Tensor::from_parts(
                ctx.inputs[0].shape().to_vec(),
                ctx.grad.data().to_vec(),
            ))]
        }))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("{axes:?} is not a permutation of {shape:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let in_strides = strides(&shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let zero = vec![0; shape.len()];
        let mut src_index = Vec::with_capacity(self.value(x).numel());
        for_each_pair(&out_shape, &src_strides, &zero, |_, s, _| src_index.push(s));
        let xv = self.value(x).data();
        let out: Vec<T> = src_index.iter().map(|&s| xv[s]).collect();
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.custom(value, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); g.len()];
            for (o, &s) in src_index.iter().enumerate() {
                d[s] = g[o];
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
        }))
    }

    // ---- normalization helpers -------------------------------------------

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("rank >= 1");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let value = Tensor::from_parts(shape, out);
        self.custom(value, &[x], move |ctx| {
            let (g, y) = (ctx.grad.data(), ctx.out.data());
            let mut d = vec![T::zero(); g.len()];
            for ((dr, gr), yr) in d.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((dv, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                    *dv = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
        })
    }

    // ---- losses ----------------------------------------------------------

    /// Mean binary cross-entropy between `logits` and a `{0,1}` target, using
    /// `max(z,0) − z·y + ln(1 + e^{−|z|})` per element.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var> {
        let (sl, st) = (self.shape(logits).to_vec(), self.shape(target).to_vec());
        if sl != st {
            return Err(Error::shape("bce_with_logits", &sl, &st));
        }
        let (z, y) = (self.value(logits).data(), self.value(target).data());
        let n = T::of(z.len() as f64);
        let total: T = z
            .iter()
            .zip(y)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-(z.abs())).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        Ok(self.custom(value, &[logits, target], move |ctx| {
            let g = ctx.grad.item() / n;
            let (z, y) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let gz = ctx.needs(0).then(|| {
                Tensor::from_parts(
                    ctx.inputs[0].shape().to_vec(),
                    z.iter().zip(y).map(|(&z, &y)| (sigmoid(z) - y) * g).collect(),
                )
            });
            let gy = ctx.needs(1).then(|| {
                Tensor::from_parts(ctx.inputs[1].shape().to_vec(), z.iter().map(|&z| -z * g).collect())
            });
            vec![gz, gy]
        }))
    }

    // ---- image/token plumbing --------------------------------------------

    /// Splits `[N×C×H×W]` into non-overlapping `p×p` patches, giving
    /// `[N × (H/p·W/p) × (C·p·p)]` with patches in row-major order and
    /// features ordered `(c, dy, dx)`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || p == 0 || shape[2] % p != 0 || shape[3] % p != 0 {
            return Err(Error::invalid(
                "patchify",
                format!("input {shape:?} not divisible into {p}×{p} patches"),
            ));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let (ph, pw) = (h / p, w / p);
        let feat = c * p * p;
        // src index arrangement as a permutation of [N, C, ph, p, pw, p] -> [N, ph, pw, C, p, p]
        let mut src_index = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for py in 0..ph {
                for px in 0..pw {
                    for ch in 0..c {
                        for dy in 0..p {
                            for dx in 0..p {
                                src_index.push(((b * c + ch) * h + py * p + dy) * w + px * p + dx);
                            }
                        }
                    }
                }
            }
        }
        let xv = self.value(x).data();
        let out: Vec<T> = src_index.iter().map(|&s| xv[s]).collect();
        let value = Tensor::from_parts(vec![n, ph * pw, feat], out);
        Ok(self.custom(value, &[x], move |ctx| {
            let g = ctx.grad.data();
            let mut d = vec![T::zero(); g.len()];
            for (o, &s) in src_index.iter().enumerate() {
                d[s] = g[o];
            }
            vec![Some(Tensor::from_parts(ctx.inputs[0].shape().to_vec(), d))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[2], &[3.0, 4.0]));
        let s = g.add(a, b).unwrap();
        assert_eq!(g.value(s).data(), &[4.0, 6.0]);
        let z = g.constant(t(&[1], &[0.0]));
        let sg = g.sigmoid(z);
        assert_eq!(g.value(sg).data(), &[0.5]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let r = g.relu(x);
        let s = g.sum_all(r);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4, 4], &[2, 3, 1, 1]), Some(vec![2, 3, 4, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[1]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones([2, 3]));
        let b = g.constant(Tensor::ones([2]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn per_channel_broadcast_grad_reduces() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::ones([2, 3, 2, 2]), true);
        let s = g.leaf(Tensor::full([1, 3, 1, 1], 2.0), true);
        let y = g.mul(x, s).unwrap();
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap().data(), &[8.0, 8.0, 8.0]);
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::<f64>::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = g.matmul(i, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let a = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        let bad = g.matmul(a, a);
        assert!(bad.is_err());
    }

    #[test]
    fn reduce_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.mean(x, &[0], false).unwrap();
        assert_eq!(g.value(m).data(), &[2.5]);
        let v = g.var_population(x, &[0], false).unwrap();
        assert_eq!(g.value(v).data(), &[1.25]);
        let ones = g.constant(Tensor::ones([2, 3]));
        let s = g.sum(ones, &[1], false).unwrap();
        assert_eq!(g.value(s).shape(), &[2]);
        assert_eq!(g.value(s).data(), &[3.0, 3.0]);
        let k = g.sum(ones, &[1], true).unwrap();
        assert_eq!(g.value(k).shape(), &[2, 1]);
        assert!(g.sum(ones, &[], false).is_err());
        assert!(g.sum(ones, &[2], false).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_fn([2, 3], |i| i as f64), true);
        let s = g.sum_all(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        assert_eq!(g.value(p).at(&[3, 1, 2]), g.value(x).at(&[1, 2, 3]));
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back), g.value(x));
        assert!(g.permute(x, &[0, 0, 1]).is_err());
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([2, 5], 3.0));
        let s = g.softmax_last(x);
        assert!(g.value(s).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([4, 4]));
        let y = g.constant(Tensor::ones([4, 4]));
        let l = g.bce_with_logits(z, y).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn patchify_layout() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn([1, 1, 4, 4], |i| i as f64));
        let p = g.patchify(x, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 4, 4]);
        // second patch (top-right) holds pixels 2,3,6,7
        assert_eq!(&g.value(p).data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert!(g.patchify(x, 3).is_err());
    }
}

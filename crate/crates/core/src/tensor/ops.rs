use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{broadcast_shape, broadcast_strides, gemm, reduce_to_shape, strides, Tensor, Var};
use crate::error::{Error, Result};

/// Apply `f` elementwise over the right-aligned broadcast of `a` and `b`.
pub(crate) fn broadcast_apply(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::shape(op, a.shape(), b.shape()))?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        out.push(f(a.data()[0], b.data()[0]));
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let outer: usize = out_shape[..last].iter().product();
    let mut idx = vec![0usize; rank];
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..outer {
        let oa: usize = idx[..last]
            .iter()
            .zip(&sa[..last])
            .map(|(i, s)| i * s)
            .sum();
        let ob: usize = idx[..last]
            .iter()
            .zip(&sb[..last])
            .map(|(i, s)| i * s)
            .sum();
        match (sa[last], sb[last]) {
            (1, 1) => out.extend(
                ad[oa..oa + inner]
                    .iter()
                    .zip(&bd[ob..ob + inner])
                    .map(|(&x, &y)| f(x, y)),
            ),
            (1, 0) => {
                let y = bd[ob];
                out.extend(ad[oa..oa + inner].iter().map(|&x| f(x, y)))
            }
            (0, 1) => {
                let x = ad[oa];
                out.extend(bd[ob..ob + inner].iter().map(|&y| f(x, y)))
            }
            _ => out.extend((0..inner).map(|_| f(ad[oa], bd[ob]))),
        }
        for ax in (0..last).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Standard normal CDF.
pub(crate) fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Additive causal mask of shape `[len, len]`: 0 on and below the diagonal,
/// `-inf` above it.
pub fn causal_mask(len: usize) -> Tensor {
    Tensor::from_fn(&[len, len], |i| {
        if i % len > i / len {
            f64::NEG_INFINITY
        } else {
            0.0
        }
    })
}

impl Var {
    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        grads: impl FnOnce(&Tensor, &Tensor, &Tensor) -> (Option<Tensor>, Option<Tensor>) + 'static,
    ) -> Result<Var> {
        let value = broadcast_apply(self.value(), other.value(), op, f)?;
        let (a, b) = (self.value_rc(), other.value_rc());
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().op(value, &[self, other], move |g| {
            let (ga, gb) = grads(g, &a, &b);
            vec![
                ga.filter(|_| na).map(|t| reduce_to_shape(&t, a.shape())),
                gb.filter(|_| nb).map(|t| reduce_to_shape(&t, b.shape())),
            ]
        }))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "add",
            |x, y| x + y,
            |g, _, _| (Some(g.clone()), Some(g.clone())),
        )
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "sub",
            |x, y| x - y,
            |g, _, _| (Some(g.clone()), Some(g.map(|v| -v))),
        )
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "mul",
            |x, y| x * y,
            |g, a, b| {
                (
                    broadcast_apply(g, b, "mul", |x, y| x * y).ok(),
                    broadcast_apply(g, a, "mul", |x, y| x * y).ok(),
                )
            },
        )
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(
            other,
            "div",
            |x, y| x / y,
            |g, a, b| {
                let ga = broadcast_apply(g, b, "div", |x, y| x / y).ok();
                let gb = broadcast_apply(g, b, "div", |x, y| x / y)
                    .and_then(|t| broadcast_apply(&t, b, "div", |x, y| x / y))
                    .and_then(|t| broadcast_apply(&t, a, "div", |x, y| -x * y))
                    .ok();
                (ga, gb)
            },
        )
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Var {
        let value = self.value().map(f);
        let x = self.value_rc();
        let y = std::rc::Rc::new(value.clone());
        self.tape().op(value, &[self], move |g| {
            let d = Tensor::from_parts(
                g.shape().to_vec(),
                g.data()
                    .iter()
                    .zip(x.data().iter().zip(y.data()))
                    .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                    .collect(),
            );
            vec![Some(d)]
        })
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var {
        self.unary(move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(&self) -> Var {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Var {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&self) -> Var {
        self.unary(|x| x * phi_cdf(x), |x, _| phi_cdf(x) + x * phi_pdf(x))
    }

    pub fn exp(&self) -> Var {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sum(&self) -> Var {
        let shape = self.shape().to_vec();
        self.tape()
            .op(Tensor::scalar(self.value().sum()), &[self], move |g| {
                vec![Some(Tensor::full(&shape, g.item()))]
            })
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it as a size-1 axis.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let x = self.value().data();
        for o in 0..outer {
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = 1;
        Ok(self
            .tape()
            .op(Tensor::from_parts(out_shape, out), &[self], move |g| {
                let mut d = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        d.extend_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::from_parts(shape, d))]
            }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let old = self.shape().to_vec();
        let value = self.value().clone().reshape(shape)?;
        Ok(self.tape().op(value, &[self], move |g| {
            vec![Some(g.clone().reshape(&old).expect("reshape back"))]
        }))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var> {
        let value = self.value().permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self.tape().op(value, &[self], move |g| {
            vec![Some(g.permute(&inverse).expect("inverse permutation"))]
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(format!(
                "narrow({axis}, {start}, {len}) out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value().data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self
            .tape()
            .op(Tensor::from_parts(out_shape, out), &[self], move |g| {
                let mut d = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    d[(o * full + start) * inner..(o * full + start + len) * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::from_parts(shape, d))]
            }))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = first.shape().to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for {base:?}"
            )));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
            sizes.push(s[axis]);
        }
        let total: usize = sizes.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&sizes) {
                out.extend_from_slice(&p.value().data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(first
            .tape()
            .op(Tensor::from_parts(out_shape, out), parts, move |g| {
                let mut grads: Vec<Vec<f64>> = sizes
                    .iter()
                    .map(|&len| Vec::with_capacity(outer * len * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (buf, &len) in grads.iter_mut().zip(&sizes) {
                        buf.extend_from_slice(&g.data()[off..off + len * inner]);
                        off += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(shapes)
                    .map(|(d, s)| Some(Tensor::from_parts(s, d)))
                    .collect()
            }))
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with right-aligned
    /// broadcasting of the leading (batch) axes.
    pub fn matmul(&self, other: &Var) -> Result<Var> {
        let (a, b) = (self.value_rc(), other.value_rc());
        let plan = MatmulPlan::new(a.shape(), b.shape())?;
        let value = plan.forward(&a, &b);
        let (na, nb) = (self.requires_grad(), other.requires_grad());
        Ok(self.tape().op(value, &[self, other], move |g| {
            let (ga, gb) = plan.backward(&a, &b, g, na, nb);
            vec![ga, gb]
        }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var {
        let shape = self.shape().to_vec();
        let n = *shape.last().unwrap_or(&1);
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let y = std::rc::Rc::new(Tensor::from_parts(shape.clone(), out.clone()));
        self.tape()
            .op(Tensor::from_parts(shape.clone(), out), &[self], move |g| {
                let mut d = Vec::with_capacity(g.numel());
                for (gr, yr) in g.data().chunks(n.max(1)).zip(y.data().chunks(n.max(1))) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                vec![Some(Tensor::from_parts(shape, d))]
            })
    }
}

/// Geometry of a (possibly batch-broadcast) matrix product.
#[derive(Clone, Debug)]
struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch_shape: Vec<usize>,
    a_batch_strides: Vec<usize>,
    b_batch_strides: Vec<usize>,
    a_batch_shape: Vec<usize>,
    b_batch_shape: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let a_batch_shape = sa[..sa.len() - 2].to_vec();
        let b_batch_shape = sb[..sb.len() - 2].to_vec();
        let batch_shape = broadcast_shape(&a_batch_shape, &b_batch_shape)
            .ok_or_else(|| Error::shape("matmul", sa, sb))?;
        Ok(MatmulPlan {
            m,
            k,
            n,
            a_batch_strides: broadcast_strides(&a_batch_shape, &batch_shape),
            b_batch_strides: broadcast_strides(&b_batch_shape, &batch_shape),
            batch_shape,
            a_batch_shape,
            b_batch_shape,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch_shape.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }

    /// (a batch index, b batch index) for every output batch entry.
    fn pairs(&self) -> Vec<(usize, usize)> {
        let nb: usize = self.batch_shape.iter().product();
        let st = strides(&self.batch_shape);
        (0..nb)
            .map(|flat| {
                let mut ia = 0;
                let mut ib = 0;
                for (ax, &s) in st.iter().enumerate() {
                    let i = (flat / s) % self.batch_shape[ax];
                    ia += i * self.a_batch_strides[ax];
                    ib += i * self.b_batch_strides[ax];
                }
                (ia, ib)
            })
            .collect()
    }

    fn forward(&self, a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (self.m, self.k, self.n);
        let nb: usize = self.batch_shape.iter().product();
        let mut out = vec![0.0; nb * m * n];
        if self.b_batch_shape.iter().product::<usize>() == 1
            && self.a_batch_shape == self.batch_shape
        {
            // Shared right operand: one tall product.
            gemm(
                nb * m,
                k,
                n,
                1.0,
                a.data(),
                (k as isize, 1),
                b.data(),
                (n as isize, 1),
                0.0,
                &mut out,
                (n as isize, 1),
            );
        } else {
            for (o, (ia, ib)) in self.pairs().into_iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    1.0,
                    &a.data()[ia * m * k..(ia + 1) * m * k],
                    (k as isize, 1),
                    &b.data()[ib * k * n..(ib + 1) * k * n],
                    (n as isize, 1),
                    0.0,
                    &mut out[o * m * n..(o + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        Tensor::from_parts(self.out_shape(), out)
    }

    fn backward(
        &self,
        a: &Tensor,
        b: &Tensor,
        g: &Tensor,
        need_a: bool,
        need_b: bool,
    ) -> (Option<Tensor>, Option<Tensor>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut ga = need_a.then(|| vec![0.0; a.numel()]);
        let mut gb = need_b.then(|| vec![0.0; b.numel()]);
        let nb: usize = self.batch_shape.iter().product();
        if self.b_batch_shape.iter().product::<usize>() == 1
            && self.a_batch_shape == self.batch_shape
        {
            let rows = nb * m;
            if let Some(ga) = ga.as_mut() {
                // dA = G · Bᵀ
                gemm(
                    rows,
                    n,
                    k,
                    1.0,
                    g.data(),
                    (n as isize, 1),
                    b.data(),
                    (1, n as isize),
                    0.0,
                    ga,
                    (k as isize, 1),
                );
            }
            if let Some(gb) = gb.as_mut() {
                // dB = Aᵀ · G
                gemm(
                    k,
                    rows,
                    n,
                    1.0,
                    a.data(),
                    (1, k as isize),
                    g.data(),
                    (n as isize, 1),
                    0.0,
                    gb,
                    (n as isize, 1),
                );
            }
        } else {
            for (o, (ia, ib)) in self.pairs().into_iter().enumerate() {
                let gs = &g.data()[o * m * n..(o + 1) * m * n];
                if let Some(ga) = ga.as_mut() {
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        gs,
                        (n as isize, 1),
                        &b.data()[ib * k * n..(ib + 1) * k * n],
                        (1, n as isize),
                        1.0,
                        &mut ga[ia * m * k..(ia + 1) * m * k],
                        (k as isize, 1),
                    );
                }
                if let Some(gb) = gb.as_mut() {
                    gemm(
                        k,
                        m,
                        n,
                        1.0,
                        &a.data()[ia * m * k..(ia + 1) * m * k],
                        (1, k as isize),
                        gs,
                        (n as isize, 1),
                        1.0,
                        &mut gb[ib * k * n..(ib + 1) * k * n],
                        (n as isize, 1),
                    );
                }
            }
        }
        (
            ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
            gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
        )
    }
}

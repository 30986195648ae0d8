//! Elementwise, reduction, shape and matrix ops with their vector-Jacobian products.

use std::rc::Rc;

use super::tape::Var;
use super::tensor::{check_shape, strides, Element, Tensor};
use crate::error::{dim_err, Result};

/// Numpy-style broadcast of two shapes (aligned on the trailing axis).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(dim_err!("shapes {:?} and {:?} do not broadcast", a, b)),
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of the broadcast input.
/// `None` when the input already has the output shape.
fn broadcast_map(out: &[usize], input: &[usize]) -> Option<Rc<Vec<usize>>> {
    if out == input {
        return None;
    }
    let pad = out.len() - input.len();
    let in_strides = strides(input);
    let eff: Vec<usize> = (0..out.len())
        .map(|i| {
            if i < pad || input[i - pad] == 1 {
                0
            } else {
                in_strides[i - pad]
            }
        })
        .collect();
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out.len()];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..out.len()).rev() {
            idx[d] += 1;
            pos += eff[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Some(Rc::new(map))
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    fn apply<F: Element>(self, a: F, b: F) -> F {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }

    fn grad_lhs<F: Element>(self, _a: F, b: F, g: F) -> F {
        match self {
            Binary::Add | Binary::Sub => g,
            Binary::Mul => g * b,
            Binary::Div => g / b,
        }
    }

    fn grad_rhs<F: Element>(self, a: F, b: F, g: F) -> F {
        match self {
            Binary::Add => g,
            Binary::Sub => -g,
            Binary::Mul => g * a,
            Binary::Div => -g * a / (b * b),
        }
    }
}

fn binary<'t, F: Element>(op: Binary, a: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    let av = a.value();
    let bv = b.value();
    let out_shape = broadcast_shape(av.shape(), bv.shape())?;
    let ma = broadcast_map(&out_shape, av.shape());
    let mb = broadcast_map(&out_shape, bv.shape());
    let total: usize = out_shape.iter().product();
    let (ad, bd) = (av.data(), bv.data());
    let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
    let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
    let data: Vec<F> = (0..total).map(|i| op.apply(ad[ia(i)], bd[ib(i)])).collect();
    let out = Tensor::new(&out_shape, data)?;
    let (a_shape, b_shape) = (av.shape().to_vec(), bv.shape().to_vec());
    Ok(a.tape.record(
        op.name(),
        out,
        &[a, b],
        Box::new(move |g, needs| {
            let (ad, bd, gd) = (av.data(), bv.data(), g.data());
            let ia = |i: usize| ma.as_ref().map_or(i, |m| m[i]);
            let ib = |i: usize| mb.as_ref().map_or(i, |m| m[i]);
            let ga = needs[0].then(|| {
                let mut ga = Tensor::zeros(&a_shape);
                let buf = ga.data_mut();
                for (i, &gi) in gd.iter().enumerate() {
                    let (x, y) = (ia(i), ib(i));
                    buf[x] = buf[x] + op.grad_lhs(ad[x], bd[y], gi);
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = Tensor::zeros(&b_shape);
                let buf = gb.data_mut();
                for (i, &gi) in gd.iter().enumerate() {
                    let (x, y) = (ia(i), ib(i));
                    buf[y] = buf[y] + op.grad_rhs(ad[x], bd[y], gi);
                }
                gb
            });
            vec![ga, gb]
        }),
    ))
}

/// Elementwise op given `f(x)` and `df/dx` expressed through `(x, y)`.
fn unary<'t, F: Element>(
    x: Var<'t, F>,
    name: &'static str,
    f: impl Fn(F) -> F,
    df: impl Fn(F, F) -> F + 'static,
) -> Var<'t, F> {
    let xv = x.value();
    let out = Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())
        .expect("same shape");
    let yv = Rc::new(out.clone());
    x.tape.record(
        name,
        out,
        &[x],
        Box::new(move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(xv.data().iter().zip(yv.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::new(g.shape(), data).expect("same shape"))]
        }),
    )
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<'t, F: Element> Var<'t, F> {
    pub fn add(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        binary(Binary::Add, self, other)
    }

    pub fn sub(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        binary(Binary::Sub, self, other)
    }

    pub fn mul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        binary(Binary::Mul, self, other)
    }

    pub fn div(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        binary(Binary::Div, self, other)
    }

    pub fn neg(self) -> Var<'t, F> {
        unary(self, "neg", |x| -x, |_, _| -F::one())
    }

    pub fn scale(self, c: f64) -> Var<'t, F> {
        let c = F::from_f64(c);
        unary(self, "scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, F> {
        let c = F::from_f64(c);
        unary(self, "add_scalar", move |x| x + c, |_, _| F::one())
    }

    pub fn relu(self) -> Var<'t, F> {
        unary(
            self,
            "relu",
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, F> {
        let c = F::from_f64(GELU_C);
        let a = F::from_f64(GELU_A);
        let half = F::from_f64(0.5);
        let three = F::from_f64(3.0);
        unary(
            self,
            "gelu",
            move |x| half * x * (F::one() + (c * (x + a * x * x * x)).tanh()),
            move |x, _| {
                let t = (c * (x + a * x * x * x)).tanh();
                half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
            },
        )
    }

    pub fn exp(self) -> Var<'t, F> {
        unary(self, "exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, F> {
        unary(self, "ln", |x| x.ln(), |x, _| F::one() / x)
    }

    pub fn tanh(self) -> Var<'t, F> {
        unary(self, "tanh", |x| x.tanh(), |_, y| F::one() - y * y)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t, F> {
        let xv = self.value();
        let total = xv.data().iter().copied().sum();
        let shape = xv.shape().to_vec();
        self.tape.record(
            "sum",
            Tensor::scalar(total),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t, F> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over one axis, which is removed from the shape.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t, F>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(dim_err!("axis {} out of range for {:?}", axis, shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![F::zero(); outer * inner];
        let xd = xv.data();
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] = data[o * inner + i] + xd[base + i];
                }
            }
        }
        Ok(self.tape.record(
            "sum_axis",
            Tensor::new(&out_shape, data)?,
            &[self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(Tensor::new(&shape, gx).expect("shape"))]
            }),
        ))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, F>> {
        let n = self
            .shape()
            .get(axis)
            .copied()
            .ok_or_else(|| dim_err!("axis {} out of range", axis))?;
        Ok(self.sum_axis(axis)?.scale(1.0 / n as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, F>> {
        let xv = self.value();
        check_shape(shape)?;
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(dim_err!("cannot reshape {:?} to {:?}", xv.shape(), shape));
        }
        let old = xv.shape().to_vec();
        let out = Tensor::new(shape, xv.data().to_vec())?;
        Ok(self.tape.record(
            "reshape",
            out,
            &[self],
            Box::new(move |g, _| vec![Some(g.clone().reshape(&old).expect("shape"))]),
        ))
    }

    /// Output element `i` is input element `index[i]`; the backward pass scatter-adds.
    pub fn gather(self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t, F>> {
        let xv = self.value();
        check_shape(shape)?;
        if shape.iter().product::<usize>() != index.len() {
            return Err(dim_err!("gather index has {} entries for shape {:?}", index.len(), shape));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.numel()) {
            return Err(dim_err!("gather index {} out of range {}", bad, xv.numel()));
        }
        let xd = xv.data();
        let out = Tensor::new(shape, index.iter().map(|&i| xd[i]).collect())?;
        let in_shape = xv.shape().to_vec();
        Ok(self.tape.record(
            "gather",
            out,
            &[self],
            Box::new(move |g, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let buf = gx.data_mut();
                for (&i, &gi) in index.iter().zip(g.data()) {
                    buf[i] = buf[i] + gi;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err!("invalid permutation {:?} for {:?}", axes, shape));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut idx = vec![0usize; shape.len()];
        let mut pos = 0usize;
        for _ in 0..total {
            index.push(pos);
            for d in (0..out_shape.len()).rev() {
                idx[d] += 1;
                pos += perm_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                pos -= perm_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        self.gather(Rc::new(index), &out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Var<'t, F>> {
        let n = self.shape().len();
        if n < 2 {
            return Err(dim_err!("transpose needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(&axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, F>> {
        let shape = self.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(dim_err!("narrow({axis}, {start}, {len}) out of range for {:?}", shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * shape[axis] + l) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.gather(Rc::new(index), &out_shape)
    }

    /// 2-D matrix product `[m,k]·[k,n]`.
    pub fn matmul(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err!("matmul of {:?} and {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        mm(av.data(), bv.data(), &mut out, m, k, n);
        Ok(self.tape.record(
            "matmul",
            Tensor::new(&[m, n], out)?,
            &[self, other],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![F::zero(); m * k];
                    mm_nt(g.data(), bv.data(), &mut d, m, n, k);
                    Tensor::new(&[m, k], d).expect("shape")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![F::zero(); k * n];
                    mm_tn(av.data(), g.data(), &mut d, m, k, n);
                    Tensor::new(&[k, n], d).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Batched matrix product `[B,m,k]·[B,k,n]`.
    pub fn bmm(self, other: Var<'t, F>) -> Result<Var<'t, F>> {
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(dim_err!("bmm of {:?} and {:?}", sa, sb));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![F::zero(); bsz * m * n];
        for b in 0..bsz {
            mm(
                &av.data()[b * m * k..(b + 1) * m * k],
                &bv.data()[b * k * n..(b + 1) * k * n],
                &mut out[b * m * n..(b + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Ok(self.tape.record(
            "bmm",
            Tensor::new(&[bsz, m, n], out)?,
            &[self, other],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut d = vec![F::zero(); bsz * m * k];
                    for b in 0..bsz {
                        mm_nt(
                            &gd[b * m * n..(b + 1) * m * n],
                            &bv.data()[b * k * n..(b + 1) * k * n],
                            &mut d[b * m * k..(b + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    Tensor::new(&[bsz, m, k], d).expect("shape")
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![F::zero(); bsz * k * n];
                    for b in 0..bsz {
                        mm_tn(
                            &av.data()[b * m * k..(b + 1) * m * k],
                            &gd[b * m * n..(b + 1) * m * n],
                            &mut d[b * k * n..(b + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                    Tensor::new(&[bsz, k, n], d).expect("shape")
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x·W + b` over the last axis of `x`; `weight` is `[in, out]`.
    pub fn linear(self, weight: Var<'t, F>, bias: Option<Var<'t, F>>) -> Result<Var<'t, F>> {
        let shape = self.shape();
        let ws = weight.shape();
        let k = *shape.last().expect("non-empty shape");
        if ws.len() != 2 || ws[0] != k {
            return Err(dim_err!("linear: input {:?} with weight {:?}", shape, ws));
        }
        let rows = shape.iter().product::<usize>() / k;
        let y = self.reshape(&[rows, k])?.matmul(weight)?;
        let y = match bias {
            Some(b) => y.add(b)?,
            None => y,
        };
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = ws[1];
        y.reshape(&out_shape)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'t, F: Element>(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
    let first = parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
    let tape = first.tape;
    let values: Vec<Rc<Tensor<F>>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(dim_err!("concat axis {} out of range for {:?}", axis, base));
    }
    for v in &values {
        let s = v.shape();
        if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
            return Err(dim_err!("concat of {:?} and {:?} along {}", base, s, axis));
        }
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
    let total_len: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(outer * total_len * inner);
    for o in 0..outer {
        for (v, &l) in values.iter().zip(&lens) {
            data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
        }
    }
    let mut out_shape = base.clone();
    out_shape[axis] = total_len;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    Ok(tape.record(
        "concat",
        Tensor::new(&out_shape, data)?,
        parts,
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (p, &l) in lens.iter().enumerate() {
                if needs[p] {
                    let mut d = Vec::with_capacity(outer * l * inner);
                    for o in 0..outer {
                        let start = (o * total_len + offset) * inner;
                        d.extend_from_slice(&gd[start..start + l * inner]);
                    }
                    grads.push(Some(Tensor::new(&shapes[p], d).expect("shape")));
                } else {
                    grads.push(None);
                }
                offset += l;
            }
            grads
        }),
    ))
}

/// `c += a·b` for row-major `a:[m,k]`, `b:[k,n]`. Accumulates over `k` in order.
pub(crate) fn mm<F: Element>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c += a·bᵀ` for `a:[m,k]`, `b:[n,k]`.
pub(crate) fn mm_nt<F: Element>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            c[i * n + j] = c[i * n + j] + acc;
        }
    }
}

/// `c += aᵀ·b` for `a:[m,k]`, `b:[m,n]`, `c:[k,n]`.
pub(crate) fn mm_tn<F: Element>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

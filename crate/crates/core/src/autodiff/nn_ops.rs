//! Fused neural-network ops: softmax, normalization, convolution, pooling,
//! dropout and the classification loss.

use std::rc::Rc;

use rand::Rng as _;

use super::ops::{mm, mm_nt, mm_tn};
use super::tape::Var;
use super::tensor::{Element, Tensor};
use crate::error::{config_err, dim_err, Error, Result};
use crate::rng::Rng;

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {} out of range for {:?}", axis, shape));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Softmax along `axis`, computed with max subtraction.
pub fn softmax<'t, F: Element>(x: Var<'t, F>, axis: usize) -> Result<Var<'t, F>> {
    let xv = x.value();
    let (outer, len, inner) = axis_layout(xv.shape(), axis)?;
    let xd = xv.data();
    let mut y = vec![F::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| xd[at(l)]).fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for l in 0..len {
                let e = (xd[at(l)] - max).exp();
                y[at(l)] = e;
                total = total + e;
            }
            for l in 0..len {
                y[at(l)] = y[at(l)] / total;
            }
        }
    }
    let out = Tensor::new(xv.shape(), y)?;
    let yv = Rc::new(out.clone());
    Ok(x.tape.record(
        "softmax",
        out,
        &[x],
        Box::new(move |g, _| {
            let (gd, yd) = (g.data(), yv.data());
            let mut gx = vec![F::zero(); gd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: F = (0..len).map(|l| gd[at(l)] * yd[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = yd[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            vec![Some(Tensor::new(g.shape(), gx).expect("shape"))]
        }),
    ))
}

/// Layer normalization over the last axis with affine `gamma`, `beta` of shape `[D]`.
pub fn layer_norm<'t, F: Element>(
    x: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    eps: f64,
) -> Result<Var<'t, F>> {
    if eps <= 0.0 {
        return Err(config_err!("layer_norm eps must be positive"));
    }
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let d = *xv.shape().last().expect("shape");
    if gv.shape() != [d] || bv.shape() != [d] {
        return Err(dim_err!(
            "layer_norm over {:?} needs gamma/beta of [{}], got {:?}/{:?}",
            xv.shape(),
            d,
            gv.shape(),
            bv.shape()
        ));
    }
    let rows = xv.numel() / d;
    let eps = F::from_f64(eps);
    let df = F::from_f64(d as f64);
    let xd = xv.data();
    let mut xhat = vec![F::zero(); xd.len()];
    let mut inv_std = vec![F::zero(); rows];
    let mut y = vec![F::zero(); xd.len()];
    for r in 0..rows {
        let row = &xd[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<F>() / df;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
        let is = F::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            y[r * d + j] = gv.data()[j] * h + bv.data()[j];
        }
    }
    let out = Tensor::new(xv.shape(), y)?;
    Ok(x.tape.record(
        "layer_norm",
        out,
        &[x, gamma, beta],
        Box::new(move |g, needs| {
            let gd = g.data();
            let gam = gv.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![F::zero(); gd.len()];
                for r in 0..rows {
                    let sl = r * d..(r + 1) * d;
                    let dxhat: Vec<F> = gd[sl.clone()].iter().zip(gam).map(|(&a, &b)| a * b).collect();
                    let m1 = dxhat.iter().copied().sum::<F>() / df;
                    let m2 = dxhat
                        .iter()
                        .zip(&xhat[sl.clone()])
                        .map(|(&a, &h)| a * h)
                        .sum::<F>()
                        / df;
                    for j in 0..d {
                        gx[r * d + j] = inv_std[r] * (dxhat[j] - m1 - xhat[r * d + j] * m2);
                    }
                }
                Tensor::new(xv.shape(), gx).expect("shape")
            });
            let (mut ggam, mut gbeta) = (vec![F::zero(); d], vec![F::zero(); d]);
            if needs[1] || needs[2] {
                for r in 0..rows {
                    for j in 0..d {
                        ggam[j] = ggam[j] + gd[r * d + j] * xhat[r * d + j];
                        gbeta[j] = gbeta[j] + gd[r * d + j];
                    }
                }
            }
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[d], ggam).expect("shape")),
                needs[2].then(|| Tensor::new(&[d], gbeta).expect("shape")),
            ]
        }),
    ))
}

/// Per-channel running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<F> {
    pub mean: Tensor<F>,
    pub var: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormOptions {
    pub training: bool,
    pub momentum: f64,
    pub eps: f64,
}

impl Default for BatchNormOptions {
    fn default() -> Self {
        BatchNormOptions {
            training: true,
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Batch normalization over channel axis 1 of `[N, C, ...]`.
///
/// Training mode normalizes with biased batch statistics and returns updated
/// running statistics (`r ← (1−m)·r + m·batch`, unbiased variance). Eval mode
/// normalizes with the supplied running statistics.
pub fn batch_norm<'t, F: Element>(
    x: Var<'t, F>,
    gamma: Var<'t, F>,
    beta: Var<'t, F>,
    running: &RunningStats<F>,
    opts: BatchNormOptions,
) -> Result<(Var<'t, F>, Option<RunningStats<F>>)> {
    let (xv, gv, bv) = (x.value(), gamma.value(), beta.value());
    let shape = xv.shape().to_vec();
    if shape.len() < 2 {
        return Err(dim_err!("batch_norm needs [N, C, ...], got {:?}", shape));
    }
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    for (name, t) in [("gamma", &*gv), ("beta", &*bv), ("running mean", &running.mean), ("running var", &running.var)] {
        if t.shape() != [c] {
            return Err(dim_err!("batch_norm {} has shape {:?}, expected [{}]", name, t.shape(), c));
        }
    }
    if opts.training && n < 2 {
        return Err(dim_err!("batch_norm in training mode needs a batch of at least 2, got {}", n));
    }
    let eps = F::from_f64(opts.eps);
    let m = n * spatial;
    let mf = F::from_f64(m as f64);
    let xd = xv.data();
    let at = move |b: usize, ch: usize, s: usize| (b * c + ch) * spatial + s;

    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    if opts.training {
        for ch in 0..c {
            let mut s = F::zero();
            for b in 0..n {
                for p in 0..spatial {
                    s = s + xd[at(b, ch, p)];
                }
            }
            mean[ch] = s / mf;
            let mut v = F::zero();
            for b in 0..n {
                for p in 0..spatial {
                    let dv = xd[at(b, ch, p)] - mean[ch];
                    v = v + dv * dv;
                }
            }
            var[ch] = v / mf;
        }
    } else {
        mean.copy_from_slice(running.mean.data());
        var.copy_from_slice(running.var.data());
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); xd.len()];
    let mut y = vec![F::zero(); xd.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..spatial {
                let i = at(b, ch, p);
                xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                y[i] = gv.data()[ch] * xhat[i] + bv.data()[ch];
            }
        }
    }

    let updated = opts.training.then(|| {
        let mom = F::from_f64(opts.momentum);
        let unbias = mf / (mf - F::one());
        RunningStats {
            mean: Tensor::from_fn(&[c], |ch| (F::one() - mom) * running.mean.data()[ch] + mom * mean[ch]),
            var: Tensor::from_fn(&[c], |ch| {
                (F::one() - mom) * running.var.data()[ch] + mom * var[ch] * unbias
            }),
        }
    });

    let training = opts.training;
    let out = Tensor::new(&shape, y)?;
    let var_out = x.tape.record(
        "batch_norm",
        out,
        &[x, gamma, beta],
        Box::new(move |g, needs| {
            let gd = g.data();
            let gam = gv.data();
            let mut ggam = vec![F::zero(); c];
            let mut gbeta = vec![F::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..spatial {
                        let i = at(b, ch, p);
                        ggam[ch] = ggam[ch] + gd[i] * xhat[i];
                        gbeta[ch] = gbeta[ch] + gd[i];
                    }
                }
            }
            let gx = needs[0].then(|| {
                let mut gx = vec![F::zero(); gd.len()];
                for ch in 0..c {
                    let scale = gam[ch] * inv_std[ch];
                    if training {
                        let m1 = gbeta[ch] / mf;
                        let m2 = ggam[ch] / mf;
                        for b in 0..n {
                            for p in 0..spatial {
                                let i = at(b, ch, p);
                                gx[i] = scale * (gd[i] - m1 - xhat[i] * m2);
                            }
                        }
                    } else {
                        for b in 0..n {
                            for p in 0..spatial {
                                let i = at(b, ch, p);
                                gx[i] = scale * gd[i];
                            }
                        }
                    }
                }
                Tensor::new(&shape, gx).expect("shape")
            });
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[c], ggam).expect("shape")),
                needs[2].then(|| Tensor::new(&[c], gbeta).expect("shape")),
            ]
        }),
    );
    Ok((var_out, updated))
}

/// Output spatial extent of a strided window: `floor((len + 2p − k)/s) + 1`.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    (stride > 0 && kernel > 0 && kernel <= padded).then(|| (padded - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Source pixel for column-matrix entry (row, col), if inside the image.
    fn source(&self, ci: usize, ki: usize, kj: usize, oy: usize, ox: usize) -> Option<usize> {
        let y = (oy * self.stride + ki) as isize - self.pad as isize;
        let x = (ox * self.stride + kj) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w)
            .then(|| (ci * self.h + y as usize) * self.w + x as usize)
    }

    fn im2col<F: Element>(&self, img: &[F], cols: &mut [F]) {
        let n = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            cols[row * n + oy * self.wo + ox] = self
                                .source(ci, ki, kj, oy, ox)
                                .map_or(F::zero(), |s| img[s]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<F: Element>(&self, cols: &[F], img: &mut [F]) {
        let n = self.cols();
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some(s) = self.source(ci, ki, kj, oy, ox) {
                                img[s] = img[s] + cols[row * n + oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `x:[N,C,H,W]` with `w:[F,C,kh,kw]` (no bias).
pub fn conv2d<'t, F: Element>(
    x: Var<'t, F>,
    weight: Var<'t, F>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, F>> {
    let (xv, wv) = (x.value(), weight.value());
    let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(dim_err!("conv2d of input {:?} with kernel {:?}", xs, ws));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
    let (Some(ho), Some(wo)) = (conv_out_len(h, kh, stride, padding), conv_out_len(w, kw, stride, padding)) else {
        return Err(dim_err!(
            "conv2d kernel {}x{} (stride {}) does not fit input {}x{} padded by {}",
            kh,
            kw,
            stride,
            h,
            w,
            padding
        ));
    };
    let geom = Rc::new(ConvGeom {
        c,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho,
        wo,
    });
    let (rows, cols) = (geom.rows(), geom.cols());
    let img = c * h * w;
    let mut colbuf = vec![F::zero(); rows * cols];
    let mut out = vec![F::zero(); n * f * cols];
    let xd = xv.data();
    for b in 0..n {
        geom.im2col(&xd[b * img..(b + 1) * img], &mut colbuf);
        mm(wv.data(), &colbuf, &mut out[b * f * cols..(b + 1) * f * cols], f, rows, cols);
    }
    let out = Tensor::new(&[n, f, ho, wo], out)?;
    Ok(x.tape.record(
        "conv2d",
        out,
        &[x, weight],
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut colbuf = vec![F::zero(); rows * cols];
            let mut gw = vec![F::zero(); f * rows];
            let mut gx = vec![F::zero(); if needs[0] { n * img } else { 0 }];
            let mut dcol = vec![F::zero(); rows * cols];
            for b in 0..n {
                let gb = &gd[b * f * cols..(b + 1) * f * cols];
                if needs[1] {
                    geom.im2col(&xv.data()[b * img..(b + 1) * img], &mut colbuf);
                    mm_nt(gb, &colbuf, &mut gw, f, cols, rows);
                }
                if needs[0] {
                    dcol.iter_mut().for_each(|v| *v = F::zero());
                    mm_tn(wv.data(), gb, &mut dcol, f, rows, cols);
                    geom.col2im(&dcol, &mut gx[b * img..(b + 1) * img]);
                }
            }
            vec![
                needs[0].then(|| Tensor::new(&xs, gx).expect("shape")),
                needs[1].then(|| Tensor::new(&ws, gw).expect("shape")),
            ]
        }),
    ))
}

/// Max pooling over `[N,C,H,W]` without padding. Ties resolve to the first maximum.
pub fn max_pool2d<'t, F: Element>(x: Var<'t, F>, kernel: usize, stride: usize) -> Result<Var<'t, F>> {
    let xv = x.value();
    let xs = xv.shape().to_vec();
    if xs.len() != 4 {
        return Err(dim_err!("max_pool2d needs [N,C,H,W], got {:?}", xs));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (Some(ho), Some(wo)) = (conv_out_len(h, kernel, stride, 0), conv_out_len(w, kernel, stride, 0)) else {
        return Err(dim_err!("max_pool2d window {} does not fit {}x{}", kernel, h, w));
    };
    let xd = xv.data();
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let i = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                arg.push(best);
            }
        }
    }
    x.gather(Rc::new(arg), &[n, c, ho, wo])
}

/// Inverted dropout: survivors are scaled by `1/(1−rate)`; identity outside training.
pub fn dropout<'t, F: Element>(x: Var<'t, F>, rate: f64, rng: &mut Rng, training: bool) -> Result<Var<'t, F>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(config_err!("dropout rate must lie in [0, 1), got {}", rate));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let keep = F::from_f64(1.0 / (1.0 - rate));
    let shape = x.shape();
    let mask = Tensor::from_fn(&shape, |_| {
        if rng.random::<f64>() < rate {
            F::zero()
        } else {
            keep
        }
    });
    x.mul(x.tape.constant(mask))
}

/// Mean negative log-likelihood of softmax(logits) at the target labels.
pub fn cross_entropy<'t, F: Element>(logits: Var<'t, F>, labels: &[usize]) -> Result<Var<'t, F>> {
    let lv = logits.value();
    let s = lv.shape();
    if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
        return Err(dim_err!("cross_entropy of logits {:?} with {} labels", s, labels.len()));
    }
    let (n, c) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {} out of range for {} classes", bad, c)));
    }
    let ld = lv.data();
    let mut probs = vec![F::zero(); n * c];
    let mut total = F::zero();
    for r in 0..n {
        let row = &ld[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total = total + (lse - row[labels[r]]);
        for j in 0..c {
            probs[r * c + j] = (row[j] - lse).exp();
        }
    }
    let nf = F::from_f64(n as f64);
    let labels = labels.to_vec();
    Ok(logits.tape.record(
        "cross_entropy",
        Tensor::scalar(total / nf),
        &[logits],
        Box::new(move |g, _| {
            let scale = g.item() / nf;
            let mut gx = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                gx[r * c + l] = gx[r * c + l] - F::one();
            }
            gx.iter_mut().for_each(|v| *v = *v * scale);
            vec![Some(Tensor::new(&[n, c], gx).expect("shape"))]
        }),
    ))
}

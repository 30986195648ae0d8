//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr
//! (bypassing libtest capture) before asserting.
//!
//! Run with `cargo test --release --test acceptance` for realistic timings.

#[path = "../examples/overfit_tiny_batch.rs"]
mod overfit_tiny_batch;
#[path = "../examples/swin_knn_gap.rs"]
mod swin_knn_gap;

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use forgelens::autodiff::{
    self, batch_norm, conv2d, cross_entropy, gradcheck, layer_norm, max_pool2d, softmax, BatchNormOptions, RunningStats,
    Tape, Tensor, Var,
};
use forgelens::dataset;
use forgelens::ela::{self, ElaConfig};
use forgelens::imaging::ImageBuffer;
use forgelens::jpeg::{self, Subsampling};
use forgelens::knn::{FeatureStore, KnnConfig, Metric, Weighting, DEFAULT_EPSILON, DEFAULT_MINKOWSKI_P};
use forgelens::metrics::{accuracy, confusion};
use forgelens::models::fusion::CrossAttention;
use forgelens::models::swin::{SwinBlock, WindowAttention};
use forgelens::models::{ConvConfig, ConvVariant, FusionConfig, FusionMode, Model, ModelSpec, SwinConfig};
use forgelens::nn::{Ctx, Mode, ParamKind, ParamStore};
use forgelens::optim::{self, OptimState, OptimizerConfig};
use forgelens::rng::{rng_from_seed, Rng};

const OP_GRAD_TOL: f64 = 1e-4;
const MODEL_GRAD_TOL: f64 = 1e-3;
const GRAD_FLOOR: f64 = 1e-4;
const MODEL_FD_STEP: f64 = 1e-7;
/// Probes whose step straddles a ReLU or max-pool switch, as a share of all probes.
const MAX_KINK_SHARE: f64 = 0.02;
const GRAD_SUITE_MAX_SECONDS: f64 = 300.0;
const SHIFT_ORACLE_TOL: f64 = 1e-5;
const SHIFT_ORACLE_DRAWS: u64 = 20;
const OPTIM_TOL: f64 = 1e-8;
const OVERFIT_MAX_STEPS: usize = 200;
const OVERFIT_TARGET: f64 = 0.95;
const OVERFIT_MAX_SECONDS: f64 = 300.0;
const GAP_RATIO: f64 = 2.0;
const ACCURACY_TRIALS: usize = 1000;

fn report(name: &str, pass: bool, detail: &str) {
    let line = format!("[acceptance] {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

fn weights(shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * 0.37).sin())
}

/// Scalar summary `Σ y ⊙ W` with fixed, non-uniform `W`.
fn project<'t>(y: Var<'t, f64>) -> forgelens::Result<Var<'t, f64>> {
    let w = y.tape().constant(weights(&y.shape()));
    Ok(y.mul(w)?.sum())
}

// ---------------------------------------------------------------------------
// Gradient suite

fn op_matmul<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(v[0].matmul(v[1])?)
}

fn op_bmm<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(v[0].bmm(v[1].transpose_last()?)?)
}

fn op_broadcast<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    let d = v[1].mul(v[1])?.add_scalar(1.0);
    project(v[0].add(v[1])?.mul(v[1])?.sub(v[0].neg())?.div(d)?)
}

fn op_unary<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    let x = v[0];
    let y = x.gelu().add(x.tanh())?.add(x.scale(0.5).exp())?.add(x.mul(x)?.add_scalar(1.0).ln())?;
    project(y)
}

fn op_relu<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(v[0].relu())
}

fn op_reductions<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    let a = project(v[0].sum_axis(1)?)?;
    let b = project(v[0].mean_axis(2)?)?;
    a.add(b)?.add(v[0].mean())
}

fn op_shape<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    let x = v[0];
    let p = x.permute(&[2, 0, 1])?.reshape(&[4, 6])?;
    let n = x.narrow(2, 1, 2)?;
    let g = x.gather(std::rc::Rc::new(vec![0, 5, 5, 23, 7]), &[5])?;
    let c = autodiff::concat(&[n, x.narrow(2, 0, 1)?], 2)?;
    project(p)?.add(project(c)?)?.add(project(g)?)
}

fn op_linear<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(v[0].linear(v[1], Some(v[2]))?)
}

fn op_softmax<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(softmax(v[0], 1)?)?.add(project(softmax(v[0], 2)?)?)
}

fn op_layer_norm<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(layer_norm(v[0], v[1], v[2], 1e-5)?)
}

fn op_batch_norm<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    let running = RunningStats {
        mean: Tensor::zeros(&[3]),
        var: Tensor::full(&[3], 1.0),
    };
    let (y, _) = batch_norm(v[0], v[1], v[2], &running, BatchNormOptions::default())?;
    project(y)
}

fn op_conv<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(conv2d(v[0], v[1], 2, 1)?)?.add(project(conv2d(v[0], v[1], 1, 0)?)?)
}

fn op_max_pool<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    project(max_pool2d(v[0], 2, 2)?)?.add(project(max_pool2d(v[0], 3, 1)?)?)
}

fn op_cross_entropy<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    cross_entropy(v[0], &[1, 0, 1, 1])
}

fn op_dropout<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> forgelens::Result<Var<'t, f64>> {
    // Fresh generator per evaluation keeps the mask fixed across probes.
    let mut rng = rng_from_seed(9);
    project(autodiff::dropout(v[0], 0.3, &mut rng, true)?)
}

/// Op checks in f64: `(name, max relative error, entries probed)`.
fn op_checks() -> Vec<(&'static str, f64, usize)> {
    let mut rng = rng_from_seed(100);
    let mut out = Vec::new();
    macro_rules! run {
        ($name:expr, $inputs:expr, $f:expr) => {{
            let r = gradcheck::check(&$inputs, 1e-5, 1e-6, None, $f).unwrap();
            out.push(($name, r.max_rel_err, r.checked));
        }};
    }
    run!("matmul", [randn(&[3, 4], &mut rng), randn(&[4, 5], &mut rng)], op_matmul);
    run!("bmm", [randn(&[2, 3, 4], &mut rng), randn(&[2, 5, 4], &mut rng)], op_bmm);
    run!("broadcast arithmetic", [randn(&[3, 4], &mut rng), randn(&[4], &mut rng)], op_broadcast);
    run!("gelu tanh exp ln scale", [randn(&[3, 4], &mut rng)], op_unary);
    // Keep relu inputs away from the kink.
    let r = randn(&[3, 4], &mut rng);
    let r = Tensor::from_fn(&[3, 4], |i| r.data()[i] + 0.2 * r.data()[i].signum());
    run!("relu", [r], op_relu);
    run!("sum mean", [randn(&[2, 3, 4], &mut rng)], op_reductions);
    run!("permute reshape narrow gather concat", [randn(&[2, 3, 4], &mut rng)], op_shape);
    run!("linear", [randn(&[2, 3, 4], &mut rng), randn(&[4, 5], &mut rng), randn(&[5], &mut rng)], op_linear);
    run!("softmax", [randn(&[2, 3, 4], &mut rng)], op_softmax);
    run!("layer norm", [randn(&[2, 3, 6], &mut rng), randn(&[6], &mut rng), randn(&[6], &mut rng)], op_layer_norm);
    run!("batch norm", [randn(&[2, 3, 3, 3], &mut rng), randn(&[3], &mut rng), randn(&[3], &mut rng)], op_batch_norm);
    run!("conv2d", [randn(&[2, 2, 5, 5], &mut rng), randn(&[3, 2, 3, 3], &mut rng)], op_conv);
    run!("max pool", [randn(&[1, 2, 4, 4], &mut rng)], op_max_pool);
    run!("cross entropy", [randn(&[4, 2], &mut rng)], op_cross_entropy);
    run!("dropout", [randn(&[3, 4], &mut rng)], op_dropout);
    out
}

const GRAD_LABELS: [usize; 2] = [1, 0];

fn model_loss<'t>(model: &Model, ctx: &Ctx<'t, f64>, x: Var<'t, f64>) -> forgelens::Result<Var<'t, f64>> {
    let out = model.forward(ctx, x)?;
    cross_entropy(out.logits, &GRAD_LABELS)?.add(project(out.features)?.scale(0.1))
}

#[derive(Debug, Default)]
struct ModelCheck {
    probes: usize,
    kinks: usize,
    max_rel: f64,
    worst: String,
    above_floor: usize,
    /// Largest |numeric| over probes in parameters whose name starts with each prefix.
    sensitivity: HashMap<String, f64>,
}

/// Builds `spec` in f64, redraws every trainable weight at a scale where
/// all paths carry gradient, and compares tape gradients with central
/// differences for the input and a spread of entries in every parameter.
fn check_model(spec: &ModelSpec, size: usize, seed: u64, per_param: usize, prefixes: &[&str]) -> ModelCheck {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::<f64>::new();
    let model = spec.build(&mut store, &mut rng).unwrap();
    let noise = Normal::new(0.0, 0.25).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        if store.param(id).kind == ParamKind::Trainable {
            for v in store.value_mut(id).data_mut() {
                *v += noise.sample(&mut rng);
            }
        }
    }
    let x = randn(&[2, 3, size, size], &mut rng);
    let loss_at = |store: &ParamStore<f64>, x: &Tensor<f64>| -> f64 {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, Mode::Train, 17);
        let xv = ctx.input(x.clone());
        model_loss(&model, &ctx, xv).unwrap().value().item()
    };

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Train, 17);
    let xv = tape.leaf(x.clone(), true);
    let loss = model_loss(&model, &ctx, xv).unwrap();
    let l0 = loss.value().item();
    let grads = tape.backward(loss).unwrap();
    let x_grad = grads.wrt(xv);
    let param_grads: HashMap<usize, Tensor<f64>> = ctx.param_grads(&grads).into_iter().map(|(id, g)| (id.index(), g)).collect();
    drop(ctx);

    let h = MODEL_FD_STEP;
    let mut out = ModelCheck::default();
    let judge = |out: &mut ModelCheck, name: &str, analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        out.probes += 1;
        if numeric.abs() > GRAD_FLOOR {
            out.above_floor += 1;
        }
        for p in prefixes {
            if name.starts_with(p) {
                let e = out.sensitivity.entry(p.to_string()).or_insert(0.0);
                *e = e.max(numeric.abs());
            }
        }
        if rel > MODEL_GRAD_TOL {
            // A switch inside (θ−h, θ+h) shows up as disagreeing one-sided slopes;
            // the analytic value must still match the slope on one side.
            let (fwd, bwd) = ((plus - l0) / h, (l0 - minus) / h);
            let one_sided = (analytic - fwd).abs().min((analytic - bwd).abs()) / scale;
            if (fwd - bwd).abs() > MODEL_GRAD_TOL * scale && one_sided <= MODEL_GRAD_TOL {
                out.kinks += 1;
                return;
            }
        }
        if rel > out.max_rel {
            out.max_rel = rel;
            out.worst = format!("{name}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    };

    let mut xp = x.clone();
    let n = x.numel();
    for i in (0..n).step_by((n / 12).max(1)) {
        let orig = x.data()[i];
        xp.data_mut()[i] = orig + h;
        let plus = loss_at(&store, &xp);
        xp.data_mut()[i] = orig - h;
        let minus = loss_at(&store, &xp);
        xp.data_mut()[i] = orig;
        judge(&mut out, "input", x_grad.data()[i], plus, minus);
    }

    let mut probe = store.clone();
    for id in store.ids().collect::<Vec<_>>() {
        let p = store.param(id);
        if p.kind != ParamKind::Trainable {
            continue;
        }
        let n = p.value.numel();
        let name = p.name.clone();
        let mut picks: Vec<usize> = (0..per_param).map(|j| j * n / per_param).collect();
        picks.dedup();
        for i in picks {
            let orig = p.value.data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let plus = loss_at(&probe, &x);
            probe.value_mut(id).data_mut()[i] = orig - h;
            let minus = loss_at(&probe, &x);
            probe.value_mut(id).data_mut()[i] = orig;
            let analytic = param_grads.get(&id.index()).map_or(0.0, |g| g.data()[i]);
            judge(&mut out, &name, analytic, plus, minus);
        }
    }
    out
}

fn small_swin(size: usize) -> SwinConfig {
    SwinConfig {
        image_size: size,
        patch_size: 2,
        embed_dim: 8,
        depths: vec![2, 2],
        heads: vec![2, 2],
        window_size: 4,
        mlp_ratio: 2,
        dropout: 0.1,
        num_classes: 2,
    }
}

fn small_conv(variant: ConvVariant) -> ConvConfig {
    ConvConfig {
        width: 4,
        feature_dim: 8,
        ..ConvConfig::new(variant)
    }
}

#[test]
fn gradient_suite() {
    let start = Instant::now();
    let mut pass = true;
    let mut lines = Vec::new();
    let ops = op_checks();
    let op_worst = ops.iter().map(|o| o.1).fold(0.0, f64::max);
    for (name, err, n) in &ops {
        if *err >= OP_GRAD_TOL {
            pass = false;
            lines.push(format!("op {name} rel err {err:.2e} over {n} entries"));
        }
    }
    lines.push(format!("{} ops, worst rel err {op_worst:.2e} (< {OP_GRAD_TOL:e})", ops.len()));

    let mut models: Vec<(String, ModelSpec)> = vec![("swin".into(), ModelSpec::Swin(small_swin(16)))];
    for v in ConvVariant::ALL {
        models.push((v.name().into(), ModelSpec::Conv(small_conv(v))));
    }
    for mode in [FusionMode::CrossAttention, FusionMode::Concat] {
        let spec = ModelSpec::Hybrid {
            swin: small_swin(16),
            conv: small_conv(ConvVariant::ResnetLite),
            fusion: FusionConfig {
                mode,
                shared_dim: 8,
                heads: 2,
                ..Default::default()
            },
        };
        models.push((spec.name(), spec));
    }
    for (i, (name, spec)) in models.iter().enumerate() {
        let c = check_model(spec, 16, 40 + i as u64, 4, &[]);
        let kink_share = c.kinks as f64 / c.probes as f64;
        let ok = c.max_rel < MODEL_GRAD_TOL && kink_share <= MAX_KINK_SHARE && c.above_floor * 2 > c.probes;
        pass &= ok;
        lines.push(format!(
            "{name}: {} probes ({} above floor, {} at a switch), worst rel err {:.2e} [{}]",
            c.probes, c.above_floor, c.kinks, c.max_rel, c.worst
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < GRAD_SUITE_MAX_SECONDS;
    report(
        "gradient suite",
        pass,
        &format!(
            "ops < {OP_GRAD_TOL:e}, models < {MODEL_GRAD_TOL:e}, {secs:.1}s (< {GRAD_SUITE_MAX_SECONDS}s); {}",
            lines.join("; ")
        ),
    );
    assert!(pass, "{}", lines.join("\n"));
}

#[test]
fn hybrid_gradient_reaches_both_backbones() {
    let spec = ModelSpec::from_name("hybrid").unwrap();
    let c = check_model(&spec, 64, 3, 2, &["swin.", "cnn."]);
    let (s, k) = (c.sensitivity.get("swin.").copied().unwrap_or(0.0), c.sensitivity.get("cnn.").copied().unwrap_or(0.0));
    let pass = s > GRAD_FLOOR && k > GRAD_FLOOR && c.max_rel < MODEL_GRAD_TOL;
    report(
        "hybrid gradient flow",
        pass,
        &format!(
            "max |dL/dθ| swin {s:.3e}, cnn {k:.3e} (> {GRAD_FLOOR:e}); {} probes, worst rel err {:.2e}",
            c.probes, c.max_rel
        ),
    );
    assert!(pass, "{c:?}");
}

// ---------------------------------------------------------------------------
// Shifted-window attention against a dense oracle

fn ln_rows(x: &[f64], c: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        let mu = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for j in 0..c {
            o[j] = (row[j] - mu) * inv * g[j] + b[j];
        }
    }
    out
}

fn affine(x: &[f64], din: usize, w: &[f64], b: Option<&[f64]>, dout: usize) -> Vec<f64> {
    let rows = x.len() / din;
    let mut out = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b[o]);
            for i in 0..din {
                acc += x[r * din + i] * w[i * dout + o];
            }
            out[r * dout + o] = acc;
        }
    }
    out
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

/// Multi-head attention over explicit token lists. `allowed(i, j)` gates
/// pairs; `bias(i, j, head)` is added to allowed logits. Returns the
/// concatenated head outputs before the output projection.
#[allow(clippy::too_many_arguments)]
fn dense_attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    tq: usize,
    tk: usize,
    dim: usize,
    heads: usize,
    allowed: &dyn Fn(usize, usize) -> bool,
    bias: &dyn Fn(usize, usize, usize) -> f64,
) -> Vec<f64> {
    let hd = dim / heads;
    let mut out = vec![0.0; tq * dim];
    for h in 0..heads {
        for i in 0..tq {
            let mut logits: Vec<(usize, f64)> = Vec::new();
            for j in 0..tk {
                if allowed(i, j) {
                    let dot: f64 = (0..hd).map(|d| q[i * dim + h * hd + d] * k[j * dim + h * hd + d]).sum();
                    logits.push((j, dot / (hd as f64).sqrt() + bias(i, j, h)));
                }
            }
            let max = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l.1 - max).exp()).sum();
            for &(j, l) in &logits {
                let p = (l - max).exp() / z;
                for d in 0..hd {
                    out[i * dim + h * hd + d] += p * v[j * dim + h * hd + d];
                }
            }
        }
    }
    out
}

struct Named<'a>(&'a ParamStore<f64>, &'a str);

impl Named<'_> {
    fn get(&self, name: &str) -> Vec<f64> {
        let full = format!("{}.{name}", self.1);
        let id = self.0.find(&full).unwrap_or_else(|| panic!("no parameter {full}"));
        self.0.value(id).data().to_vec()
    }
}

/// One block on a `[H, W, C]` grid (single image), computed token by token.
/// Tokens attend when they share a window after the cyclic shift and the
/// shift did not wrap them apart, i.e. their offset is the same in both
/// frames. With `masked = false` the wrap condition is dropped.
#[allow(clippy::too_many_arguments)]
fn oracle_block(p: &Named, x: &[f64], hgt: usize, wid: usize, c: usize, heads: usize, win: usize, shift: usize, masked: bool) -> Vec<f64> {
    let t = hgt * wid;
    let xn = ln_rows(x, c, &p.get("norm1.gamma"), &p.get("norm1.beta"));
    let q = affine(&xn, c, &p.get("attn.q.weight"), Some(&p.get("attn.q.bias")), c);
    let k = affine(&xn, c, &p.get("attn.k.weight"), Some(&p.get("attn.k.bias")), c);
    let v = affine(&xn, c, &p.get("attn.v.weight"), Some(&p.get("attn.v.bias")), c);
    let table = p.get("attn.relative_bias");
    let pos = |i: usize| (i / wid, i % wid);
    // Position in the shifted frame.
    let shifted = |r: usize, n: usize| (r + n - shift) % n;
    let allowed = |i: usize, j: usize| {
        let ((r1, c1), (r2, c2)) = (pos(i), pos(j));
        let (s1, s2) = ((shifted(r1, hgt), shifted(c1, wid)), (shifted(r2, hgt), shifted(c2, wid)));
        let same_window = s1.0 / win == s2.0 / win && s1.1 / win == s2.1 / win;
        let unwrapped = s1.0 as isize - s2.0 as isize == r1 as isize - r2 as isize
            && s1.1 as isize - s2.1 as isize == c1 as isize - c2 as isize;
        same_window && (unwrapped || !masked)
    };
    let bias = |i: usize, j: usize, h: usize| {
        let ((r1, c1), (r2, c2)) = (pos(i), pos(j));
        let (s1, s2) = ((shifted(r1, hgt), shifted(c1, wid)), (shifted(r2, hgt), shifted(c2, wid)));
        let dy = s1.0 % win + win - 1 - s2.0 % win;
        let dx = s1.1 % win + win - 1 - s2.1 % win;
        table[(dy * (2 * win - 1) + dx) * heads + h]
    };
    let att = dense_attention(&q, &k, &v, t, t, c, heads, &allowed, &bias);
    let y = affine(&att, c, &p.get("attn.proj.weight"), Some(&p.get("attn.proj.bias")), c);
    let x1: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
    let hn = ln_rows(&x1, c, &p.get("norm2.gamma"), &p.get("norm2.beta"));
    let hidden = p.get("fc1.bias").len();
    let m = affine(&hn, c, &p.get("fc1.weight"), Some(&p.get("fc1.bias")), hidden);
    let m: Vec<f64> = m.into_iter().map(gelu_tanh).collect();
    let m = affine(&m, hidden, &p.get("fc2.weight"), Some(&p.get("fc2.bias")), c);
    x1.iter().zip(&m).map(|(a, b)| a + b).collect()
}

fn scramble(store: &mut ParamStore<f64>, rng: &mut Rng) {
    let n = Normal::new(0.0, 0.6).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let is_gamma = store.param(id).name.ends_with("gamma");
        for v in store.value_mut(id).data_mut() {
            *v = n.sample(rng) + if is_gamma { 1.0 } else { 0.0 };
        }
    }
}

#[test]
fn shifted_window_block_matches_dense_oracle() {
    let (c, heads, win, shift) = (8, 2, 4, 2);
    let mut worst: f64 = 0.0;
    let mut mask_effect = f64::INFINITY;
    let mut checked = 0;
    for draw in 0..SHIFT_ORACLE_DRAWS {
        let mut rng = rng_from_seed(500 + draw);
        let mut store = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut store, "blk", c, heads, win, shift, 2, &mut rng).unwrap();
        scramble(&mut store, &mut rng);
        // 8x8 grids have interior and wrapped windows; 4x4 is a single wrapped window.
        for grid in [8, 4] {
            let (n, per) = (2, grid * grid * c);
            let x = Tensor::from_fn(&[n, grid, grid, c], |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                1.5 * z
            });
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
            let y = block.forward(&ctx, ctx.input(x.clone())).unwrap().value();
            let p = Named(&store, "blk");
            for b in 0..n {
                let xs = &x.data()[b * per..(b + 1) * per];
                let want = oracle_block(&p, xs, grid, grid, c, heads, win, shift, true);
                let loose = oracle_block(&p, xs, grid, grid, c, heads, win, shift, false);
                let got = &y.data()[b * per..(b + 1) * per];
                let err = got.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                let effect = got.iter().zip(&loose).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(err);
                mask_effect = mask_effect.min(effect);
                checked += 1;
            }
        }
    }
    let pass = worst < SHIFT_ORACLE_TOL && mask_effect > 1e-3;
    report(
        "shifted-window dense oracle",
        pass,
        &format!(
            "{checked} images over {SHIFT_ORACLE_DRAWS} weight draws, max |diff| {worst:.2e} (< {SHIFT_ORACLE_TOL:e}); dropping the wrap mask moves outputs by >= {mask_effect:.2e}"
        ),
    );
    assert!(pass);
}

#[test]
fn window_attention_rows_are_distributions() {
    let mut rng = rng_from_seed(77);
    let mut store = ParamStore::<f64>::new();
    let attn = WindowAttention::new(&mut store, "a", 8, 2, 4, &mut rng).unwrap();
    scramble(&mut store, &mut rng);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
    // One all-masked-but-diagonal window and one unmasked window.
    let mut mask = Tensor::full(&[2, 16, 16], 0.0);
    for i in 0..16 {
        for j in 0..16 {
            if i != j {
                mask.data_mut()[i * 16 + j] = -1e9;
            }
        }
    }
    let x = ctx.input(randn(&[4, 16, 8], &mut rng));
    let (p, _) = attn.attend(&ctx, x, Some(&mask)).unwrap();
    let p = p.value();
    for (r, row) in p.data().chunks(16).enumerate() {
        let s: f64 = row.iter().sum();
        assert!((s - 1.0).abs() < 1e-12, "row {r} sums to {s}");
        let window = (r / (2 * 16)) % 2;
        if window == 0 {
            let i = r % 16;
            assert_eq!(row[i], 1.0);
        }
    }
}

#[test]
fn cross_attention_with_equal_streams_is_self_attention() {
    let mut rng = rng_from_seed(78);
    let mut store = ParamStore::<f64>::new();
    let block = CrossAttention::new(&mut store, "x", 8, 2, &mut rng).unwrap();
    scramble(&mut store, &mut rng);
    let tokens = randn(&[1, 5, 8], &mut rng);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, Mode::Eval, 0);
    let t = ctx.input(tokens.clone());
    let (_, y) = block.forward(&ctx, t, t).unwrap();
    let p = Named(&store, "x");
    let xs = tokens.data();
    let q = affine(xs, 8, &p.get("wq.weight"), Some(&p.get("wq.bias")), 8);
    let k = affine(xs, 8, &p.get("wk.weight"), Some(&p.get("wk.bias")), 8);
    let v = affine(xs, 8, &p.get("wv.weight"), Some(&p.get("wv.bias")), 8);
    let att = dense_attention(&q, &k, &v, 5, 5, 8, 2, &|_, _| true, &|_, _, _| 0.0);
    let o = affine(&att, 8, &p.get("wo.weight"), Some(&p.get("wo.bias")), 8);
    let sum: Vec<f64> = xs.iter().zip(&o).map(|(a, b)| a + b).collect();
    let want = ln_rows(&sum, 8, &p.get("norm.gamma"), &p.get("norm.beta"));
    let err = y.value().data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-10, "max diff {err}");
}

// ---------------------------------------------------------------------------
// ELA against an explicit encode/decode/difference

#[test]
fn ela_matches_explicit_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dataset::make_fixture_dataset(&dir.path().join("raw"), 5, 21).unwrap();
    let files = dataset::scan_dataset(&root).unwrap();
    let mut compared = 0;
    let mut bad = Vec::new();
    for q in [70u8, 90, 95] {
        for (rel, _) in &files {
            let decoded = image::open(root.join(rel)).unwrap().to_rgb8();
            let (w, h) = decoded.dimensions();
            let original = ImageBuffer::new(w as usize, h as usize, decoded.into_raw()).unwrap();
            let jpg = jpeg::encode(&original, q, Subsampling::S420).unwrap();
            let back = jpeg::decode(&jpg).unwrap();
            let want: Vec<u8> = original
                .pixels()
                .iter()
                .zip(back.pixels())
                .map(|(&a, &b)| (i16::from(a) - i16::from(b)).unsigned_abs() as u8)
                .collect();
            let got = ela::ela_transform(&ImageBuffer::open(&root.join(rel)).unwrap(), &ElaConfig::with_quality(q)).unwrap();
            if got.samples() != want.as_slice() {
                bad.push(format!("{rel}@q{q}"));
            }
            compared += 1;
        }
    }
    let pass = compared == 30 && bad.is_empty();
    report(
        "ELA residual oracle",
        pass,
        &format!("{} of {compared} image/quality pairs byte-identical (qualities 70, 90, 95)", compared - bad.len()),
    );
    assert!(pass, "mismatches: {bad:?}");
}

// ---------------------------------------------------------------------------
// KNN against brute force

fn oracle_distance(a: &[f32], b: &[f32], metric: Metric) -> f64 {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).collect();
    match metric {
        Metric::Euclidean => d.iter().map(|v| v * v).sum::<f64>().sqrt(),
        Metric::Manhattan => d.iter().sum(),
        Metric::Chebyshev => d.iter().cloned().fold(0.0, f64::max),
        Metric::Minkowski => d.iter().map(|v| v.powf(DEFAULT_MINKOWSKI_P)).sum::<f64>().powf(1.0 / DEFAULT_MINKOWSKI_P),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            (1.0 - dot / (na * nb)).max(0.0)
        }
    }
}

fn oracle_predict(rows: &[Vec<f32>], labels: &[usize], q: &[f32], k: usize, metric: Metric, weighting: Weighting) -> usize {
    let mut order: Vec<(f64, usize)> = rows.iter().enumerate().map(|(i, r)| (oracle_distance(r, q, metric), i)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut votes = [0.0f64; 2];
    for &(d, i) in &order[..k] {
        votes[labels[i]] += match weighting {
            Weighting::Uniform => 1.0,
            Weighting::Distance => 1.0 / (d + DEFAULT_EPSILON),
        };
    }
    usize::from(votes[1] > votes[0])
}

#[test]
fn knn_matches_brute_force() {
    let mut rng = rng_from_seed(31);
    let (n, d) = (50, 6);
    let rows: Vec<Vec<f32>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
    let store = FeatureStore::fit(rows.concat(), d, &labels, "oracle").unwrap();
    // Fresh points plus exact copies of stored rows (zero distances).
    let mut queries: Vec<Vec<f32>> = (0..40).map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect()).collect();
    queries.extend(rows.iter().step_by(7).cloned());
    let mut exact = 0;
    let mut total = 0;
    for metric in Metric::ALL {
        for weighting in Weighting::ALL {
            for k in [1, 3, 5] {
                let cfg = KnnConfig::new(k, metric, weighting);
                let ok = queries
                    .iter()
                    .all(|q| store.predict(q, &cfg).unwrap().0 == oracle_predict(&rows, &labels, q, k, metric, weighting));
                exact += usize::from(ok);
                total += 1;
            }
        }
    }
    let pass = exact == total && total == 30;
    report(
        "KNN brute-force oracle",
        pass,
        &format!("{exact}/{total} configurations agree on all {} queries", queries.len()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Optimizers against scalar recurrences

const QUAD_A: [f64; 3] = [1.0, 4.0, 0.25];
const QUAD_C: [f64; 3] = [0.5, -1.0, 2.0];

fn quad_grad(theta: &[f64]) -> Vec<f64> {
    theta.iter().zip(QUAD_A.iter().zip(QUAD_C)).map(|(t, (a, c))| 2.0 * a * (t - c)).collect()
}

fn library_run(cfg: &OptimizerConfig, steps: usize) -> Vec<f64> {
    let mut store = ParamStore::<f64>::new();
    store.begin_group("all");
    let id = store.add("theta", Tensor::new(&[3], vec![0.0, 0.0, 0.0]).unwrap());
    let mut state = OptimState::new(&store);
    for _ in 0..steps {
        let g = Tensor::new(&[3], quad_grad(store.value(id).data())).unwrap();
        optim::step(cfg, &mut store, &mut state, &[(id, g)], &[true]).unwrap();
    }
    store.value(id).data().to_vec()
}

fn oracle_rmsprop(lr: f64, alpha: f64, eps: f64, steps: usize) -> Vec<f64> {
    let (mut th, mut v) = ([0.0f64; 3], [0.0f64; 3]);
    for _ in 0..steps {
        let g = quad_grad(&th);
        for i in 0..3 {
            v[i] = alpha * v[i] + (1.0 - alpha) * g[i] * g[i];
            th[i] -= lr * g[i] / (v[i].sqrt() + eps);
        }
    }
    th.to_vec()
}

fn oracle_adamw(lr: f64, wd: f64, b1: f64, b2: f64, eps: f64, steps: usize) -> Vec<f64> {
    let (mut th, mut m, mut v) = ([0.0f64; 3], [0.0f64; 3], [0.0f64; 3]);
    for t in 1..=steps {
        let g = quad_grad(&th);
        for i in 0..3 {
            th[i] -= lr * wd * th[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t as i32));
            let vh = v[i] / (1.0 - b2.powi(t as i32));
            th[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
    th.to_vec()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn optimizers_match_recurrences() {
    let rms = OptimizerConfig::rmsprop(0.01);
    let adam = OptimizerConfig::adamw(0.05, 0.1);
    let e_rms = max_diff(&library_run(&rms, 50), &oracle_rmsprop(0.01, rms.alpha, rms.eps, 50));
    let e_adam = max_diff(&library_run(&adam, 50), &oracle_adamw(0.05, 0.1, adam.beta1, adam.beta2, adam.eps, 50));

    // With a zero gradient AdamW is pure decay, step for step.
    let (lr, wd) = (1e-3, 0.05);
    let cfg = OptimizerConfig::adamw(lr, wd);
    let mut decay_exact = true;
    let mut store = ParamStore::<f32>::new();
    store.begin_group("all");
    let id = store.add("w", Tensor::new(&[4], vec![1.0f32, -2.5, 0.3, 7.0]).unwrap());
    let mut state = OptimState::new(&store);
    let factor = (1.0 - lr * wd) as f32;
    for _ in 0..20 {
        let before = store.value(id).data().to_vec();
        optim::step(&cfg, &mut store, &mut state, &[(id, Tensor::zeros(&[4]))], &[true]).unwrap();
        decay_exact &= store.value(id).data().iter().zip(&before).all(|(a, b)| *a == b * factor);
    }
    let mut store64 = ParamStore::<f64>::new();
    store64.begin_group("all");
    let id64 = store64.add("w", Tensor::new(&[2], vec![1.25, -3.0]).unwrap());
    let mut state64 = OptimState::new(&store64);
    for _ in 0..20 {
        let before = store64.value(id64).data().to_vec();
        optim::step(&cfg, &mut store64, &mut state64, &[(id64, Tensor::zeros(&[2]))], &[true]).unwrap();
        decay_exact &= store64.value(id64).data().iter().zip(&before).all(|(a, b)| *a == b * (1.0 - lr * wd));
    }

    let pass = e_rms <= OPTIM_TOL && e_adam <= OPTIM_TOL && decay_exact;
    report(
        "optimizer recurrences",
        pass,
        &format!(
            "50 steps: rmsprop max |diff| {e_rms:.1e}, adamw {e_adam:.1e} (<= {OPTIM_TOL:e}); zero-gradient decay exact: {decay_exact}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Training behaviour

#[test]
fn swin_overfits_tiny_batch() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let result = overfit_tiny_batch::run_example(dir.path(), OVERFIT_MAX_STEPS, OVERFIT_TARGET).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let pass = result.is_some() && secs < OVERFIT_MAX_SECONDS;
    let detail = match result {
        Some((steps, acc)) => format!("train accuracy {acc:.3} after {steps} steps in {secs:.1}s"),
        None => format!("below {OVERFIT_TARGET} after {OVERFIT_MAX_STEPS} steps ({secs:.1}s)"),
    };
    report(
        "tiny-batch overfit",
        pass,
        &format!("{detail} (target >= {OVERFIT_TARGET} within {OVERFIT_MAX_STEPS} steps, < {OVERFIT_MAX_SECONDS}s)"),
    );
    assert!(pass);
}

#[test]
fn knn_generalization_gap_exceeds_swin() {
    let dir = tempfile::tempdir().unwrap();
    let r = swin_knn_gap::run_example(dir.path(), 100, 10, 0).unwrap();
    let (sg, kg) = (r.swin_gap(), r.knn_gap());
    let pass = kg > 0.0 && kg >= GAP_RATIO * sg;
    report(
        "swin vs KNN generalization gap",
        pass,
        &format!(
            "swin train {:.3} test {:.3} gap {sg:.4}; knn ({} {} k={}) train {:.3} test {:.3} gap {kg:.4}; need knn gap >= {GAP_RATIO} x swin gap",
            r.swin_train, r.swin_test, r.knn_best.metric.name(), r.knn_best.weighting.name(), r.knn_best.k, r.knn_train, r.knn_test
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Metrics

#[test]
fn accuracy_is_exact() {
    let mut rng = rng_from_seed(1234);
    let mut mismatches = 0;
    for _ in 0..ACCURACY_TRIALS {
        let n = rng.random_range(1..=300usize);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let agree = labels.iter().zip(&preds).filter(|(a, b)| a == b).count() as u64;
        // Reduce to lowest terms; the float must be the correctly rounded quotient.
        let g = gcd(agree, n as u64);
        let (num, den) = (agree / g.max(1), n as u64 / g.max(1));
        let got = accuracy(&confusion(&preds, &labels).unwrap()).unwrap();
        let exact = if agree == 0 { got == 0.0 } else { got == num as f64 / den as f64 };
        // Cross-multiplication check on the integer side.
        let consistent = (got * den as f64).round() as u64 == num;
        if !(exact && consistent) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(
        "accuracy exactness",
        pass,
        &format!("{} of {ACCURACY_TRIALS} random prediction/label pairs exact (tolerance 0)", ACCURACY_TRIALS - mismatches),
    );
    assert!(pass);
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

// ---------------------------------------------------------------------------
// Reproducibility through the binary

fn forgelens(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_forgelens"))
        .args(args)
        .env_remove("FORGELENS_THREADS")
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = forgelens(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (raw, ela) = (dir.path().join("raw"), dir.path().join("ela"));
    run_ok(&["--seed", "4", "fixture", "--out", p(&raw), "--n-per-class", "6"]);
    run_ok(&["ela", "--in", p(&raw), "--out", p(&ela)]);
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "model = \"hybrid\"\nbatch_size = 4\nepochs = 2\nimage_size = 64\nseed = 8\n\n[normalization]\nmean = [0.0, 0.0, 0.0]\nstd = [0.05, 0.05, 0.05]\n",
    )
    .unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            run_ok(&["--threads", "1", "train", "--config", p(&cfg), "--data", p(&ela), "--out", p(&out)]);
            out
        })
        .collect();
    let files = ["checkpoint.bin", "metrics.csv", "metrics_summary.json", "dataset_split.jsonl"];
    let same: Vec<bool> = files
        .iter()
        .map(|f| std::fs::read(runs[0].join(f)).unwrap() == std::fs::read(runs[1].join(f)).unwrap())
        .collect();
    let pass = same.iter().all(|&s| s);
    report(
        "training reproducibility",
        pass,
        &format!(
            "two --threads 1 hybrid runs: {}",
            files.iter().zip(&same).map(|(f, s)| format!("{f} {}", if *s { "identical" } else { "differs" })).collect::<Vec<_>>().join(", ")
        ),
    );
    assert!(pass);
}

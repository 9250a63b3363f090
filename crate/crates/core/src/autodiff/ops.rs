//! Forward and backward kernels for every op kind.

use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Batchnorm statistics source.
#[derive(Debug, Clone, PartialEq)]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Batch { eps: f64 },
    /// Normalize with fixed (running) statistics.
    Running { mean: Vec<f64>, var: Vec<f64>, eps: f64 },
}

/// An operation together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf { trainable: bool },
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Zero-padded convolution, kernel 1x1 or 3x3, inputs `(x [n,ci,h,w], w [co,ci,k,k])`.
    Conv2d { stride: usize },
    Add,
    Mul,
    ScalarMul(f64),
    Relu,
    /// Inputs `(x, gamma [c], beta [c])`, channel axis 1.
    BatchNorm(BnMode),
    GlobalAvgPool,
    /// Concatenation along the channel axis.
    Concat,
    /// Mean cross-entropy over the batch; input `logits [n, k]`.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// Inputs `(x, b [c])`, broadcast along axis 1.
    BiasAdd,
    Sum,
    /// Appends `extra` zero channels.
    PadChannels { extra: usize },
    /// Multiplies sample `i` by `forward[i]` (or the single entry) and scales
    /// the incoming gradient by `backward[i]` instead.
    Shake { forward: Vec<f64>, backward: Vec<f64> },
}

/// Name-only view of [`Op`], parseable from text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Conv2d,
    Add,
    Mul,
    ScalarMul,
    Relu,
    BatchNorm,
    GlobalAvgPool,
    Concat,
    SoftmaxCrossEntropy,
    BiasAdd,
    Sum,
    PadChannels,
    Shake,
}

const KIND_NAMES: [(OpKind, &str); 15] = [
    (OpKind::Leaf, "leaf"),
    (OpKind::MatMul, "matmul"),
    (OpKind::Conv2d, "conv2d"),
    (OpKind::Add, "add"),
    (OpKind::Mul, "mul"),
    (OpKind::ScalarMul, "scalar_mul"),
    (OpKind::Relu, "relu"),
    (OpKind::BatchNorm, "batchnorm"),
    (OpKind::GlobalAvgPool, "global_avg_pool"),
    (OpKind::Concat, "concat"),
    (OpKind::SoftmaxCrossEntropy, "softmax_cross_entropy"),
    (OpKind::BiasAdd, "bias_add"),
    (OpKind::Sum, "sum"),
    (OpKind::PadChannels, "pad_channels"),
    (OpKind::Shake, "shake"),
];

impl OpKind {
    pub fn name(self) -> &'static str {
        KIND_NAMES.iter().find(|(k, _)| *k == self).map(|(_, n)| *n).unwrap_or("?")
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KIND_NAMES
            .iter()
            .find(|(_, n)| *n == s)
            .map(|(k, _)| *k)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf { .. } => OpKind::Leaf,
            Op::MatMul => OpKind::MatMul,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Add => OpKind::Add,
            Op::Mul => OpKind::Mul,
            Op::ScalarMul(_) => OpKind::ScalarMul,
            Op::Relu => OpKind::Relu,
            Op::BatchNorm(_) => OpKind::BatchNorm,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Concat => OpKind::Concat,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::BiasAdd => OpKind::BiasAdd,
            Op::Sum => OpKind::Sum,
            Op::PadChannels { .. } => OpKind::PadChannels,
            Op::Shake { .. } => OpKind::Shake,
        }
    }

    /// A `Shake` whose backward scales differ from its forward scales.
    pub fn is_unfrozen(&self) -> bool {
        matches!(self, Op::Shake { forward, backward } if forward != backward)
    }
}

/// Values saved by forward for use in backward.
#[derive(Debug, Clone, Default)]
pub(crate) enum Ctx {
    #[default]
    None,
    BatchNorm { xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    Softmax { probs: Vec<f64> },
}

fn shape_err(op: &Op, inputs: &[&Tensor]) -> Error {
    Error::Shape {
        op: op.kind().name(),
        shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
    }
}

fn arity(op: &Op, inputs: &[&Tensor], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(Error::Attribute {
            op: op.kind().name(),
            detail: alloc::format!("expected {n} inputs, got {}", inputs.len()),
        });
    }
    Ok(())
}

/// Product of the dims after the channel axis.
fn inner_size(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor]) -> Result<(Tensor, Ctx)> {
    let out = match op {
        Op::Leaf { .. } => {
            return Err(Error::Attribute { op: "leaf", detail: "leaves are not computed".into() })
        }
        Op::MatMul => {
            arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err(op, inputs));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))?
        }
        Op::Conv2d { stride } => {
            arity(op, inputs, 2)?;
            let geo = ConvGeometry::new(op, inputs, *stride)?;
            let data = conv_forward(&geo, inputs[0].data(), inputs[1].data());
            Tensor::new(geo.out_shape(), data)?
        }
        Op::Add | Op::Mul => {
            arity(op, inputs, 2)?;
            if inputs[0].shape() != inputs[1].shape() {
                return Err(shape_err(op, inputs));
            }
            if matches!(op, Op::Add) {
                inputs[0].zip_map(inputs[1], |a, b| a + b)
            } else {
                inputs[0].zip_map(inputs[1], |a, b| a * b)
            }
        }
        Op::ScalarMul(c) => {
            arity(op, inputs, 1)?;
            inputs[0].map(|a| c * a)
        }
        Op::Relu => {
            arity(op, inputs, 1)?;
            inputs[0].map(|a| if a > 0.0 { a } else { 0.0 })
        }
        Op::BatchNorm(mode) => {
            arity(op, inputs, 3)?;
            return batchnorm_forward(op, mode, inputs);
        }
        Op::GlobalAvgPool => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.shape().len() != 4 {
                return Err(shape_err(op, inputs));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let s = inner_size(x.shape());
            let data = x.data().chunks(s).map(|ch| ch.iter().sum::<f64>() / s as f64).collect();
            Tensor::new(vec![n, c], data)?
        }
        Op::Concat => {
            if inputs.is_empty() {
                return Err(shape_err(op, inputs));
            }
            let first = inputs[0].shape();
            if first.len() < 2
                || inputs.iter().any(|t| {
                    t.shape().len() != first.len() || t.shape()[0] != first[0] || t.shape()[2..] != first[2..]
                })
            {
                return Err(shape_err(op, inputs));
            }
            let n = first[0];
            let channels: usize = inputs.iter().map(|t| t.shape()[1]).sum();
            let mut shape = first.to_vec();
            shape[1] = channels;
            let mut data = Vec::with_capacity(shape.iter().product());
            for i in 0..n {
                for t in inputs {
                    let per = t.len() / n;
                    data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
                }
            }
            Tensor::new(shape, data)?
        }
        Op::SoftmaxCrossEntropy { labels } => {
            arity(op, inputs, 1)?;
            let logits = inputs[0];
            if logits.shape().len() != 2 || logits.shape()[0] != labels.len() {
                return Err(shape_err(op, inputs));
            }
            let k = logits.shape()[1];
            if let Some(bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Attribute {
                    op: "softmax_cross_entropy",
                    detail: alloc::format!("label {bad} out of range for {k} classes"),
                });
            }
            let mut probs = Vec::with_capacity(logits.len());
            let mut loss = 0.0;
            for (row, &label) in logits.data().chunks(k).zip(labels) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|&z| libm::exp(z - max)).sum();
                let lse = max + libm::log(denom);
                loss += lse - row[label];
                probs.extend(row.iter().map(|&z| libm::exp(z - lse)));
            }
            let n = labels.len() as f64;
            return Ok((Tensor::scalar(loss / n), Ctx::Softmax { probs }));
        }
        Op::BiasAdd => {
            arity(op, inputs, 2)?;
            let (x, b) = (inputs[0], inputs[1]);
            if x.shape().len() < 2 || b.shape() != [x.shape()[1]] {
                return Err(shape_err(op, inputs));
            }
            let s = inner_size(x.shape());
            let c = x.shape()[1];
            let mut out = x.clone();
            for (j, chunk) in out.data_mut().chunks_mut(s).enumerate() {
                let bias = b.data()[j % c];
                chunk.iter_mut().for_each(|v| *v += bias);
            }
            out
        }
        Op::Sum => {
            arity(op, inputs, 1)?;
            Tensor::scalar(inputs[0].data().iter().sum())
        }
        Op::PadChannels { extra } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            if x.shape().len() < 2 {
                return Err(shape_err(op, inputs));
            }
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let s = inner_size(x.shape());
            let mut shape = x.shape().to_vec();
            shape[1] = c + extra;
            let mut data = vec![0.0; n * (c + extra) * s];
            for i in 0..n {
                data[i * (c + extra) * s..][..c * s].copy_from_slice(&x.data()[i * c * s..][..c * s]);
            }
            Tensor::new(shape, data)?
        }
        Op::Shake { forward, backward } => {
            arity(op, inputs, 1)?;
            let x = inputs[0];
            check_scales(op, x, forward, backward)?;
            scale_per_sample(x, forward)
        }
    };
    Ok((out, Ctx::None))
}

fn check_scales(op: &Op, x: &Tensor, forward: &[f64], backward: &[f64]) -> Result<()> {
    let n = x.shape()[0];
    let ok = |s: &[f64]| s.len() == 1 || s.len() == n;
    if !ok(forward) || !ok(backward) {
        return Err(Error::Attribute {
            op: op.kind().name(),
            detail: alloc::format!(
                "scale vectors must have length 1 or {n}, got {} and {}",
                forward.len(),
                backward.len()
            ),
        });
    }
    Ok(())
}

fn scale_per_sample(x: &Tensor, scales: &[f64]) -> Tensor {
    let per = x.len() / x.shape()[0];
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let s = if scales.len() == 1 { scales[0] } else { scales[i] };
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    out
}

/// Gradients for each input, `None` where `needs[i]` is false.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    ctx: &Ctx,
    dy: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
    match op {
        Op::Leaf { .. } => {}
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if needs[0] {
                let bt = transpose(b.data(), k, n);
                grads[0] = Some(tensor(a.shape(), matmul(dy.data(), &bt, m, n, k)));
            }
            if needs[1] {
                let at = transpose(a.data(), m, k);
                grads[1] = Some(tensor(b.shape(), matmul(&at, dy.data(), k, m, n)));
            }
        }
        Op::Conv2d { stride } => {
            let geo = ConvGeometry::new(op, inputs, *stride).expect("validated in forward");
            let (dx, dw) = conv_backward(&geo, inputs[0].data(), inputs[1].data(), dy.data(), needs);
            grads[0] = dx.map(|d| tensor(inputs[0].shape(), d));
            grads[1] = dw.map(|d| tensor(inputs[1].shape(), d));
        }
        Op::Add => {
            grads[0] = needs[0].then(|| dy.clone());
            grads[1] = needs[1].then(|| dy.clone());
        }
        Op::Mul => {
            grads[0] = needs[0].then(|| dy.zip_map(inputs[1], |g, b| g * b));
            grads[1] = needs[1].then(|| dy.zip_map(inputs[0], |g, a| g * a));
        }
        Op::ScalarMul(c) => grads[0] = Some(dy.map(|g| c * g)),
        Op::Relu => grads[0] = Some(dy.zip_map(inputs[0], |g, x| if x > 0.0 { g } else { 0.0 })),
        Op::BatchNorm(mode) => {
            let Ctx::BatchNorm { xhat, inv_std, .. } = ctx else { unreachable!("batchnorm ctx") };
            let x = inputs[0];
            let gamma = inputs[1].data();
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let s = inner_size(x.shape());
            let m = (n * s) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for (j, (g, h)) in dy.data().chunks(s).zip(xhat.chunks(s)).enumerate() {
                let ch = j % c;
                for (&gv, &hv) in g.iter().zip(h) {
                    dgamma[ch] += gv * hv;
                    dbeta[ch] += gv;
                }
            }
            if needs[0] {
                let batch = matches!(mode, BnMode::Batch { .. });
                let mut dx = vec![0.0; x.len()];
                for (j, ((out, g), h)) in dx.chunks_mut(s).zip(dy.data().chunks(s)).zip(xhat.chunks(s)).enumerate() {
                    let ch = j % c;
                    let scale = gamma[ch] * inv_std[ch];
                    for ((o, &gv), &hv) in out.iter_mut().zip(g).zip(h) {
                        *o = if batch {
                            scale * (gv - dbeta[ch] / m - hv * dgamma[ch] / m)
                        } else {
                            scale * gv
                        };
                    }
                }
                grads[0] = Some(tensor(x.shape(), dx));
            }
            grads[1] = needs[1].then(|| tensor(&[c], dgamma));
            grads[2] = needs[2].then(|| tensor(&[c], dbeta));
        }
        Op::GlobalAvgPool => {
            let x = inputs[0];
            let s = inner_size(x.shape());
            let mut dx = Vec::with_capacity(x.len());
            for &g in dy.data() {
                dx.extend(core::iter::repeat_n(g / s as f64, s));
            }
            grads[0] = Some(tensor(x.shape(), dx));
        }
        Op::Concat => {
            let n = output.shape()[0];
            let per_out = output.len() / n;
            let mut offset = 0;
            for (idx, t) in inputs.iter().enumerate() {
                let per = t.len() / n;
                if needs[idx] {
                    let mut d = Vec::with_capacity(t.len());
                    for i in 0..n {
                        d.extend_from_slice(&dy.data()[i * per_out + offset..][..per]);
                    }
                    grads[idx] = Some(tensor(t.shape(), d));
                }
                offset += per;
            }
        }
        Op::SoftmaxCrossEntropy { labels } => {
            let Ctx::Softmax { probs } = ctx else { unreachable!("softmax ctx") };
            let k = inputs[0].shape()[1];
            let scale = dy.item() / labels.len() as f64;
            let mut d = probs.clone();
            for (row, &label) in d.chunks_mut(k).zip(labels) {
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            grads[0] = Some(tensor(inputs[0].shape(), d));
        }
        Op::BiasAdd => {
            let x = inputs[0];
            let c = x.shape()[1];
            let s = inner_size(x.shape());
            grads[0] = needs[0].then(|| dy.clone());
            if needs[1] {
                let mut db = vec![0.0; c];
                for (j, chunk) in dy.data().chunks(s).enumerate() {
                    db[j % c] += chunk.iter().sum::<f64>();
                }
                grads[1] = Some(tensor(&[c], db));
            }
        }
        Op::Sum => grads[0] = Some(Tensor::full(inputs[0].shape(), dy.item())),
        Op::PadChannels { extra } => {
            let x = inputs[0];
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let s = inner_size(x.shape());
            let mut d = Vec::with_capacity(x.len());
            for i in 0..n {
                d.extend_from_slice(&dy.data()[i * (c + extra) * s..][..c * s]);
            }
            grads[0] = Some(tensor(x.shape(), d));
        }
        Op::Shake { backward, .. } => grads[0] = Some(scale_per_sample(dy, backward)),
    }
    grads
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("kernel produced a consistent buffer")
}

fn batchnorm_forward(op: &Op, mode: &BnMode, inputs: &[&Tensor]) -> Result<(Tensor, Ctx)> {
    let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
    if x.shape().len() < 2 {
        return Err(shape_err(op, inputs));
    }
    let (n, c) = (x.shape()[0], x.shape()[1]);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(shape_err(op, inputs));
    }
    let s = inner_size(x.shape());
    let (mean, var, eps) = match mode {
        BnMode::Batch { eps } => {
            let m = (n * s) as f64;
            let mut mean = vec![0.0; c];
            for (j, chunk) in x.data().chunks(s).enumerate() {
                mean[j % c] += chunk.iter().sum::<f64>();
            }
            mean.iter_mut().for_each(|v| *v /= m);
            let mut var = vec![0.0; c];
            for (j, chunk) in x.data().chunks(s).enumerate() {
                let mu = mean[j % c];
                var[j % c] += chunk.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var, *eps)
        }
        BnMode::Running { mean, var, eps } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::Attribute {
                    op: "batchnorm",
                    detail: alloc::format!("running stats have {} entries for {c} channels", mean.len()),
                });
            }
            (mean.clone(), var.clone(), *eps)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + eps)).collect();
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (j, chunk) in x.data().chunks(s).enumerate() {
        let ch = j % c;
        for &v in chunk {
            let h = (v - mean[ch]) * inv_std[ch];
            xhat.push(h);
            out.push(gamma.data()[ch] * h + beta.data()[ch]);
        }
    }
    Ok((tensor(x.shape(), out), Ctx::BatchNorm { xhat, inv_std, mean, var }))
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

struct ConvGeometry {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    fn new(op: &Op, inputs: &[&Tensor], stride: usize) -> Result<Self> {
        let (x, w) = (inputs[0], inputs[1]);
        if stride != 1 && stride != 2 {
            return Err(Error::Attribute { op: "conv2d", detail: alloc::format!("stride {stride} (expected 1 or 2)") });
        }
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err(op, inputs));
        }
        let k = ws[2];
        if k != 1 && k != 3 {
            return Err(Error::Attribute { op: "conv2d", detail: alloc::format!("kernel {k}x{k} (expected 1x1 or 3x3)") });
        }
        let pad = k / 2;
        let ho = (xs[2] + 2 * pad - k) / stride + 1;
        let wo = (xs[3] + 2 * pad - k) / stride + 1;
        Ok(Self { n: xs[0], ci: xs[1], h: xs[2], w: xs[3], co: ws[0], k, stride, pad, ho, wo })
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.co, self.ho, self.wo]
    }

    /// Output rows `oh` for which `oh * stride + kh - pad` lands inside the input.
    fn valid(&self, kk: usize, extent: usize, out_extent: usize) -> core::ops::Range<usize> {
        let lo = if kk >= self.pad { 0 } else { (self.pad - kk).div_ceil(self.stride) };
        // largest oh with oh*stride + kk - pad <= extent - 1
        let limit = extent + self.pad - 1;
        let hi = if limit < kk { 0 } else { ((limit - kk) / self.stride + 1).min(out_extent) };
        lo..hi.max(lo)
    }
}

fn conv_forward(g: &ConvGeometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.n * g.co * g.ho * g.wo];
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for co in 0..g.co {
            let o = &mut out[(n * g.co + co) * out_plane..][..out_plane];
            for ci in 0..g.ci {
                let xp = &x[(n * g.ci + ci) * in_plane..][..in_plane];
                for kh in 0..g.k {
                    let rows = g.valid(kh, g.h, g.ho);
                    for kw in 0..g.k {
                        let wv = w[((co * g.ci + ci) * g.k + kh) * g.k + kw];
                        let cols = g.valid(kw, g.w, g.wo);
                        for oh in rows.clone() {
                            let ih = oh * g.stride + kh - g.pad;
                            let orow = &mut o[oh * g.wo..][..g.wo];
                            let xrow = &xp[ih * g.w..][..g.w];
                            for ow in cols.clone() {
                                orow[ow] += wv * xrow[ow * g.stride + kw - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    needs: &[bool],
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut dx = needs[0].then(|| vec![0.0; x.len()]);
    let mut dw = needs[1].then(|| vec![0.0; w.len()]);
    let (in_plane, out_plane) = (g.h * g.w, g.ho * g.wo);
    for n in 0..g.n {
        for co in 0..g.co {
            let d = &dy[(n * g.co + co) * out_plane..][..out_plane];
            for ci in 0..g.ci {
                let base = (n * g.ci + ci) * in_plane;
                for kh in 0..g.k {
                    let rows = g.valid(kh, g.h, g.ho);
                    for kw in 0..g.k {
                        let widx = ((co * g.ci + ci) * g.k + kh) * g.k + kw;
                        let cols = g.valid(kw, g.w, g.wo);
                        let mut acc = 0.0;
                        for oh in rows.clone() {
                            let ih = oh * g.stride + kh - g.pad;
                            for ow in cols.clone() {
                                let iw = ow * g.stride + kw - g.pad;
                                let gv = d[oh * g.wo + ow];
                                let xi = base + ih * g.w + iw;
                                acc += gv * x[xi];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xi] += w[widx] * gv;
                                }
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for (kind, name) in KIND_NAMES {
            assert_eq!(name.parse::<OpKind>().unwrap(), kind);
            assert_eq!(kind.to_string(), name);
        }
        assert!(matches!("maxpool".parse::<OpKind>(), Err(Error::UnknownOp(_))));
    }

    #[test]
    fn valid_ranges_cover_padding() {
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        let g = ConvGeometry::new(&Op::Conv2d { stride: 2 }, &[&x, &w], 2).unwrap();
        assert_eq!((g.ho, g.wo), (3, 3));
        // kh = 0 needs ih = 2*oh - 1 >= 0
        assert_eq!(g.valid(0, 5, 3), 1..3);
        assert_eq!(g.valid(1, 5, 3), 0..3);
        assert_eq!(g.valid(2, 5, 3), 0..2);
    }
}

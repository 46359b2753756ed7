//! Minimal reverse-mode differentiation over a recorded op tape.
//!
//! Values are computed eagerly as ops are recorded; `backward` walks the tape
//! in reverse and accumulates exact gradients (up to floating point) for every
//! node. The op set is exactly what the denoiser and the codec need: 2-d
//! convolution, nearest-neighbour upsampling, channel concatenation, SiLU,
//! per-channel bias addition, a dense layer, and the two loss reductions.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::logistic;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// 3x3-style convolution: `x` is `[Ci,H,W]`, `w` is `[Co,Ci,K,K]`, `b` is `[Co]`.
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Upsample2x { x: Var },
    ConcatChannels { a: Var, b: Var },
    Silu { x: Var },
    /// Adds `bias[c]` to every site of channel `c`.
    AddChannelBias { x: Var, bias: Var },
    /// Dense layer: `w` is `[M,N]`, `x` is `[N]`, `b` is `[M]`.
    Linear { x: Var, w: Var, b: Var },
    MseMean { pred: Var, target: Tensor },
    /// Binary cross entropy on logits against 0/1 targets, mean reduction.
    BceLogitsMean { logits: Var, target: Tensor },
    AddScalars { a: Var, b: Var },
    ScaleScalar { a: Var, factor: f64 },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    op: Op,
}

/// Recorded computation graph for one loss evaluation.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass w.r.t. node `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
        )?;
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let [c, h, w] = dims3(xv)?;
        let mut out = Tensor::zeros(&[c, h * 2, w * 2]);
        {
            let src = xv.data();
            let dst = out.data_mut();
            for ci in 0..c {
                for y in 0..h {
                    for xx in 0..w {
                        let v = src[ci * h * w + y * w + xx];
                        let base = ci * 4 * h * w + 2 * y * 2 * w + 2 * xx;
                        dst[base] = v;
                        dst[base + 1] = v;
                        dst[base + 2 * w] = v;
                        dst[base + 2 * w + 1] = v;
                    }
                }
            }
        }
        Ok(self.push(out, Op::Upsample2x { x }))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let [ca, h, w] = dims3(av)?;
        let [cb, hb, wb] = dims3(bv)?;
        if h != hb || w != wb {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w],
                got: vec![hb, wb],
            });
        }
        let mut data = Vec::with_capacity((ca + cb) * h * w);
        data.extend_from_slice(av.data());
        data.extend_from_slice(bv.data());
        let out = Tensor::from_vec(&[ca + cb, h, w], data)?;
        Ok(self.push(out, Op::ConcatChannels { a, b }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * logistic(v));
        self.push(out, Op::Silu { x })
    }

    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let [c, h, w] = dims3(xv)?;
        if bv.shape() != [c] {
            return Err(Error::ShapeMismatch { expected: vec![c], got: bv.shape().to_vec() });
        }
        let mut out = xv.clone();
        {
            let dst = out.data_mut();
            for ci in 0..c {
                let bias_v = bv.data()[ci];
                for v in &mut dst[ci * h * w..(ci + 1) * h * w] {
                    *v += bias_v;
                }
            }
        }
        Ok(self.push(out, Op::AddChannelBias { x, bias }))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let (m, n) = match *wv.shape() {
            [m, n] => (m, n),
            _ => return Err(Error::InvalidArgument("linear weight must be 2-d")),
        };
        if xv.len() != n || bv.len() != m {
            return Err(Error::ShapeMismatch { expected: vec![m, n], got: xv.shape().to_vec() });
        }
        let mut out = Tensor::zeros(&[m]);
        {
            let dst = out.data_mut();
            for i in 0..m {
                let row = &wv.data()[i * n..(i + 1) * n];
                let mut acc = bv.data()[i];
                for (wv_i, xv_i) in row.iter().zip(xv.data()) {
                    acc += wv_i * xv_i;
                }
                dst[i] = acc;
            }
        }
        Ok(self.push(out, Op::Linear { x, w, b }))
    }

    /// Mean squared error against a constant target.
    pub fn mse_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        pv.expect_same_shape(target)?;
        let n = pv.len() as f64;
        let sum: f64 = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        Ok(self.push(
            Tensor::scalar(sum / n),
            Op::MseMean { pred, target: target.clone() },
        ))
    }

    /// Stable binary cross entropy on logits, mean over all elements.
    pub fn bce_logits_mean(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        #[allow(unused_imports)]
        use crate::math::F64Ext as _;
        let lv = self.value(logits);
        lv.expect_same_shape(target)?;
        let n = lv.len() as f64;
        let sum: f64 = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max_f(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        Ok(self.push(
            Tensor::scalar(sum / n),
            Op::BceLogitsMean { logits, target: target.clone() },
        ))
    }

    pub fn add_scalars(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != 1 || bv.len() != 1 {
            return Err(Error::InvalidArgument("add_scalars expects scalar nodes"));
        }
        let out = Tensor::scalar(av.data()[0] + bv.data()[0]);
        Ok(self.push(out, Op::AddScalars { a, b }))
    }

    pub fn scale_scalar(&mut self, a: Var, factor: f64) -> Result<Var> {
        if self.value(a).len() != 1 {
            return Err(Error::InvalidArgument("scale_scalar expects a scalar node"));
        }
        let out = Tensor::scalar(self.value(a).data()[0] * factor);
        Ok(self.push(out, Op::ScaleScalar { a, factor }))
    }

    /// Runs reverse-mode accumulation from the scalar `loss` node. Each
    /// recorded graph supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::InvalidArgument("backward requires a scalar loss"));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let gout = self.nodes[i].grad.as_ref().expect("grad present").clone();
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (dx, dw, db) = conv2d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        &gout,
                        self.nodes[i].value.shape(),
                        stride,
                        pad,
                    );
                    self.accumulate(x, &dx);
                    self.accumulate(w, &dw);
                    self.accumulate(b, &db);
                }
                Op::Upsample2x { x } => {
                    let [c, h, w] = dims3(&self.nodes[x.0].value).expect("checked at record");
                    let mut dx = vec![0.0; c * h * w];
                    for ci in 0..c {
                        for y in 0..h {
                            for xx in 0..w {
                                let base = ci * 4 * h * w + 2 * y * 2 * w + 2 * xx;
                                dx[ci * h * w + y * w + xx] = gout[base]
                                    + gout[base + 1]
                                    + gout[base + 2 * w]
                                    + gout[base + 2 * w + 1];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatChannels { a, b } => {
                    let na = self.nodes[a.0].value.len();
                    self.accumulate(a, &gout[..na]);
                    self.accumulate(b, &gout[na..]);
                }
                Op::Silu { x } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .zip(&gout)
                        .map(|(&v, g)| {
                            let s = logistic(v);
                            g * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::AddChannelBias { x, bias } => {
                    let [c, h, w] = dims3(&self.nodes[x.0].value).expect("checked at record");
                    let mut dbias = vec![0.0; c];
                    for ci in 0..c {
                        dbias[ci] = gout[ci * h * w..(ci + 1) * h * w].iter().sum();
                    }
                    self.accumulate(x, &gout);
                    self.accumulate(bias, &dbias);
                }
                Op::Linear { x, w, b } => {
                    let n = self.nodes[x.0].value.len();
                    let m = self.nodes[b.0].value.len();
                    let mut dx = vec![0.0; n];
                    let mut dw = vec![0.0; m * n];
                    let wdata = self.nodes[w.0].value.data();
                    let xdata = self.nodes[x.0].value.data();
                    for i_m in 0..m {
                        let g = gout[i_m];
                        let row = &wdata[i_m * n..(i_m + 1) * n];
                        for j in 0..n {
                            dx[j] += g * row[j];
                            dw[i_m * n + j] += g * xdata[j];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(w, &dw);
                    self.accumulate(b, &gout);
                }
                Op::MseMean { pred, target } => {
                    let g = gout[0];
                    let n = target.len() as f64;
                    let dp: Vec<f64> = self.nodes[pred.0]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(p, t)| g * 2.0 * (p - t) / n)
                        .collect();
                    self.accumulate(pred, &dp);
                }
                Op::BceLogitsMean { logits, target } => {
                    let g = gout[0];
                    let n = target.len() as f64;
                    let dl: Vec<f64> = self.nodes[logits.0]
                        .value
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&x, &y)| g * (logistic(x) - y) / n)
                        .collect();
                    self.accumulate(logits, &dl);
                }
                Op::AddScalars { a, b } => {
                    self.accumulate(a, &gout);
                    self.accumulate(b, &gout);
                }
                Op::ScaleScalar { a, factor } => {
                    self.accumulate(a, &[gout[0] * factor]);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.value.len()]);
        debug_assert_eq!(grad.len(), delta.len());
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }
}

/// Output-column range for which `ox * stride + kx - pad` lands in `[0, iw)`.
fn conv_x_range(iw: usize, ow: usize, stride: usize, pad: usize, kx: usize) -> (usize, usize) {
    let lo_num = pad as i64 - kx as i64;
    let lo = if lo_num <= 0 { 0 } else { ((lo_num + stride as i64 - 1) / stride as i64) as usize };
    let hi_num = iw as i64 - 1 + pad as i64 - kx as i64;
    let hi_excl = if hi_num < 0 { 0 } else { ((hi_num / stride as i64) as usize + 1).min(ow) };
    (lo, hi_excl.max(lo))
}

fn dims3(t: &Tensor) -> Result<[usize; 3]> {
    match *t.shape() {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(Error::InvalidArgument("expected a CxHxW tensor")),
    }
}

fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [ci, h, iw] = dims3(x)?;
    let (co, wci, k) = match *w.shape() {
        [co, wci, kh, kw] if kh == kw => (co, wci, kh),
        _ => return Err(Error::InvalidArgument("conv weight must be [Co,Ci,K,K]")),
    };
    if wci != ci {
        return Err(Error::ShapeMismatch { expected: vec![ci], got: vec![wci] });
    }
    if b.shape() != [co] {
        return Err(Error::ShapeMismatch { expected: vec![co], got: b.shape().to_vec() });
    }
    if h + 2 * pad < k || iw + 2 * pad < k {
        return Err(Error::InvalidArgument("conv input smaller than kernel"));
    }
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (iw + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    let xd = x.data();
    let wd = w.data();
    let od = out.data_mut();
    for c_out in 0..co {
        let bias = b.data()[c_out];
        let out_c = &mut od[c_out * oh * ow..(c_out + 1) * oh * ow];
        for v in out_c.iter_mut() {
            *v = bias;
        }
        for c_in in 0..ci {
            let x_c = &xd[c_in * h * iw..(c_in + 1) * h * iw];
            let w_base = (c_out * ci + c_in) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[w_base + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (ox_lo, ox_hi_excl) = conv_x_range(iw, ow, stride, pad, kx);
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let x_row = &x_c[(iy - pad) * iw..(iy - pad + 1) * iw];
                        let o_row = &mut out_c[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi_excl {
                            o_row[ox] += wv * x_row[ox * stride + kx - pad];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &[f64],
    out_shape: &[usize],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let [ci, h, iw] = dims3(x).expect("validated at record time");
    let (co, _, k) = match *w.shape() {
        [co, wci, kh, _] => (co, wci, kh),
        _ => unreachable!("validated at record time"),
    };
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let xd = x.data();
    let wd = w.data();
    let mut dx = vec![0.0; ci * h * iw];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; co];
    for c_out in 0..co {
        let g_c = &gout[c_out * oh * ow..(c_out + 1) * oh * ow];
        db[c_out] = g_c.iter().sum();
        for c_in in 0..ci {
            let x_c = &xd[c_in * h * iw..(c_in + 1) * h * iw];
            let dx_c = &mut dx[c_in * h * iw..(c_in + 1) * h * iw];
            let w_base = (c_out * ci + c_in) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wd[w_base + ky * k + kx];
                    let mut dwv = 0.0;
                    let (ox_lo, ox_hi_excl) = conv_x_range(iw, ow, stride, pad, kx);
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let row_off = (iy - pad) * iw;
                        let g_row = &g_c[oy * ow..(oy + 1) * ow];
                        for ox in ox_lo..ox_hi_excl {
                            let ix = ox * stride + kx - pad;
                            let g = g_row[ox];
                            dwv += g * x_c[row_off + ix];
                            dx_c[row_off + ix] += g * wv;
                        }
                    }
                    dw[w_base + ky * k + kx] += dwv;
                }
            }
        }
    }
    (dx, dw, db)
}

//! Tensor operations and their backward rules.
//!
//! Every op asserts shapes up front and panics with the op name and both
//! shapes on mismatch. Elementwise binary ops require identical shapes;
//! scalar variants are separate ops. An op records a graph node only when at
//! least one input requires a gradient.

use super::{numel, Tensor};

#[derive(Debug)]
pub enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Div(Tensor, Tensor),
    /// a * x + b (b is constant, not needed in backward).
    Affine { x: Tensor, a: f64 },
    Exp(Tensor),
    Ln(Tensor),
    Sqrt(Tensor),
    Sigmoid(Tensor),
    Gelu(Tensor),
    Relu(Tensor),
    PowScalar { x: Tensor, p: f64 },
    ClampMin { x: Tensor, lo: f64 },
    Matmul { a: Tensor, b: Tensor },
    Transpose(Tensor),
    Reshape(Tensor),
    Concat { parts: Vec<Tensor>, axis: usize },
    Narrow { x: Tensor, axis: usize, start: usize },
    Gather { x: Tensor, axis: usize, indices: Vec<usize> },
    TakeFlat { x: Tensor, indices: Vec<usize> },
    MaskedFill { x: Tensor, mask: Vec<bool> },
    Softmax { x: Tensor, axis: usize },
    LayerNorm { x: Tensor, scale: Tensor, shift: Tensor, eps: f64 },
    Sum { x: Tensor, axis: Option<usize> },
    Mean { x: Tensor, axis: Option<usize> },
    Conv2d { x: Tensor, w: Tensor, b: Option<Tensor>, stride: usize, pad: usize },
    Bilinear { x: Tensor },
}

/// (product of dims before axis, axis length, product of dims after axis)
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for shape {shape:?}");
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert_eq!(
        a.shape(),
        b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Affine { .. } => "affine",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Sigmoid(..) => "sigmoid",
            Op::Gelu(..) => "gelu",
            Op::Relu(..) => "relu",
            Op::PowScalar { .. } => "pow_scalar",
            Op::ClampMin { .. } => "clamp_min",
            Op::Matmul { .. } => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Gather { .. } => "gather",
            Op::TakeFlat { .. } => "take_flat",
            Op::MaskedFill { .. } => "masked_fill",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::Bilinear { .. } => "bilinear_resize",
        }
    }

    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::Matmul { a, b } => {
                vec![a, b]
            }
            Op::Affine { x, .. }
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Sqrt(x)
            | Op::Sigmoid(x)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::PowScalar { x, .. }
            | Op::ClampMin { x, .. }
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Narrow { x, .. }
            | Op::Gather { x, .. }
            | Op::TakeFlat { x, .. }
            | Op::MaskedFill { x, .. }
            | Op::Softmax { x, .. }
            | Op::Sum { x, .. }
            | Op::Mean { x, .. }
            | Op::Bilinear { x } => vec![x],
            Op::Concat { parts, .. } => parts.iter().collect(),
            Op::LayerNorm { x, scale, shift, .. } => vec![x, scale, shift],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                if let Some(b) = b {
                    v.push(b);
                }
                v
            }
        }
    }

    pub(crate) fn backward(&self, out_shape: &[usize], out: &[f64], g: &[f64]) {
        match self {
            Op::Add(a, b) => {
                a.accumulate_grad(g);
                b.accumulate_grad(g);
            }
            Op::Sub(a, b) => {
                a.accumulate_grad(g);
                b.accumulate_grad(&g.iter().map(|v| -v).collect::<Vec<_>>());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.inner.data.borrow();
                    a.accumulate_grad(&g.iter().zip(bd.iter()).map(|(g, b)| g * b).collect::<Vec<_>>());
                }
                if b.requires_grad() {
                    let ad = a.inner.data.borrow();
                    b.accumulate_grad(&g.iter().zip(ad.iter()).map(|(g, a)| g * a).collect::<Vec<_>>());
                }
            }
            Op::Div(a, b) => {
                let bd = b.inner.data.borrow();
                if a.requires_grad() {
                    a.accumulate_grad(&g.iter().zip(bd.iter()).map(|(g, b)| g / b).collect::<Vec<_>>());
                }
                if b.requires_grad() {
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(out.iter())
                        .zip(bd.iter())
                        .map(|((g, o), b)| -g * o / b)
                        .collect();
                    b.accumulate_grad(&gb);
                }
            }
            Op::Affine { x, a } => {
                x.accumulate_grad(&g.iter().map(|v| v * a).collect::<Vec<_>>());
            }
            Op::Exp(x) => {
                x.accumulate_grad(&g.iter().zip(out.iter()).map(|(g, o)| g * o).collect::<Vec<_>>());
            }
            Op::Ln(x) => {
                let xd = x.inner.data.borrow();
                x.accumulate_grad(&g.iter().zip(xd.iter()).map(|(g, x)| g / x).collect::<Vec<_>>());
            }
            Op::Sqrt(x) => {
                x.accumulate_grad(
                    &g.iter().zip(out.iter()).map(|(g, o)| g * 0.5 / o).collect::<Vec<_>>(),
                );
            }
            Op::Sigmoid(x) => {
                x.accumulate_grad(
                    &g.iter().zip(out.iter()).map(|(g, s)| g * s * (1.0 - s)).collect::<Vec<_>>(),
                );
            }
            Op::Gelu(x) => {
                let xd = x.inner.data.borrow();
                let gx: Vec<f64> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(g, &x)| {
                        let c = 0.797_884_560_802_865_4_f64; // sqrt(2/pi)
                        let a = 0.044715_f64;
                        let t = (c * (x + a * x * x * x)).tanh();
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x))
                    })
                    .collect();
                x.accumulate_grad(&gx);
            }
            Op::Relu(x) => {
                let xd = x.inner.data.borrow();
                x.accumulate_grad(
                    &g.iter()
                        .zip(xd.iter())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect::<Vec<_>>(),
                );
            }
            Op::PowScalar { x, p } => {
                let xd = x.inner.data.borrow();
                x.accumulate_grad(
                    &g.iter()
                        .zip(xd.iter())
                        .map(|(g, &x)| g * p * x.powf(p - 1.0))
                        .collect::<Vec<_>>(),
                );
            }
            Op::ClampMin { x, lo } => {
                let xd = x.inner.data.borrow();
                x.accumulate_grad(
                    &g.iter()
                        .zip(xd.iter())
                        .map(|(g, &x)| if x > *lo { *g } else { 0.0 })
                        .collect::<Vec<_>>(),
                );
            }
            Op::Matmul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad() {
                    let bd = b.inner.data.borrow();
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            for kk in 0..k {
                                ga[i * k + kk] += gv * bd[kk * n + j];
                            }
                        }
                    }
                    a.accumulate_grad(&ga);
                }
                if b.requires_grad() {
                    let ad = a.inner.data.borrow();
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for kk in 0..k {
                            let av = ad[i * k + kk];
                            for j in 0..n {
                                gb[kk * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    b.accumulate_grad(&gb);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out_shape[0], out_shape[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[j * r + i] = g[i * c + j];
                    }
                }
                x.accumulate_grad(&gx);
            }
            Op::Reshape(x) => {
                x.accumulate_grad(g);
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let len = p.shape()[*axis];
                    if p.requires_grad() {
                        let mut gp = vec![0.0; p.numel()];
                        for o in 0..outer {
                            for t in 0..len {
                                let src = (o * total + offset + t) * inner;
                                let dst = (o * len + t) * inner;
                                gp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        p.accumulate_grad(&gp);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let full = x.shape()[*axis];
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for t in 0..len {
                        let src = (o * len + t) * inner;
                        let dst = (o * full + start + t) * inner;
                        gx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                x.accumulate_grad(&gx);
            }
            Op::Gather { x, axis, indices } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let full = x.shape()[*axis];
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    for (t, &idx) in indices.iter().enumerate() {
                        let src = (o * len + t) * inner;
                        let dst = (o * full + idx) * inner;
                        for i in 0..inner {
                            gx[dst + i] += g[src + i];
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }
            Op::TakeFlat { x, indices } => {
                let mut gx = vec![0.0; x.numel()];
                for (t, &idx) in indices.iter().enumerate() {
                    gx[idx] += g[t];
                }
                x.accumulate_grad(&gx);
            }
            Op::MaskedFill { x, mask } => {
                x.accumulate_grad(
                    &g.iter()
                        .zip(mask.iter())
                        .map(|(g, &m)| if m { 0.0 } else { *g })
                        .collect::<Vec<_>>(),
                );
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(out_shape, *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + i;
                        let dot: f64 = (0..len).map(|t| g[at(t)] * out[at(t)]).sum();
                        for t in 0..len {
                            gx[at(t)] = out[at(t)] * (g[at(t)] - dot);
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }
            Op::LayerNorm { x, scale, shift, eps } => {
                let f = *out_shape.last().unwrap();
                let rows = out.len() / f;
                let xd = x.inner.data.borrow();
                let sd = scale.inner.data.borrow();
                let mut gx = vec![0.0; out.len()];
                let mut gscale = vec![0.0; f];
                let mut gshift = vec![0.0; f];
                for r in 0..rows {
                    let row = &xd[r * f..(r + 1) * f];
                    let grow = &g[r * f..(r + 1) * f];
                    let mu = row.iter().sum::<f64>() / f as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for i in 0..f {
                        let xhat = (row[i] - mu) * inv;
                        let gy = grow[i] * sd[i];
                        m1 += gy;
                        m2 += gy * xhat;
                        gscale[i] += grow[i] * xhat;
                        gshift[i] += grow[i];
                    }
                    m1 /= f as f64;
                    m2 /= f as f64;
                    for i in 0..f {
                        let xhat = (row[i] - mu) * inv;
                        let gy = grow[i] * sd[i];
                        gx[r * f + i] = inv * (gy - m1 - xhat * m2);
                    }
                }
                drop(xd);
                x.accumulate_grad(&gx);
                scale.accumulate_grad(&gscale);
                shift.accumulate_grad(&gshift);
            }
            Op::Sum { x, axis } => match axis {
                None => x.accumulate_grad(&vec![g[0]; x.numel()]),
                Some(ax) => {
                    let (outer, len, inner) = split_axis(x.shape(), *ax);
                    let mut gx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for t in 0..len {
                            let dst = (o * len + t) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                gx[dst + i] = g[src + i];
                            }
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            },
            Op::Mean { x, axis } => match axis {
                None => {
                    let s = g[0] / x.numel() as f64;
                    x.accumulate_grad(&vec![s; x.numel()]);
                }
                Some(ax) => {
                    let (outer, len, inner) = split_axis(x.shape(), *ax);
                    let scale = 1.0 / len as f64;
                    let mut gx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for t in 0..len {
                            let dst = (o * len + t) * inner;
                            let src = o * inner;
                            for i in 0..inner {
                                gx[dst + i] = g[src + i] * scale;
                            }
                        }
                    }
                    x.accumulate_grad(&gx);
                }
            },
            Op::Conv2d { x, w, b, stride, pad } => {
                let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (c_out, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (oh, ow) = (out_shape[1], out_shape[2]);
                let xd = x.inner.data.borrow();
                let wdat = w.inner.data.borrow();
                let mut gx = vec![0.0; x.numel()];
                let mut gw = vec![0.0; w.numel()];
                let mut gb = vec![0.0; c_out];
                for o in 0..c_out {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(o * oh + oy) * ow + ox];
                            gb[o] += gv;
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - *pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - *pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (c * h + iy as usize) * wd + ix as usize;
                                        let wi = ((o * c_in + c) * kh + ky) * kw + kx;
                                        gx[xi] += wdat[wi] * gv;
                                        gw[wi] += xd[xi] * gv;
                                    }
                                }
                            }
                        }
                    }
                }
                drop(xd);
                drop(wdat);
                x.accumulate_grad(&gx);
                w.accumulate_grad(&gw);
                if let Some(b) = b {
                    b.accumulate_grad(&gb);
                }
            }
            Op::Bilinear { x } => {
                let rank = x.shape().len();
                let (h, w) = (x.shape()[rank - 2], x.shape()[rank - 1]);
                let (oh, ow) = (out_shape[rank - 2], out_shape[rank - 1]);
                let batch = x.numel() / (h * w);
                let mut gx = vec![0.0; x.numel()];
                for bi in 0..batch {
                    let src = bi * h * w;
                    let dst = bi * oh * ow;
                    for oy in 0..oh {
                        let (y0, y1, fy) = sample_coord(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1, fx) = sample_coord(ox, ow, w);
                            let gv = g[dst + oy * ow + ox];
                            gx[src + y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            gx[src + y0 * w + x1] += gv * (1.0 - fy) * fx;
                            gx[src + y1 * w + x0] += gv * fy * (1.0 - fx);
                            gx[src + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                x.accumulate_grad(&gx);
            }
        }
    }
}

/// Half-pixel source sampling for bilinear resize: returns the two clamped
/// source indices and the fractional weight of the second one.
fn sample_coord(out_i: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let s = (out_i as f64 + 0.5) * (in_len as f64 / out_len as f64) - 0.5;
    let floor = s.floor();
    let frac = s - floor;
    let i0 = (floor as isize).clamp(0, in_len as isize - 1) as usize;
    let i1 = (floor as isize + 1).clamp(0, in_len as isize - 1) as usize;
    (i0, i1, frac)
}

impl Tensor {
    fn unary(&self, data: Vec<f64>, mk: impl FnOnce(Tensor) -> Op) -> Tensor {
        let rg = self.requires_grad();
        Tensor::make(data, self.shape().to_vec(), rg, rg.then(|| mk(self.clone())))
    }

    fn binary(&self, other: &Tensor, data: Vec<f64>, mk: impl FnOnce(Tensor, Tensor) -> Op) -> Tensor {
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::make(
            data,
            self.shape().to_vec(),
            rg,
            rg.then(|| mk(self.clone(), other.clone())),
        )
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        assert_same_shape("add", self, other);
        let d = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(a, b)| a + b).collect()));
        self.binary(other, d, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        assert_same_shape("sub", self, other);
        let d = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(a, b)| a - b).collect()));
        self.binary(other, d, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        assert_same_shape("mul", self, other);
        let d = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(a, b)| a * b).collect()));
        self.binary(other, d, Op::Mul)
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        assert_same_shape("div", self, other);
        let d = self.with_data(|a| other.with_data(|b| a.iter().zip(b).map(|(a, b)| a / b).collect()));
        self.binary(other, d, Op::Div)
    }

    /// a * x + b elementwise with scalar constants.
    pub fn affine(&self, a: f64, b: f64) -> Tensor {
        let d = self.with_data(|x| x.iter().map(|v| a * v + b).collect());
        self.unary(d, |x| Op::Affine { x, a })
    }

    pub fn add_scalar(&self, b: f64) -> Tensor {
        self.affine(1.0, b)
    }

    pub fn mul_scalar(&self, a: f64) -> Tensor {
        self.affine(a, 0.0)
    }

    pub fn neg(&self) -> Tensor {
        self.affine(-1.0, 0.0)
    }

    /// c - x elementwise.
    pub fn rsub_scalar(&self, c: f64) -> Tensor {
        self.affine(-1.0, c)
    }

    pub fn exp(&self) -> Tensor {
        let d = self.with_data(|x| x.iter().map(|v| v.exp()).collect());
        self.unary(d, Op::Exp)
    }

    pub fn ln(&self) -> Tensor {
        let d = self.with_data(|x| x.iter().map(|v| v.ln()).collect());
        self.unary(d, Op::Ln)
    }

    pub fn sqrt(&self) -> Tensor {
        let d = self.with_data(|x| x.iter().map(|v| v.sqrt()).collect());
        self.unary(d, Op::Sqrt)
    }

    pub fn sigmoid(&self) -> Tensor {
        let d = self.with_data(|x| {
            x.iter()
                .map(|&v| {
                    if v >= 0.0 {
                        1.0 / (1.0 + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (1.0 + e)
                    }
                })
                .collect()
        });
        self.unary(d, Op::Sigmoid)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let c = 0.797_884_560_802_865_4_f64;
        let a = 0.044715_f64;
        let d = self.with_data(|x| {
            x.iter().map(|&v| 0.5 * v * (1.0 + (c * (v + a * v * v * v)).tanh())).collect()
        });
        self.unary(d, Op::Gelu)
    }

    pub fn relu(&self) -> Tensor {
        let d = self.with_data(|x| x.iter().map(|&v| v.max(0.0)).collect());
        self.unary(d, Op::Relu)
    }

    pub fn pow_scalar(&self, p: f64) -> Tensor {
        let d = self.with_data(|x| x.iter().map(|v| v.powf(p)).collect());
        self.unary(d, |x| Op::PowScalar { x, p })
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        let d = self.with_data(|x| x.iter().map(|&v| v.max(lo)).collect());
        self.unary(d, |x| Op::ClampMin { x, lo })
    }

    /// 2D matrix product [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert!(
            self.shape().len() == 2 && other.shape().len() == 2 && self.shape()[1] == other.shape()[0],
            "matmul: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut out = vec![0.0; m * n];
        self.with_data(|a| {
            other.with_data(|b| {
                for i in 0..m {
                    for kk in 0..k {
                        let av = a[i * k + kk];
                        let brow = &b[kk * n..(kk + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += av * brow[j];
                        }
                    }
                }
            })
        });
        let rg = self.requires_grad() || other.requires_grad();
        Tensor::make(out, vec![m, n], rg, rg.then(|| Op::Matmul { a: self.clone(), b: other.clone() }))
    }

    /// 2D transpose.
    pub fn t(&self) -> Tensor {
        assert_eq!(self.shape().len(), 2, "transpose: expected 2D, got {:?}", self.shape());
        let (m, n) = (self.shape()[0], self.shape()[1]);
        let mut out = vec![0.0; m * n];
        self.with_data(|x| {
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = x[i * n + j];
                }
            }
        });
        let rg = self.requires_grad();
        Tensor::make(out, vec![n, m], rg, rg.then(|| Op::Transpose(self.clone())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        assert_eq!(
            self.numel(),
            numel(shape),
            "reshape: cannot reshape {:?} to {:?}",
            self.shape(),
            shape
        );
        let rg = self.requires_grad();
        Tensor::make(self.value(), shape.to_vec(), rg, rg.then(|| Op::Reshape(self.clone())))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat: no inputs");
        let rank = parts[0].shape().len();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = 0;
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat: rank mismatch {:?} vs {:?}", parts[0].shape(), p.shape());
            for (d, (&a, &b)) in parts[0].shape().iter().zip(p.shape()).enumerate() {
                assert!(
                    d == axis || a == b,
                    "concat: shape mismatch {:?} vs {:?} (axis {axis})",
                    parts[0].shape(),
                    p.shape()
                );
            }
            out_shape[axis] += p.shape()[axis];
        }
        let (outer, total, inner) = split_axis(&out_shape, axis);
        let mut out = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            p.with_data(|d| {
                for o in 0..outer {
                    for t in 0..len {
                        let src = (o * len + t) * inner;
                        let dst = (o * total + offset + t) * inner;
                        out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                    }
                }
            });
            offset += len;
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        Tensor::make(
            out,
            out_shape,
            rg,
            rg.then(|| Op::Concat { parts: parts.iter().map(|p| (*p).clone()).collect(), axis }),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, full, inner) = split_axis(self.shape(), axis);
        assert!(
            start + len <= full,
            "narrow: range {start}..{} out of bounds for axis {axis} of {:?}",
            start + len,
            self.shape()
        );
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        self.with_data(|d| {
            for o in 0..outer {
                for t in 0..len {
                    let src = (o * full + start + t) * inner;
                    let dst = (o * len + t) * inner;
                    out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                }
            }
        });
        let rg = self.requires_grad();
        Tensor::make(out, out_shape, rg, rg.then(|| Op::Narrow { x: self.clone(), axis, start }))
    }

    /// Select indices along an axis; duplicates allowed (gradients add).
    pub fn gather(&self, axis: usize, indices: &[usize]) -> Tensor {
        let (outer, full, inner) = split_axis(self.shape(), axis);
        for &i in indices {
            assert!(i < full, "gather: index {i} out of bounds for axis {axis} of {:?}", self.shape());
        }
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = indices.len();
        let len = indices.len();
        let mut out = vec![0.0; outer * len * inner];
        self.with_data(|d| {
            for o in 0..outer {
                for (t, &idx) in indices.iter().enumerate() {
                    let src = (o * full + idx) * inner;
                    let dst = (o * len + t) * inner;
                    out[dst..dst + inner].copy_from_slice(&d[src..src + inner]);
                }
            }
        });
        let rg = self.requires_grad();
        Tensor::make(
            out,
            out_shape,
            rg,
            rg.then(|| Op::Gather { x: self.clone(), axis, indices: indices.to_vec() }),
        )
    }

    /// Select flat indices into a 1D result; duplicates allowed.
    pub fn take_flat(&self, indices: &[usize]) -> Tensor {
        let n = self.numel();
        for &i in indices {
            assert!(i < n, "take_flat: index {i} out of bounds for {:?}", self.shape());
        }
        let out = self.with_data(|d| indices.iter().map(|&i| d[i]).collect::<Vec<_>>());
        let rg = self.requires_grad();
        Tensor::make(
            out,
            vec![indices.len()],
            rg,
            rg.then(|| Op::TakeFlat { x: self.clone(), indices: indices.to_vec() }),
        )
    }

    /// Replace elements where mask is true with a constant.
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Tensor {
        assert_eq!(
            mask.len(),
            self.numel(),
            "masked_fill: mask length {} vs shape {:?}",
            mask.len(),
            self.shape()
        );
        let d = self.with_data(|x| {
            x.iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect()
        });
        let rg = self.requires_grad();
        Tensor::make(
            d,
            self.shape().to_vec(),
            rg,
            rg.then(|| Op::MaskedFill { x: self.clone(), mask: mask.to_vec() }),
        )
    }

    /// Numerically stable softmax along an axis (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Tensor {
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let mut out = vec![0.0; self.numel()];
        self.with_data(|d| {
            for o in 0..outer {
                for i in 0..inner {
                    let at = |t: usize| (o * len + t) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for t in 0..len {
                        mx = mx.max(d[at(t)]);
                    }
                    let mut sum = 0.0;
                    for t in 0..len {
                        let e = (d[at(t)] - mx).exp();
                        out[at(t)] = e;
                        sum += e;
                    }
                    for t in 0..len {
                        out[at(t)] /= sum;
                    }
                }
            }
        });
        let rg = self.requires_grad();
        Tensor::make(
            out,
            self.shape().to_vec(),
            rg,
            rg.then(|| Op::Softmax { x: self.clone(), axis }),
        )
    }

    /// Layer normalization over the last dimension with learned scale/shift.
    pub fn layernorm(&self, scale: &Tensor, shift: &Tensor, eps: f64) -> Tensor {
        let f = *self.shape().last().expect("layernorm: scalar input");
        assert_eq!(
            scale.shape(),
            &[f],
            "layernorm: scale shape {:?} vs features {:?}",
            scale.shape(),
            &[f]
        );
        assert_eq!(
            shift.shape(),
            &[f],
            "layernorm: shift shape {:?} vs features {:?}",
            shift.shape(),
            &[f]
        );
        let rows = self.numel() / f;
        let mut out = vec![0.0; self.numel()];
        self.with_data(|x| {
            scale.with_data(|s| {
                shift.with_data(|b| {
                    for r in 0..rows {
                        let row = &x[r * f..(r + 1) * f];
                        let mu = row.iter().sum::<f64>() / f as f64;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / f as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        for i in 0..f {
                            out[r * f + i] = (row[i] - mu) * inv * s[i] + b[i];
                        }
                    }
                })
            })
        });
        let rg = self.requires_grad() || scale.requires_grad() || shift.requires_grad();
        Tensor::make(
            out,
            self.shape().to_vec(),
            rg,
            rg.then(|| Op::LayerNorm {
                x: self.clone(),
                scale: scale.clone(),
                shift: shift.clone(),
                eps,
            }),
        )
    }

    /// Sum over one axis (dropping it) or all elements (None -> scalar).
    pub fn sum(&self, axis: Option<usize>) -> Tensor {
        let (out_shape, out) = self.reduce(axis, false);
        let rg = self.requires_grad();
        Tensor::make(out, out_shape, rg, rg.then(|| Op::Sum { x: self.clone(), axis }))
    }

    /// Mean over one axis (dropping it) or all elements (None -> scalar).
    pub fn mean(&self, axis: Option<usize>) -> Tensor {
        let (out_shape, out) = self.reduce(axis, true);
        let rg = self.requires_grad();
        Tensor::make(out, out_shape, rg, rg.then(|| Op::Mean { x: self.clone(), axis }))
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> (Vec<usize>, Vec<f64>) {
        match axis {
            None => {
                let mut s = self.with_data(|d| d.iter().sum::<f64>());
                if mean {
                    s /= self.numel() as f64;
                }
                (vec![], vec![s])
            }
            Some(ax) => {
                let (outer, len, inner) = split_axis(self.shape(), ax);
                let mut out_shape = self.shape().to_vec();
                out_shape.remove(ax);
                let mut out = vec![0.0; outer * inner];
                self.with_data(|d| {
                    for o in 0..outer {
                        for t in 0..len {
                            let src = (o * len + t) * inner;
                            for i in 0..inner {
                                out[o * inner + i] += d[src + i];
                            }
                        }
                    }
                });
                if mean {
                    for v in &mut out {
                        *v /= len as f64;
                    }
                }
                (out_shape, out)
            }
        }
    }

    /// 2D convolution: input [C,H,W], weight [O,C,kh,kw], optional bias [O].
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Tensor {
        assert!(
            self.shape().len() == 3 && weight.shape().len() == 4 && self.shape()[0] == weight.shape()[1],
            "conv2d: shape mismatch {:?} vs {:?}",
            self.shape(),
            weight.shape()
        );
        assert!(stride > 0, "conv2d: stride 0");
        let (c_in, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (c_out, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
        if let Some(b) = bias {
            assert_eq!(
                b.shape(),
                &[c_out],
                "conv2d: bias shape {:?} vs output channels {:?}",
                b.shape(),
                &[c_out]
            );
        }
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel {:?} larger than padded input {:?}",
            weight.shape(),
            self.shape()
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; c_out * oh * ow];
        self.with_data(|x| {
            weight.with_data(|wt| {
                for o in 0..c_out {
                    let base = if let Some(b) = bias { b.with_data(|bd| bd[o]) } else { 0.0 };
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = base;
                            for c in 0..c_in {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        acc += x[(c * h + iy as usize) * w + ix as usize]
                                            * wt[((o * c_in + c) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                            out[(o * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            })
        });
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.map(|b| b.requires_grad()).unwrap_or(false);
        Tensor::make(
            out,
            vec![c_out, oh, ow],
            rg,
            rg.then(|| Op::Conv2d {
                x: self.clone(),
                w: weight.clone(),
                b: bias.cloned(),
                stride,
                pad,
            }),
        )
    }

    /// Bilinear resize of the last two dims (half-pixel, border-clamped).
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Tensor {
        let rank = self.shape().len();
        assert!(rank >= 2, "bilinear_resize: rank {rank} input {:?}", self.shape());
        assert!(oh > 0 && ow > 0, "bilinear_resize: empty target {oh}x{ow}");
        let (h, w) = (self.shape()[rank - 2], self.shape()[rank - 1]);
        let batch = self.numel() / (h * w);
        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        let mut out = vec![0.0; batch * oh * ow];
        self.with_data(|d| {
            for bi in 0..batch {
                let src = bi * h * w;
                let dst = bi * oh * ow;
                for oy in 0..oh {
                    let (y0, y1, fy) = sample_coord(oy, oh, h);
                    for ox in 0..ow {
                        let (x0, x1, fx) = sample_coord(ox, ow, w);
                        out[dst + oy * ow + ox] = (1.0 - fy) * (1.0 - fx) * d[src + y0 * w + x0]
                            + (1.0 - fy) * fx * d[src + y0 * w + x1]
                            + fy * (1.0 - fx) * d[src + y1 * w + x0]
                            + fy * fx * d[src + y1 * w + x1];
                    }
                }
            }
        });
        let rg = self.requires_grad();
        Tensor::make(out, out_shape, rg, rg.then(|| Op::Bilinear { x: self.clone() }))
    }
}

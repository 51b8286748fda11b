//! Built-in differentiable operations.
//!
//! No broadcasting beyond bias-add and scalar ops. All reductions run in
//! row-major order so repeated runs give bit-identical results.

use std::rc::Rc;

use super::tape::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl Conv2dGeom {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let [batch, c_in, h, w] = *input else {
            return Err(Error::config(format!("conv2d input must be 4-D, got {input:?}")));
        };
        let [c_out, wc_in, k, k2] = *weight else {
            return Err(Error::config(format!("conv2d weight must be 4-D, got {weight:?}")));
        };
        if wc_in != c_in || k != k2 {
            return Err(Error::config(format!(
                "conv2d weight {weight:?} incompatible with input {input:?}"
            )));
        }
        let h_out = conv_out_size(h, k, stride, padding)?;
        let w_out = conv_out_size(w, k, stride, padding)?;
        Ok(Conv2dGeom {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output extent of a convolution or pooling window; errors when not integral.
pub fn conv_out_size(size: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || k == 0 {
        return Err(Error::config("kernel and stride must be positive"));
    }
    let padded = size + 2 * padding;
    if k > padded {
        return Err(Error::config(format!(
            "window {k} larger than padded input {padded}"
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::config(format!(
            "non-integral output size: ({size} + 2*{padding} - {k}) / {stride}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn im2col(x: &[f32], g: &Conv2dGeom, cols: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    let n = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ky) as isize - p;
                    for ox in 0..g.w_out {
                        let ix = (ox * s + kx) as isize - p;
                        dst[oy * g.w_out + ox] =
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                x[(c * g.h + iy as usize) * g.w + ix as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &Conv2dGeom, dx: &mut [f32]) {
    let (k, s, p) = (g.k, g.stride, g.padding as isize);
    let n = g.col_cols();
    for c in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.w_out {
                        let ix = (ox * s + kx) as isize - p;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        dx[(c * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.w_out + ox];
                    }
                }
            }
        }
    }
}

fn unary(
    tape: &mut Tape,
    op: &'static str,
    x: NodeId,
    value: Tensor,
    rule: impl Fn(&Tensor) -> Tensor + 'static,
) -> Result<NodeId> {
    tape.push(op, value, vec![x], Rc::new(move |_, g| vec![rule(g)]))
}

impl Tape {
    pub fn identity(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).clone();
        unary(self, "identity", x, v, |g| g.clone())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        self.push(
            "add",
            v,
            vec![a, b],
            Rc::new(|_, g| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        self.push(
            "sub",
            v,
            vec![a, b],
            Rc::new(|_, g| vec![g.clone(), g.map(|x| -x)]),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        self.push(
            "mul",
            v,
            vec![a, b],
            Rc::new(|ctx, g| {
                vec![
                    g.zip_map(ctx.inputs[1], |g, y| g * y).expect("shape checked"),
                    g.zip_map(ctx.inputs[0], |g, x| g * x).expect("shape checked"),
                ]
            }),
        )
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> Result<NodeId> {
        let v = self.value(x).map(|v| c * v);
        unary(self, "scale", x, v, move |g| g.map(|g| c * g))
    }

    /// `a - c * b`, evaluated as a single rounding of `c * b` then a subtraction.
    pub fn sub_scaled(&mut self, a: NodeId, b: NodeId, c: f32) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - c * y)?;
        self.push(
            "sub_scaled",
            v,
            vec![a, b],
            Rc::new(move |_, g| vec![g.clone(), g.map(|x| -c * x)]),
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(
            "sum",
            v,
            vec![x],
            Rc::new(|ctx, g| vec![Tensor::full(ctx.inputs[0].shape(), g.item())]),
        )
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.value(x).numel().max(1) as f32;
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(
            "mean",
            v,
            vec![x],
            Rc::new(move |ctx, g| vec![Tensor::full(ctx.inputs[0].shape(), g.item() / n)]),
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let orig = self.value(x).shape().to_vec();
        let v = self.value(x).clone().reshape(shape)?;
        unary(self, "reshape", x, v, move |g| {
            g.clone().reshape(&orig).expect("same numel")
        })
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let v = self.value(x).slice_rows(start, end)?;
        self.push(
            "slice_rows",
            v,
            vec![x],
            Rc::new(move |ctx, g| {
                let src = ctx.inputs[0];
                let row = src.numel() / src.shape()[0].max(1);
                let mut out = Tensor::zeros(src.shape());
                out.data_mut()[start * row..end * row].copy_from_slice(g.data());
                vec![out]
            }),
        )
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&values)?;
        self.push(
            "concat_rows",
            v,
            parts.to_vec(),
            Rc::new(|ctx, g| {
                let mut off = 0;
                ctx.inputs
                    .iter()
                    .map(|inp| {
                        let n = inp.numel();
                        let t = Tensor::new(inp.shape().to_vec(), g.data()[off..off + n].to_vec())
                            .expect("sizes match");
                        off += n;
                        t
                    })
                    .collect()
            }),
        )
    }

    /// `[T*B, ...]` (time-major) to `[B, ...]` by averaging over the T blocks.
    pub fn mean_over_time(&mut self, x: NodeId, steps: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let rows = xv.shape().first().copied().unwrap_or(0);
        if steps == 0 || rows % steps != 0 {
            return Err(Error::config(format!(
                "leading dim {rows} not divisible by T={steps}"
            )));
        }
        let chunk = xv.numel() / steps;
        let mut shape = xv.shape().to_vec();
        shape[0] = rows / steps;
        let mut out = vec![0.0f32; chunk];
        for t in 0..steps {
            for (o, &v) in out.iter_mut().zip(&xv.data()[t * chunk..(t + 1) * chunk]) {
                *o += v;
            }
        }
        let inv = 1.0 / steps as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        let v = Tensor::new(shape, out)?;
        self.push(
            "mean_over_time",
            v,
            vec![x],
            Rc::new(move |ctx, g| {
                let mut dx = Vec::with_capacity(ctx.inputs[0].numel());
                for _ in 0..steps {
                    dx.extend(g.data().iter().map(|&v| v * inv));
                }
                vec![Tensor::new(ctx.inputs[0].shape().to_vec(), dx).expect("sizes match")]
            }),
        )
    }

    /// `out[b,j] = sum_i x[b,i] * w[i,j] + bias[j]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let [b, f_in] = *xv.shape() else {
            return Err(Error::config(format!("linear input must be 2-D, got {:?}", xv.shape())));
        };
        let [w_in, f_out] = *wv.shape() else {
            return Err(Error::config(format!("linear weight must be 2-D, got {:?}", wv.shape())));
        };
        if w_in != f_in {
            return Err(Error::config(format!(
                "linear weight {:?} incompatible with input {:?}",
                wv.shape(),
                xv.shape()
            )));
        }
        let mut out = vec![0.0f32; b * f_out];
        if let Some(bias) = bias {
            let bv = self.value(bias);
            if bv.shape() != [f_out] {
                return Err(Error::config(format!(
                    "linear bias {:?} must be [{f_out}]",
                    bv.shape()
                )));
            }
            for row in out.chunks_mut(f_out) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(xv.data(), wv.data(), &mut out, b, f_in, f_out);
        let v = Tensor::new(vec![b, f_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "linear",
            v,
            inputs,
            Rc::new(move |ctx, g| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let mut dx = vec![0.0f32; b * f_in];
                matmul_a_bt_acc(g.data(), w.data(), &mut dx, b, f_out, f_in);
                let mut dw = vec![0.0f32; f_in * f_out];
                matmul_at_b_acc(x.data(), g.data(), &mut dw, f_in, b, f_out);
                let mut grads = vec![
                    Tensor::new(vec![b, f_in], dx).expect("sizes"),
                    Tensor::new(vec![f_in, f_out], dw).expect("sizes"),
                ];
                if ctx.inputs.len() == 3 {
                    let mut db = vec![0.0f32; f_out];
                    for row in g.data().chunks(f_out) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads.push(Tensor::new(vec![f_out], db).expect("sizes"));
                }
                grads
            }),
        )
    }

    /// Cross-correlation of `x[B,C,H,W]` with `w[O,C,k,k]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let g = Conv2dGeom::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [g.c_out] {
                return Err(Error::config(format!(
                    "conv bias {:?} must be [{}]",
                    self.value(b).shape(),
                    g.c_out
                )));
            }
        }
        let (rows, cols_n) = (g.col_rows(), g.col_cols());
        let in_img = g.c_in * g.h * g.w;
        let out_img = g.c_out * cols_n;
        let mut cols = vec![0.0f32; g.batch * rows * cols_n];
        let mut out = vec![0.0f32; g.batch * out_img];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = bias.map(|b| self.value(b).data().to_vec());
            for bi in 0..g.batch {
                let col = &mut cols[bi * rows * cols_n..(bi + 1) * rows * cols_n];
                im2col(&xv[bi * in_img..(bi + 1) * in_img], &g, col);
                let o = &mut out[bi * out_img..(bi + 1) * out_img];
                if let Some(bv) = &bv {
                    for (c, chunk) in o.chunks_mut(cols_n).enumerate() {
                        chunk.fill(bv[c]);
                    }
                }
                matmul_acc(wv, col, o, g.c_out, rows, cols_n);
            }
        }
        let v = Tensor::new(vec![g.batch, g.c_out, g.h_out, g.w_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            "conv2d",
            v,
            inputs,
            Rc::new(move |ctx, grad| {
                let wv = ctx.inputs[1].data();
                let gd = grad.data();
                let mut dx = vec![0.0f32; g.batch * in_img];
                let mut dw = vec![0.0f32; g.c_out * rows];
                let mut dcol = vec![0.0f32; rows * cols_n];
                for bi in 0..g.batch {
                    let go = &gd[bi * out_img..(bi + 1) * out_img];
                    let col = &cols[bi * rows * cols_n..(bi + 1) * rows * cols_n];
                    matmul_a_bt_acc(go, col, &mut dw, g.c_out, cols_n, rows);
                    dcol.fill(0.0);
                    matmul_at_b_acc(wv, go, &mut dcol, rows, g.c_out, cols_n);
                    col2im(&dcol, &g, &mut dx[bi * in_img..(bi + 1) * in_img]);
                }
                let mut grads = vec![
                    Tensor::new(ctx.inputs[0].shape().to_vec(), dx).expect("sizes"),
                    Tensor::new(ctx.inputs[1].shape().to_vec(), dw).expect("sizes"),
                ];
                if ctx.inputs.len() == 3 {
                    let mut db = vec![0.0f32; g.c_out];
                    for bi in 0..g.batch {
                        for (c, chunk) in gd[bi * out_img..(bi + 1) * out_img]
                            .chunks(cols_n)
                            .enumerate()
                        {
                            db[c] += chunk.iter().sum::<f32>();
                        }
                    }
                    grads.push(Tensor::new(vec![g.c_out], db).expect("sizes"));
                }
                grads
            }),
        )
    }

    /// Mean over `k x k` windows of `x[B,C,H,W]`.
    pub fn avgpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let [b, c, h, w] = *xv.shape() else {
            return Err(Error::config(format!("avgpool input must be 4-D, got {:?}", xv.shape())));
        };
        if k > h || k > w {
            return Err(Error::config(format!("pool window {k} larger than input {h}x{w}")));
        }
        let ho = conv_out_size(h, k, stride, 0)?;
        let wo = conv_out_size(w, k, stride, 0)?;
        let inv = 1.0 / (k * k) as f32;
        let mut out = vec![0.0f32; b * c * ho * wo];
        let xd = xv.data();
        for plane in 0..b * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0f32;
                    for ky in 0..k {
                        for kx in 0..k {
                            s += src[(oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(plane * ho + oy) * wo + ox] = s * inv;
                }
            }
        }
        let v = Tensor::new(vec![b, c, ho, wo], out)?;
        self.push(
            "avgpool2d",
            v,
            vec![x],
            Rc::new(move |ctx, g| {
                let mut dx = Tensor::zeros(ctx.inputs[0].shape());
                let dd = dx.data_mut();
                let gd = g.data();
                for plane in 0..b * c {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let gv = gd[(plane * ho + oy) * wo + ox] * inv;
                            for ky in 0..k {
                                for kx in 0..k {
                                    dd[plane * h * w + (oy * stride + ky) * w + ox * stride + kx] +=
                                        gv;
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
        )
    }

    /// Batch normalization with statistics over every axis except 1.
    ///
    /// Returns the output node plus the batch mean and biased variance per
    /// channel (for running-statistics updates).
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<(NodeId, Vec<f32>, Vec<f32>)> {
        let xv = self.value(x);
        let (outer, ch, inner) = channel_layout(xv.shape())?;
        if self.value(gamma).shape() != [ch] || self.value(beta).shape() != [ch] {
            return Err(Error::config(format!("batchnorm affine params must be [{ch}]")));
        }
        let m = (outer * inner) as f64;
        let xd = xv.data();
        let mut mean = vec![0.0f64; ch];
        let mut var = vec![0.0f64; ch];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                mean[c] += xd[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                var[c] += xd[base..base + inner]
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean[c];
                        d * d
                    })
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f32> = var.iter().map(|&v| (1.0 / (v + eps as f64).sqrt()) as f32).collect();
        let mean32: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xd[i] - mean32[c]) * inv_std[c];
                    out[i] = xhat[i] * gd[c] + bd[c];
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let id = self.push(
            "batchnorm",
            v,
            vec![x, gamma, beta],
            Rc::new(move |ctx, g| {
                let gamma = ctx.inputs[1].data();
                let gdata = g.data();
                let mut sum_g = vec![0.0f64; ch];
                let mut sum_gx = vec![0.0f64; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            sum_g[c] += gdata[i] as f64;
                            sum_gx[c] += (gdata[i] * xhat[i]) as f64;
                        }
                    }
                }
                let mut dx = vec![0.0f32; gdata.len()];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        let k = gamma[c] * inv_std[c] / m as f32;
                        let (sg, sgx) = (sum_g[c] as f32, sum_gx[c] as f32);
                        for i in base..base + inner {
                            dx[i] = k * (m as f32 * gdata[i] - sg - xhat[i] * sgx);
                        }
                    }
                }
                vec![
                    Tensor::new(ctx.inputs[0].shape().to_vec(), dx).expect("sizes"),
                    Tensor::new(vec![ch], sum_gx.iter().map(|&v| v as f32).collect())
                        .expect("sizes"),
                    Tensor::new(vec![ch], sum_g.iter().map(|&v| v as f32).collect())
                        .expect("sizes"),
                ]
            }),
        )?;
        Ok((id, mean32, var.iter().map(|&v| v as f32).collect()))
    }

    /// Per-channel `x * scale[c] + shift[c]` (folded inference batch norm).
    pub fn channel_affine(&mut self, x: NodeId, scale: &[f32], shift: &[f32]) -> Result<NodeId> {
        let xv = self.value(x);
        let (outer, ch, inner) = channel_layout(xv.shape())?;
        if scale.len() != ch || shift.len() != ch {
            return Err(Error::config(format!("affine params must have {ch} channels")));
        }
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for v in &mut out[base..base + inner] {
                    *v = *v * scale[c] + shift[c];
                }
            }
        }
        let v = Tensor::new(xv.shape().to_vec(), out)?;
        let scale = scale.to_vec();
        unary(self, "channel_affine", x, v, move |g| {
            let mut d = g.data().to_vec();
            for o in 0..outer {
                for c in 0..ch {
                    let base = (o * ch + c) * inner;
                    for v in &mut d[base..base + inner] {
                        *v *= scale[c];
                    }
                }
            }
            Tensor::new(g.shape().to_vec(), d).expect("sizes")
        })
    }

    /// Mean softmax cross-entropy of `logits[B,K]` against integer labels.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let [b, k] = *lv.shape() else {
            return Err(Error::config(format!("logits must be 2-D, got {:?}", lv.shape())));
        };
        if k < 2 {
            return Err(Error::config("cross-entropy needs at least 2 classes"));
        }
        if labels.len() != b {
            return Err(Error::data(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::data(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0f32; b * k];
        let mut loss = 0.0f64;
        for (i, row) in lv.data().chunks(k).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let z: f64 = row.iter().map(|&v| ((v - max) as f64).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                probs[i * k + j] = (((v - max) as f64).exp() / z) as f32;
            }
            loss += z.ln() - (row[labels[i]] - max) as f64;
        }
        let v = Tensor::scalar((loss / b as f64) as f32);
        let labels = labels.to_vec();
        self.push(
            "cross_entropy",
            v,
            vec![logits],
            Rc::new(move |_, g| {
                let s = g.item() / b as f32;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= s);
                vec![Tensor::new(vec![b, k], d).expect("sizes")]
            }),
        )
    }
}

/// Splits a shape into (outer, channels, inner) around axis 1.
fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::config(format!("channel op needs rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::ParamStore;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = tape.leaf(t(&[2], &[0.0, 0.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.leaf(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.leaf(t(&[2], &[3.0, 4.0]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0, 5.0]);
    }

    #[test]
    fn linear_weight_grad_of_sum() {
        let mut store = ParamStore::new();
        let wid = store.add("w", t(&[2, 2], &[0.3, -0.1, 0.7, 0.2]), true);
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 2], &[2.0, 5.0]));
        let w = tape.param(&store, wid);
        let y = tape.linear(x, w, None).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(wid).grad.data(), &[2.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn linear_shape_mismatch_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]));
        let w = tape.leaf(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.linear(x, w, None), Err(Error::Config(_))));
    }

    #[test]
    fn conv_identity_kernel_and_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[1, 2, 3, 3], |i| i as f32));
        let w = tape.leaf(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let w = tape.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).item(), 9.0);
    }

    #[test]
    fn conv_non_integral_output_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let w = tape.leaf(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 2, 0), Err(Error::Config(_))));
    }

    #[test]
    fn conv_1x1_kernel_grad_is_spatial_sum() {
        let mut store = ParamStore::new();
        let wid = store.add("w", t(&[1, 1, 1, 1], &[0.5]), true);
        let xdata: Vec<f32> = (0..9).map(|i| i as f32 * 0.1).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1, 1, 3, 3], &xdata));
        let w = tape.param(&store, wid);
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s, &mut store).unwrap();
        let expected: f32 = xdata.iter().sum();
        assert!((store.get(wid).grad.item() - expected).abs() < 1e-6);
    }

    #[test]
    fn avgpool_values_and_backward() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 4, 4], 3.0));
        let y = tape.avgpool2d(x, 2, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 3.0));

        let x = tape.leaf(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.avgpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).item(), 2.5);
        let s = tape.sum(y).unwrap();
        let grads = tape.backward(s, &mut store).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.25; 4]);

        let big = tape.leaf(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(matches!(tape.avgpool2d(big, 3, 1), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_uniform_and_confident() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(&[1, 4]));
        let loss = tape.cross_entropy(l, &[2]).unwrap();
        assert!((tape.value(loss).item() - 4f32.ln()).abs() < 1e-6);

        let l = tape.leaf(t(&[1, 3], &[0.0, 80.0, 0.0]));
        let loss = tape.cross_entropy(l, &[1]).unwrap();
        assert!(tape.value(loss).item() < 1e-6);

        let l = tape.leaf(Tensor::zeros(&[1, 3]));
        assert!(matches!(tape.cross_entropy(l, &[3]), Err(Error::Data(_))));
    }

    #[test]
    fn mean_over_time_averages_blocks() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[4, 1], &[1.0, 2.0, 3.0, 6.0]));
        let y = tape.mean_over_time(x, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_finite_forward_is_numerical_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[f32::MAX]));
        assert!(matches!(tape.scale(x, 10.0), Err(Error::Numerical(_))));
    }
}

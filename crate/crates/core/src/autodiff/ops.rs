//! Differentiable operations recorded on a [`Graph`].

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x * tanh(softplus(x))`.
pub fn mish(x: f64) -> f64 {
    x * softplus(x).tanh()
}

fn mish_grad(x: f64) -> f64 {
    let t = softplus(x).tanh();
    t + x * (1.0 - t * t) * sigmoid(x)
}

// Plane cross-correlation kernels shared by `conv2d` and `depthwise_conv2d`.
// All of them accumulate into their first argument. `pad` is the zero padding
// applied on every side of the input.

struct PlaneGeom {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    pad: usize,
}

impl PlaneGeom {
    /// Output index range `[lo, hi)` along an axis for kernel tap `k`.
    fn range(k: usize, pad: usize, input: usize, output: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (input + pad).saturating_sub(k).min(output);
        (lo, hi.max(lo))
    }

    fn correlate(&self, out: &mut [f64], input: &[f64], kernel: &[f64]) {
        for ky in 0..self.kh {
            let (y0, y1) = Self::range(ky, self.pad, self.h, self.oh);
            for kx in 0..self.kw {
                let wv = kernel[ky * self.kw + kx];
                if wv == 0.0 {
                    continue;
                }
                let (x0, x1) = Self::range(kx, self.pad, self.w, self.ow);
                for oy in y0..y1 {
                    let iy = oy + ky - self.pad;
                    let orow = &mut out[oy * self.ow..(oy + 1) * self.ow];
                    let irow = &input[iy * self.w..(iy + 1) * self.w];
                    for ox in x0..x1 {
                        orow[ox] += wv * irow[ox + kx - self.pad];
                    }
                }
            }
        }
    }

    fn grad_input(&self, g_in: &mut [f64], g_out: &[f64], kernel: &[f64]) {
        for ky in 0..self.kh {
            let (y0, y1) = Self::range(ky, self.pad, self.h, self.oh);
            for kx in 0..self.kw {
                let wv = kernel[ky * self.kw + kx];
                if wv == 0.0 {
                    continue;
                }
                let (x0, x1) = Self::range(kx, self.pad, self.w, self.ow);
                for oy in y0..y1 {
                    let iy = oy + ky - self.pad;
                    let grow = &g_out[oy * self.ow..(oy + 1) * self.ow];
                    let irow = &mut g_in[iy * self.w..(iy + 1) * self.w];
                    for ox in x0..x1 {
                        irow[ox + kx - self.pad] += wv * grow[ox];
                    }
                }
            }
        }
    }

    fn grad_kernel(&self, g_kernel: &mut [f64], g_out: &[f64], input: &[f64]) {
        for ky in 0..self.kh {
            let (y0, y1) = Self::range(ky, self.pad, self.h, self.oh);
            for kx in 0..self.kw {
                let (x0, x1) = Self::range(kx, self.pad, self.w, self.ow);
                let mut acc = 0.0;
                for oy in y0..y1 {
                    let iy = oy + ky - self.pad;
                    let grow = &g_out[oy * self.ow..(oy + 1) * self.ow];
                    let irow = &input[iy * self.w..(iy + 1) * self.w];
                    for ox in x0..x1 {
                        acc += grow[ox] * irow[ox + kx - self.pad];
                    }
                }
                g_kernel[ky * self.kw + kx] += acc;
            }
        }
    }
}

fn plane_geom(op: &'static str, h: usize, w: usize, kh: usize, kw: usize, pad: usize) -> Result<PlaneGeom> {
    if kh.is_multiple_of(2) || kw.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "{op}: kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    let oh = (h + 2 * pad).checked_sub(kh - 1).filter(|&v| v > 0);
    let ow = (w + 2 * pad).checked_sub(kw - 1).filter(|&v| v > 0);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(PlaneGeom {
            h,
            w,
            kh,
            kw,
            oh,
            ow,
            pad,
        }),
        _ => Err(Error::shape(
            op,
            format!("{kh}x{kw} kernel does not fit {h}x{w} input with padding {pad}"),
        )),
    }
}

impl Graph {
    fn expect_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(
        &mut self,
        op: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Var {
        let value = self.value(x).map(f);
        self.record(
            op,
            &[x],
            value,
            Box::new(move |inp, out, g| {
                let gx = inp[0]
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(g)
                    .map(|((&x, &y), &g)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    // ---- elementwise binary ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape("add", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.record(
            "add",
            &[a, b],
            value,
            Box::new(|_, _, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape("sub", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.record(
            "sub",
            &[a, b],
            value,
            Box::new(|_, _, g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape("mul", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.record(
            "mul",
            &[a, b],
            value,
            Box::new(|inp, _, g| {
                let ga = g.iter().zip(inp[1].data()).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(inp[0].data()).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.expect_same_shape("div", a, b)?;
        let value = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.record(
            "div",
            &[a, b],
            value,
            Box::new(|inp, out, g| {
                let ga = g.iter().zip(inp[1].data()).map(|(g, b)| g / b).collect();
                let gb = g
                    .iter()
                    .zip(inp[1].data())
                    .zip(out.data())
                    .map(|((g, b), q)| -g * q / b)
                    .collect();
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    // ---- elementwise unary ----

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary("scale", x, move |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary("add_scalar", x, move |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary("square", x, |v| v * v, |x, _| 2.0 * x)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary("sqrt", x, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary("ln", x, f64::ln, |x, _| 1.0 / x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary("exp", x, f64::exp, |_, y| y)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary("recip", x, |v| 1.0 / v, |_, y| -y * y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary("sigmoid", x, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary("relu", x, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary("softplus", x, softplus, |x, _| sigmoid(x))
    }

    pub fn mish(&mut self, x: Var) -> Var {
        self.unary("mish", x, mish, |x, _| mish_grad(x))
    }

    /// Clamps to `[lo, hi]`; the gradient passes only where no clamping
    /// happened.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(
            "clamp",
            x,
            move |v| v.clamp(lo, hi),
            move |x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 },
        )
    }

    /// Elementwise `max(x, floor)`.
    pub fn max_scalar(&mut self, x: Var, floor: f64) -> Var {
        self.unary(
            "max_scalar",
            x,
            move |v| v.max(floor),
            move |x, _| if x >= floor { 1.0 } else { 0.0 },
        )
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.record(
            "sum",
            &[x],
            value,
            Box::new(|inp, _, g| vec![Some(vec![g[0]; inp[0].numel()])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let value = Tensor::scalar(self.value(x).sum() / n);
        self.record(
            "mean",
            &[x],
            value,
            Box::new(move |inp, _, g| vec![Some(vec![g[0] / n; inp[0].numel()])]),
        )
    }

    /// Global maximum; the gradient goes to the first maximal element.
    pub fn max_all(&mut self, x: Var) -> Var {
        let (arg, max) = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(ai, am), (i, &v)| {
                if v > am {
                    (i, v)
                } else {
                    (ai, am)
                }
            });
        self.record(
            "max_all",
            &[x],
            Tensor::scalar(max),
            Box::new(move |inp, _, g| {
                let mut gx = vec![0.0; inp[0].numel()];
                gx[arg] = g[0];
                vec![Some(gx)]
            }),
        )
    }

    // ---- shape manipulation ----

    /// Expands a one-element tensor to `shape`.
    pub fn broadcast_scalar(&mut self, s: Var, shape: &[usize]) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape("broadcast_scalar", format!("{:?}", self.shape(s))));
        }
        let value = Tensor::full(shape, self.value(s).item());
        Ok(self.record(
            "broadcast_scalar",
            &[s],
            value,
            Box::new(|_, _, g| vec![Some(vec![g.iter().sum()])]),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.record(
            "reshape",
            &[x],
            value,
            Box::new(|_, _, g| vec![Some(g.to_vec())]),
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.record(
            "transpose",
            &[x],
            value,
            Box::new(move |_, _, g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates two `[C, H, W]` tensors along channels.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ca, h, w) = self.value(a).dims3()?;
        let (cb, hb, wb) = self.value(b).dims3()?;
        if (h, w) != (hb, wb) {
            return Err(Error::shape(
                "concat_channels",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(vec![ca + cb, h, w], data)?;
        let split = ca * h * w;
        Ok(self.record(
            "concat_channels",
            &[a, b],
            value,
            Box::new(move |_, _, g| vec![Some(g[..split].to_vec()), Some(g[split..].to_vec())]),
        ))
    }

    /// Channel `c` of a `[C, H, W]` tensor as `[H, W]`.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let (ch, h, w) = self.value(x).dims3()?;
        if c >= ch {
            return Err(Error::shape("channel", format!("channel {c} of {ch}")));
        }
        let plane = h * w;
        let data = self.value(x).data()[c * plane..(c + 1) * plane].to_vec();
        let value = Tensor::new(vec![h, w], data)?;
        Ok(self.record(
            "channel",
            &[x],
            value,
            Box::new(move |inp, _, g| {
                let mut gx = vec![0.0; inp[0].numel()];
                gx[c * plane..(c + 1) * plane].copy_from_slice(g);
                vec![Some(gx)]
            }),
        ))
    }

    /// Repeats a `[C]` vector over an `h x w` grid.
    pub fn expand_channels(&mut self, v: Var, h: usize, w: usize) -> Result<Var> {
        let vals = self.value(v);
        if vals.rank() != 1 {
            return Err(Error::shape("expand_channels", format!("{:?}", vals.shape())));
        }
        let c = vals.numel();
        let plane = h * w;
        let data = vals
            .data()
            .iter()
            .flat_map(|&x| std::iter::repeat_n(x, plane))
            .collect();
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.record(
            "expand_channels",
            &[v],
            value,
            Box::new(move |_, _, g| {
                vec![Some(g.chunks(plane).map(|ch| ch.iter().sum()).collect())]
            }),
        ))
    }

    /// Circular (wrap-around) padding of every plane of a `[C, H, W]` tensor.
    pub fn pad_circular(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if pad > h || pad > w {
            return Err(Error::shape("pad_circular", format!("pad {pad} exceeds {h}x{w}")));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        // Source index for every padded position.
        let index: Vec<usize> = (0..c)
            .flat_map(|ci| {
                (0..ph).flat_map(move |y| {
                    (0..pw).map(move |xx| {
                        let sy = (y + h - pad) % h;
                        let sx = (xx + w - pad) % w;
                        ci * h * w + sy * w + sx
                    })
                })
            })
            .collect();
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![c, ph, pw], data)?;
        Ok(self.record(
            "pad_circular",
            &[x],
            value,
            Box::new(move |inp, _, g| {
                let mut gx = vec![0.0; inp[0].numel()];
                for (&i, &gv) in index.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    // ---- linear algebra ----

    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if k != kb {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{kb}, {n}]")));
        }
        let value = Tensor::new(vec![m, n], matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n))?;
        Ok(self.record(
            "matmul",
            &[a, b],
            value,
            Box::new(move |inp, _, g| {
                let (ad, bd) = (inp[0].data(), inp[1].data());
                // dA = G B^T, dB = A^T G
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for j in 0..n {
                        let gv = g[i * n + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for p in 0..k {
                            ga[i * k + p] += gv * bd[p * n + j];
                        }
                    }
                }
                let mut gb = vec![0.0; k * n];
                for i in 0..m {
                    for p in 0..k {
                        let av = ad[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        let grow = &g[i * n..(i + 1) * n];
                        let brow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            brow[j] += av * grow[j];
                        }
                    }
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    /// `[M, N] x [N] -> [M]`.
    pub fn matvec(&mut self, w: Var, v: Var) -> Result<Var> {
        let (m, n) = self.value(w).dims2()?;
        if self.shape(v) != [n] {
            return Err(Error::shape("matvec", format!("[{m}, {n}] x {:?}", self.shape(v))));
        }
        let value = Tensor::new(vec![m], matmul_raw(self.value(w).data(), self.value(v).data(), m, n, 1))?;
        Ok(self.record(
            "matvec",
            &[w, v],
            value,
            Box::new(move |inp, _, g| {
                let (wd, vd) = (inp[0].data(), inp[1].data());
                let mut gw = vec![0.0; m * n];
                let mut gv = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        gw[i * n + j] = g[i] * vd[j];
                        gv[j] += g[i] * wd[i * n + j];
                    }
                }
                vec![Some(gw), Some(gv)]
            }),
        ))
    }

    /// Adds a `[N]` bias along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = self.value(b).numel();
        let xs = self.shape(x);
        if self.value(b).rank() != 1 || xs.last() != Some(&n) {
            return Err(Error::shape("add_bias", format!("{xs:?} + {:?}", self.shape(b))));
        }
        let bd = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            row.iter_mut().zip(&bd).for_each(|(v, b)| *v += b);
        }
        Ok(self.record(
            "add_bias",
            &[x, b],
            value,
            Box::new(move |_, _, g| {
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }

    // ---- image / feature-map ops on [C, H, W] ----

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kh, kw]`,
    /// zero padding on every side.
    pub fn conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (ci, h, w) = self.value(x).dims3()?;
        let kshape = self.shape(kernel).to_vec();
        let &[co, kci, kh, kw] = kshape.as_slice() else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {kshape:?}")));
        };
        if kci != ci {
            return Err(Error::shape(
                "conv2d",
                format!("input has {ci} channels, kernel expects {kci}"),
            ));
        }
        let geom = plane_geom("conv2d", h, w, kh, kw, padding)?;
        let (oh, ow) = (geom.oh, geom.ow);
        let (xin, kd) = (self.value(x).data(), self.value(kernel).data());
        let (iplane, oplane, kplane) = (h * w, oh * ow, kh * kw);
        let mut out = vec![0.0; co * oplane];
        for o in 0..co {
            let dst = &mut out[o * oplane..(o + 1) * oplane];
            for c in 0..ci {
                let k = &kd[(o * ci + c) * kplane..(o * ci + c + 1) * kplane];
                geom.correlate(dst, &xin[c * iplane..(c + 1) * iplane], k);
            }
        }
        let value = Tensor::new(vec![co, oh, ow], out)?;
        Ok(self.record(
            "conv2d",
            &[x, kernel],
            value,
            Box::new(move |inp, _, g| {
                let (xin, kd) = (inp[0].data(), inp[1].data());
                let mut gx = vec![0.0; ci * iplane];
                let mut gk = vec![0.0; co * ci * kplane];
                for o in 0..co {
                    let go = &g[o * oplane..(o + 1) * oplane];
                    for c in 0..ci {
                        let kidx = (o * ci + c) * kplane..(o * ci + c + 1) * kplane;
                        geom.grad_input(&mut gx[c * iplane..(c + 1) * iplane], go, &kd[kidx.clone()]);
                        geom.grad_kernel(&mut gk[kidx], go, &xin[c * iplane..(c + 1) * iplane]);
                    }
                }
                vec![Some(gx), Some(gk)]
            }),
        ))
    }

    /// Per-channel cross-correlation. `kernel` is `[C, kh, kw]` or a single
    /// `[kh, kw]` kernel shared by every channel.
    pub fn depthwise_conv2d(&mut self, x: Var, kernel: Var, padding: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let kshape = self.shape(kernel).to_vec();
        let (shared, kh, kw) = match kshape.as_slice() {
            &[kh, kw] => (true, kh, kw),
            &[kc, kh, kw] if kc == c => (false, kh, kw),
            s => {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("kernel {s:?} incompatible with {c} channels"),
                ))
            }
        };
        let geom = plane_geom("depthwise_conv2d", h, w, kh, kw, padding)?;
        let (oh, ow) = (geom.oh, geom.ow);
        let (iplane, oplane, kplane) = (h * w, oh * ow, kh * kw);
        let kidx = move |ch: usize| if shared { 0..kplane } else { ch * kplane..(ch + 1) * kplane };
        let (xin, kd) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; c * oplane];
        for ch in 0..c {
            geom.correlate(
                &mut out[ch * oplane..(ch + 1) * oplane],
                &xin[ch * iplane..(ch + 1) * iplane],
                &kd[kidx(ch)],
            );
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        Ok(self.record(
            "depthwise_conv2d",
            &[x, kernel],
            value,
            Box::new(move |inp, _, g| {
                let (xin, kd) = (inp[0].data(), inp[1].data());
                let mut gx = vec![0.0; c * iplane];
                let mut gk = vec![0.0; kd.len()];
                for ch in 0..c {
                    let go = &g[ch * oplane..(ch + 1) * oplane];
                    geom.grad_input(&mut gx[ch * iplane..(ch + 1) * iplane], go, &kd[kidx(ch)]);
                    geom.grad_kernel(&mut gk[kidx(ch)], go, &xin[ch * iplane..(ch + 1) * iplane]);
                }
                vec![Some(gx), Some(gk)]
            }),
        ))
    }

    /// Instance normalization of `[C, H, W]` with per-channel affine
    /// `gamma`, `beta` (population variance).
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "instance_norm",
                format!(
                    "{c} channels, gamma {:?}, beta {:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let plane = h * w;
        let n = plane as f64;
        let xin = self.value(x).data();
        let mut xhat = vec![0.0; c * plane];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let src = &xin[ch * plane..(ch + 1) * plane];
            let mean = src.iter().sum::<f64>() / n;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[ch] = inv;
            for (d, s) in xhat[ch * plane..(ch + 1) * plane].iter_mut().zip(src) {
                *d = (s - mean) * inv;
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .chunks(plane)
            .zip(gd.iter().zip(bd))
            .flat_map(|(row, (&g, &b))| row.iter().map(move |v| g * v + b))
            .collect();
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.record(
            "instance_norm",
            &[x, gamma, beta],
            value,
            Box::new(move |inp, _, g| {
                let gamma = inp[1].data();
                let mut gx = vec![0.0; c * plane];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    let (gy, xh) = (&g[r.clone()], &xhat[r.clone()]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for (gv, xv) in gy.iter().zip(xh) {
                        sum_g += gv;
                        sum_gx += gv * xv;
                    }
                    ggamma[ch] = sum_gx;
                    gbeta[ch] = sum_g;
                    let m1 = gamma[ch] * sum_g / n;
                    let m2 = gamma[ch] * sum_gx / n;
                    for ((d, gv), xv) in gx[r].iter_mut().zip(gy).zip(xh) {
                        *d = inv_std[ch] * (gamma[ch] * gv - m1 - xv * m2);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }

    /// `[C, H, W] -> [C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|ch| ch.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new(vec![c], data)?;
        Ok(self.record(
            "global_avg_pool",
            &[x],
            value,
            Box::new(move |_, _, g| {
                let gx = g
                    .iter()
                    .flat_map(|&gv| std::iter::repeat_n(gv / plane as f64, plane))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }

    /// Multiplies every plane of `[C, H, W]` by the matching entry of `[C]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.shape(s) != [c] {
            return Err(Error::shape("scale_channels", format!("{c} channels vs {:?}", self.shape(s))));
        }
        let plane = h * w;
        let sd = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(sd)
            .flat_map(|(row, &sv)| row.iter().map(move |v| v * sv))
            .collect();
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.record(
            "scale_channels",
            &[x, s],
            value,
            Box::new(move |inp, _, g| {
                let (xd, sd) = (inp[0].data(), inp[1].data());
                let mut gx = vec![0.0; c * plane];
                let mut gs = vec![0.0; c];
                for ch in 0..c {
                    let r = ch * plane..(ch + 1) * plane;
                    for ((d, gv), xv) in gx[r.clone()].iter_mut().zip(&g[r.clone()]).zip(&xd[r]) {
                        *d = gv * sd[ch];
                        gs[ch] += gv * xv;
                    }
                }
                vec![Some(gx), Some(gs)]
            }),
        ))
    }

    /// Adds `[C]` to every plane of `[C, H, W]`.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if self.shape(b) != [c] {
            return Err(Error::shape("add_channel_bias", format!("{c} channels vs {:?}", self.shape(b))));
        }
        let plane = h * w;
        let bd = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .zip(bd)
            .flat_map(|(row, &bv)| row.iter().map(move |v| v + bv))
            .collect();
        let value = Tensor::new(vec![c, h, w], data)?;
        Ok(self.record(
            "add_channel_bias",
            &[x, b],
            value,
            Box::new(move |_, _, g| {
                let gb = g.chunks(plane).map(|ch| ch.iter().sum()).collect();
                vec![Some(g.to_vec()), Some(gb)]
            }),
        ))
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}

/// Row-major `[m, k] x [k, n]`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

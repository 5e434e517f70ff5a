use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::params::{Bound, ParamId};
use crate::tensor::{dot, matmul_raw, Scalar, Tensor};

use super::Grads;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Conv2dGeometry {
    pub const POINTWISE: Self = Self { stride: 1, padding: 0, dilation: 1, groups: 1 };

    /// Stride-1 geometry that preserves spatial extents for an odd kernel.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        Self { stride: 1, padding: dilation * (kernel - 1) / 2, dilation, groups }
    }
}

/// `floor((n + 2 pad - dil (k - 1) - 1) / stride) + 1`, or `None` if no placement fits.
pub fn conv_output_extent(n: usize, k: usize, g: Conv2dGeometry) -> Option<usize> {
    let span = g.dilation * (k - 1) + 1;
    let padded = n + 2 * g.padding;
    (padded >= span && g.stride > 0).then(|| (padded - span) / g.stride + 1)
}

/// A convolution layer whose weights live in a [`crate::params::ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geometry: Conv2dGeometry,
}

impl Conv2d {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        conv2d(tape, x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.geometry)
    }
}

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    cpg: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: Conv2dGeometry,
}

impl ConvDims {
    fn new(x: &[usize], wt: &[usize], g: Conv2dGeometry) -> Result<Self> {
        let (&[b, cin, h, w], &[cout, cpg, kh, kw]) = (x, wt) else {
            return Err(shape_err!("conv2d expects NCHW input and OIHW weight, got {x:?} and {wt:?}"));
        };
        if g.groups == 0 || cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cpg {
            return Err(shape_err!(
                "conv2d: {cin} input / {cout} output channels incompatible with {} groups and weight {wt:?}",
                g.groups
            ));
        }
        let (Some(ho), Some(wo)) = (conv_output_extent(h, kh, g), conv_output_extent(w, kw, g)) else {
            return Err(shape_err!("conv2d: {kh}x{kw} kernel does not fit {h}x{w} input with {g:?}"));
        };
        Ok(Self { b, cin, h, w, cout, cpg, kh, kw, ho, wo, g })
    }

    /// Output columns `ox` whose input column `ox*stride + kx*dil - pad` is in range.
    fn valid(&self, k: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let off = (k * self.g.dilation) as i64 - self.g.padding as i64;
        let s = self.g.stride as i64;
        // ox*s + off >= 0  and  ox*s + off <= n_in - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = n_in as i64 - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(n_out as i64);
        (lo.min(hi) as usize, hi.max(0) as usize)
    }

    fn src(&self, o: usize, k: usize) -> usize {
        (o * self.g.stride + k * self.g.dilation) - self.g.padding
    }
}

/// Zero-padded cross-correlation. `w` is `[out, in/groups, kh, kw]`, `b` is `[out]`.
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>, g: Conv2dGeometry) -> Result<Var> {
    let d = ConvDims::new(tape.value(x).shape(), tape.value(w).shape(), g)?;
    if let Some(b) = b {
        if tape.value(b).shape() != [d.cout] {
            return Err(shape_err!("conv2d bias {:?} for {} outputs", tape.value(b).shape(), d.cout));
        }
    }
    let xs = tape.value(x).to_f64_vec();
    let ws = tape.value(w).to_f64_vec();
    let bs = b.map(|b| tape.value(b).to_f64_vec());
    let out = conv_forward(&d, &xs, &ws, bs.as_deref());
    let out = Tensor::from_f64s(vec![d.b, d.cout, d.ho, d.wo], out);
    let mut inputs = vec![x, w];
    inputs.extend(b);
    tape.record("conv2d", &inputs, out, move |gr: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        let d = ConvDims::new(ins[0].shape(), ins[1].shape(), g)?;
        let go = gr.to_f64_vec();
        let xs = ins[0].to_f64_vec();
        let ws = ins[1].to_f64_vec();
        let (gx, gw) = conv_backward(&d, &xs, &ws, &go, needs[0], needs[1]);
        let mut grads = vec![
            gx.map(|v| Tensor::from_f64s(ins[0].shape().to_vec(), v)),
            gw.map(|v| Tensor::from_f64s(ins[1].shape().to_vec(), v)),
        ];
        if ins.len() == 3 {
            grads.push(needs[2].then(|| {
                let plane = d.ho * d.wo;
                let mut gb = vec![0.0; d.cout];
                for n in 0..d.b {
                    for (o, gb) in gb.iter_mut().enumerate() {
                        *gb += go[(n * d.cout + o) * plane..(n * d.cout + o + 1) * plane].iter().sum::<f64>();
                    }
                }
                Tensor::from_f64s(vec![d.cout], gb)
            }));
        }
        Ok(grads)
    })
}

impl ConvDims {
    /// 1x1, stride 1, no padding: every tap covers the whole plane.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.padding == 0
    }
}

fn conv_forward(d: &ConvDims, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (plane_in, plane_out) = (d.h * d.w, d.ho * d.wo);
    if d.pointwise() {
        return pointwise_forward(d, x, w, b);
    }
    if d.g.stride == 1 {
        return wide_forward(d, x, w, b);
    }
    let opg = d.cout / d.g.groups;
    let mut out = vec![0.0; d.b * d.cout * plane_out];
    for n in 0..d.b {
        for o in 0..d.cout {
            let grp = o / opg;
            let acc = &mut out[(n * d.cout + o) * plane_out..(n * d.cout + o + 1) * plane_out];
            if let Some(b) = b {
                acc.iter_mut().for_each(|v| *v = b[o]);
            }
            for ci in 0..d.cpg {
                let c = grp * d.cpg + ci;
                let xin = &x[(n * d.cin + c) * plane_in..(n * d.cin + c + 1) * plane_in];
                for ky in 0..d.kh {
                    let (oy0, oy1) = d.valid(ky, d.h, d.ho);
                    for kx in 0..d.kw {
                        let wv = w[((o * d.cpg + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox0, ox1) = d.valid(kx, d.w, d.wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        for oy in oy0..oy1 {
                            let row = &xin[d.src(oy, ky) * d.w..];
                            let dst = &mut acc[oy * d.wo..(oy + 1) * d.wo];
                            if d.g.stride == 1 {
                                let s0 = d.src(ox0, kx);
                                for (a, xv) in dst[ox0..ox1].iter_mut().zip(&row[s0..s0 + (ox1 - ox0)]) {
                                    *a += wv * xv;
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    dst[ox] += wv * row[d.src(ox, kx)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Stride-1 convolution on zero-padded planes. Output rows are computed at
/// the padded width, so every kernel tap is one contiguous multiply-add over
/// `(ho - 1) * wp + wo` elements; the extra columns are discarded.
struct Wide {
    hp: usize,
    wp: usize,
    len: usize,
}

impl Wide {
    fn new(d: &ConvDims) -> Self {
        let (hp, wp) = (d.h + 2 * d.g.padding, d.w + 2 * d.g.padding);
        Self { hp, wp, len: (d.ho - 1) * wp + d.wo }
    }

    fn tap(&self, d: &ConvDims, ky: usize, kx: usize) -> usize {
        (ky * self.wp + kx) * d.g.dilation
    }

    /// Zero-padded copies of every input plane of image `n`.
    fn pad(&self, d: &ConvDims, x: &[f64], n: usize) -> Vec<f64> {
        let (p, plane) = (d.g.padding, self.hp * self.wp);
        let mut out = vec![0.0; d.cin * plane];
        for c in 0..d.cin {
            for y in 0..d.h {
                let src = &x[((n * d.cin + c) * d.h + y) * d.w..][..d.w];
                out[c * plane + (y + p) * self.wp + p..][..d.w].copy_from_slice(src);
            }
        }
        out
    }
}

fn wide_forward(d: &ConvDims, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let geo = Wide::new(d);
    let plane = geo.hp * geo.wp;
    let opg = d.cout / d.g.groups;
    let mut out = vec![0.0; d.b * d.cout * d.ho * d.wo];
    let mut wide = vec![0.0; geo.len];
    for n in 0..d.b {
        let xp = geo.pad(d, x, n);
        for o in 0..d.cout {
            wide.fill(b.map_or(0.0, |b| b[o]));
            for ci in 0..d.cpg {
                let src = &xp[((o / opg) * d.cpg + ci) * plane..][..plane];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = w[((o * d.cpg + ci) * d.kh + ky) * d.kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let s = &src[geo.tap(d, ky, kx)..][..geo.len];
                        for (a, v) in wide.iter_mut().zip(s) {
                            *a += wv * v;
                        }
                    }
                }
            }
            for oy in 0..d.ho {
                out[((n * d.cout + o) * d.ho + oy) * d.wo..][..d.wo].copy_from_slice(&wide[oy * geo.wp..][..d.wo]);
            }
        }
    }
    out
}

fn wide_backward(d: &ConvDims, x: &[f64], w: &[f64], go: &[f64], need_x: bool, need_w: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let geo = Wide::new(d);
    let plane = geo.hp * geo.wp;
    let opg = d.cout / d.g.groups;
    let p = d.g.padding;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    let mut gwide = vec![0.0; geo.len];
    for n in 0..d.b {
        let xp = geo.pad(d, x, n);
        let mut gxp = vec![0.0; if need_x { d.cin * plane } else { 0 }];
        for o in 0..d.cout {
            gwide.fill(0.0);
            for oy in 0..d.ho {
                gwide[oy * geo.wp..][..d.wo].copy_from_slice(&go[((n * d.cout + o) * d.ho + oy) * d.wo..][..d.wo]);
            }
            for ci in 0..d.cpg {
                let c = (o / opg) * d.cpg + ci;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let widx = ((o * d.cpg + ci) * d.kh + ky) * d.kw + kx;
                        let off = c * plane + geo.tap(d, ky, kx);
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += dot(&gwide, &xp[off..off + geo.len]);
                        }
                        if need_x && w[widx] != 0.0 {
                            let wv = w[widx];
                            for (t, g) in gxp[off..off + geo.len].iter_mut().zip(&gwide) {
                                *t += wv * g;
                            }
                        }
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            for c in 0..d.cin {
                for y in 0..d.h {
                    gx[((n * d.cin + c) * d.h + y) * d.w..][..d.w].copy_from_slice(&gxp[c * plane + (y + p) * geo.wp + p..][..d.w]);
                }
            }
        }
    }
    (gx, gw)
}

fn pointwise_forward(d: &ConvDims, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let plane = d.h * d.w;
    let opg = d.cout / d.g.groups;
    let mut out = vec![0.0; d.b * d.cout * plane];
    for n in 0..d.b {
        for o in 0..d.cout {
            let acc = &mut out[(n * d.cout + o) * plane..][..plane];
            if let Some(b) = b {
                acc.iter_mut().for_each(|v| *v = b[o]);
            }
            for ci in 0..d.cpg {
                let wv = w[o * d.cpg + ci];
                if wv == 0.0 {
                    continue;
                }
                let c = (o / opg) * d.cpg + ci;
                for (a, xv) in acc.iter_mut().zip(&x[(n * d.cin + c) * plane..][..plane]) {
                    *a += wv * xv;
                }
            }
        }
    }
    out
}

fn pointwise_backward(d: &ConvDims, x: &[f64], w: &[f64], go: &[f64], need_x: bool, need_w: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = d.h * d.w;
    let opg = d.cout / d.g.groups;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    for n in 0..d.b {
        for o in 0..d.cout {
            let g = &go[(n * d.cout + o) * plane..][..plane];
            for ci in 0..d.cpg {
                let xo = (n * d.cin + (o / opg) * d.cpg + ci) * plane;
                if let Some(gw) = gw.as_mut() {
                    gw[o * d.cpg + ci] += dot(g, &x[xo..xo + plane]);
                }
                if let Some(gx) = gx.as_mut() {
                    let wv = w[o * d.cpg + ci];
                    for (t, gv) in gx[xo..xo + plane].iter_mut().zip(g) {
                        *t += wv * gv;
                    }
                }
            }
        }
    }
    (gx, gw)
}

fn conv_backward(d: &ConvDims, x: &[f64], w: &[f64], go: &[f64], need_x: bool, need_w: bool) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (plane_in, plane_out) = (d.h * d.w, d.ho * d.wo);
    if d.pointwise() {
        return pointwise_backward(d, x, w, go, need_x, need_w);
    }
    if d.g.stride == 1 {
        return wide_backward(d, x, w, go, need_x, need_w);
    }
    let opg = d.cout / d.g.groups;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    let mut gw = need_w.then(|| vec![0.0; w.len()]);
    for n in 0..d.b {
        for o in 0..d.cout {
            let grp = o / opg;
            let g = &go[(n * d.cout + o) * plane_out..(n * d.cout + o + 1) * plane_out];
            for ci in 0..d.cpg {
                let c = grp * d.cpg + ci;
                let xoff = (n * d.cin + c) * plane_in;
                for ky in 0..d.kh {
                    let (oy0, oy1) = d.valid(ky, d.h, d.ho);
                    for kx in 0..d.kw {
                        let widx = ((o * d.cpg + ci) * d.kh + ky) * d.kw + kx;
                        let (ox0, ox1) = d.valid(kx, d.w, d.wo);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wv = w[widx];
                        let mut wacc = 0.0;
                        for oy in oy0..oy1 {
                            let rowoff = xoff + d.src(oy, ky) * d.w;
                            let grow = &g[oy * d.wo..(oy + 1) * d.wo];
                            if d.g.stride == 1 {
                                let s0 = rowoff + d.src(ox0, kx);
                                let span = ox1 - ox0;
                                if gw.is_some() {
                                    wacc += dot(&grow[ox0..ox1], &x[s0..s0 + span]);
                                }
                                if let Some(gx) = gx.as_mut() {
                                    if wv != 0.0 {
                                        for (t, gv) in gx[s0..s0 + span].iter_mut().zip(&grow[ox0..ox1]) {
                                            *t += wv * gv;
                                        }
                                    }
                                }
                            } else {
                                for ox in ox0..ox1 {
                                    let xi = rowoff + d.src(ox, kx);
                                    wacc += grow[ox] * x[xi];
                                    if let Some(gx) = gx.as_mut() {
                                        gx[xi] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[widx] += wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw)
}

/// Per-position affine map over the channel axis of `[B, Cin, H, W]`;
/// `w` is `[Cin, Cout]` (the `linear` layout), `b` is `[Cout]`.
pub fn channel_linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let (&[bn, cin, h, wd], &[din, cout]) = (xv.shape(), wv.shape()) else {
        return Err(shape_err!("channel_linear expects NCHW and [Cin, Cout], got {:?} and {:?}", xv.shape(), wv.shape()));
    };
    if din != cin {
        return Err(shape_err!("channel_linear: {cin} channels into weight {:?}", wv.shape()));
    }
    if let Some(b) = b {
        if tape.value(b).shape() != [cout] {
            return Err(shape_err!("channel_linear bias {:?} for {cout} outputs", tape.value(b).shape()));
        }
    }
    let plane = h * wd;
    let xs = xv.to_f64_vec();
    let ws = wv.to_f64_vec();
    let bs = b.map(|b| tape.value(b).to_f64_vec());
    let mut out = vec![0.0; bn * cout * plane];
    for n in 0..bn {
        for o in 0..cout {
            let dst = &mut out[(n * cout + o) * plane..(n * cout + o + 1) * plane];
            if let Some(bs) = &bs {
                dst.iter_mut().for_each(|v| *v = bs[o]);
            }
            for c in 0..cin {
                let wt = ws[c * cout + o];
                if wt == 0.0 {
                    continue;
                }
                let src = &xs[(n * cin + c) * plane..(n * cin + c + 1) * plane];
                for (a, s) in dst.iter_mut().zip(src) {
                    *a += wt * s;
                }
            }
        }
    }
    let out = Tensor::from_f64s(vec![bn, cout, h, wd], out);
    let mut inputs = vec![x, w];
    inputs.extend(b);
    tape.record("channel_linear", &inputs, out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        let go = g.to_f64_vec();
        let xs = ins[0].to_f64_vec();
        let ws = ins[1].to_f64_vec();
        let mut gx = needs[0].then(|| vec![0.0; xs.len()]);
        let mut gw = needs[1].then(|| vec![0.0; ws.len()]);
        for n in 0..bn {
            for o in 0..cout {
                let gp = &go[(n * cout + o) * plane..(n * cout + o + 1) * plane];
                for c in 0..cin {
                    let xp = &xs[(n * cin + c) * plane..(n * cin + c + 1) * plane];
                    if let Some(gw) = gw.as_mut() {
                        gw[c * cout + o] += dot(gp, xp);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wt = ws[c * cout + o];
                        for (t, gv) in gx[(n * cin + c) * plane..(n * cin + c + 1) * plane].iter_mut().zip(gp) {
                            *t += wt * gv;
                        }
                    }
                }
            }
        }
        let mut grads = vec![
            gx.map(|v| Tensor::from_f64s(ins[0].shape().to_vec(), v)),
            gw.map(|v| Tensor::from_f64s(ins[1].shape().to_vec(), v)),
        ];
        if ins.len() == 3 {
            grads.push(needs[2].then(|| {
                let gb: Vec<f64> = (0..cout)
                    .map(|o| (0..bn).map(|n| go[(n * cout + o) * plane..(n * cout + o + 1) * plane].iter().sum::<f64>()).sum())
                    .collect();
                Tensor::from_f64s(vec![cout], gb)
            }));
        }
        Ok(grads)
    })
}

/// Batched affine map over the last axis; `w` is `[Din, Dout]`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let (xv, wv) = (tape.value(x), tape.value(w));
    let &[din, dout] = wv.shape() else {
        return Err(shape_err!("linear weight must be [Din, Dout], got {:?}", wv.shape()));
    };
    if xv.shape().last() != Some(&din) {
        return Err(shape_err!("linear: input {:?} into weight {:?}", xv.shape(), wv.shape()));
    }
    if let Some(b) = b {
        if tape.value(b).shape() != [dout] {
            return Err(shape_err!("linear bias {:?} for {dout} outputs", tape.value(b).shape()));
        }
    }
    let rows = xv.numel() / din;
    let mut out = matmul_raw(xv.data(), wv.data(), rows, din, dout);
    if let Some(b) = b {
        let bv = tape.value(b).data();
        for (i, v) in out.iter_mut().enumerate() {
            *v = T::from_f64(v.to_f64() + bv[i % dout].to_f64());
        }
    }
    let mut shape = xv.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    let out = Tensor::from_parts(shape, out);
    let mut inputs = vec![x, w];
    inputs.extend(b);
    tape.record("linear", &inputs, out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        let g2 = g.reshape(&[rows, dout])?;
        let x2 = ins[0].reshape(&[rows, din])?;
        let mut grads = vec![
            needs[0].then(|| g2.matmul(&ins[1].transpose2()?)?.reshape(ins[0].shape())).transpose()?,
            needs[1].then(|| x2.transpose2()?.matmul(&g2)).transpose()?,
        ];
        if ins.len() == 3 {
            grads.push(needs[2].then(|| g2.reduce(crate::tensor::ReduceOp::Sum, 0)).transpose()?);
        }
        Ok(grads)
    })
}

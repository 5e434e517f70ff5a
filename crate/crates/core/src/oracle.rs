//! Brute-force reference kernels.
//!
//! Straight-line loop nests evaluated in `f64`. Nothing here calls into
//! `nn`, `attention` or `block`; the only shared code is tensor
//! construction and raw data access.

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-kernel tolerances on relative difference.
pub const TOL_F32: f64 = 1e-5;
pub const TOL_F64: f64 = 1e-10;

pub fn tolerance_for<T: Scalar>() -> f64 {
    match T::DTYPE {
        crate::tensor::DType::F32 => TOL_F32,
        crate::tensor::DType::F64 => TOL_F64,
    }
}

/// One kernel-vs-oracle comparison.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct OracleReport {
    pub kernel: String,
    pub shape: Vec<usize>,
    pub max_abs_diff: f64,
    /// Relative to `max(1, |reference|)`.
    pub max_rel_diff: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl OracleReport {
    pub fn compare<T: Scalar>(kernel: &str, got: &Tensor<T>, reference: &Tensor<f64>, tolerance: f64) -> Result<Self> {
        if got.shape() != reference.shape() {
            return Err(shape_err!("{kernel}: output {:?} vs oracle {:?}", got.shape(), reference.shape()));
        }
        let (mut abs, mut rel) = (0.0f64, 0.0f64);
        for (g, r) in got.data().iter().zip(reference.data()) {
            let d = (g.to_f64() - r).abs();
            abs = abs.max(d);
            rel = rel.max(d / r.abs().max(1.0));
        }
        Ok(Self {
            kernel: kernel.to_string(),
            shape: reference.shape().to_vec(),
            max_abs_diff: abs,
            max_rel_diff: rel,
            tolerance,
            pass: rel <= tolerance,
        })
    }
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * eps));
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

fn dims4(t: &Tensor<f64>) -> Result<(usize, usize, usize, usize)> {
    match t.shape() {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        s => Err(shape_err!("oracle expects NCHW, got {s:?}")),
    }
}

fn clampi(v: i64, hi: usize) -> usize {
    v.clamp(0, hi as i64 - 1) as usize
}

pub fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (&[m, p], &[p2, n]) = (a.shape(), b.shape()) else {
        return Err(shape_err!("naive_matmul needs matrices"));
    };
    if p != p2 {
        return Err(shape_err!("naive_matmul inner mismatch"));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for t in 0..p {
                s += a.data()[i * p + t] * b.data()[t * n + j];
            }
            out[i * n + j] = s;
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn naive_softmax(x: &Tensor<f64>) -> Tensor<f64> {
    let n = *x.shape().last().unwrap();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(n) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / z));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Affine map over the last axis; `w` is `[din, dout]`.
pub fn naive_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    if *x.shape().last().unwrap() != din {
        return Err(shape_err!("naive_linear extent mismatch"));
    }
    let mut out = Vec::new();
    for row in x.data().chunks(din) {
        for o in 0..dout {
            let mut s = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..din {
                s += row[i] * w.data()[i * dout + o];
            }
            out.push(s);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = dout;
    Tensor::new(&shape, out)
}

/// Linear map over the channel axis of an NCHW map.
pub fn naive_channel_linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Result<Tensor<f64>> {
    let (bn, c, h, wd) = dims4(x)?;
    let dout = w.shape()[1];
    let mut out = vec![0.0; bn * dout * h * wd];
    for n in 0..bn {
        for y in 0..h {
            for xx in 0..wd {
                for o in 0..dout {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for i in 0..c {
                        s += x.data()[((n * c + i) * h + y) * wd + xx] * w.data()[i * dout + o];
                    }
                    out[((n * dout + o) * h + y) * wd + xx] = s;
                }
            }
        }
    }
    Tensor::new(&[bn, dout, h, wd], out)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Zero-padded cross-correlation, `w` is `[out, in/groups, kh, kw]`.
pub fn naive_conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    g: ConvGeometry,
) -> Result<Tensor<f64>> {
    let (bn, cin, h, wd) = dims4(x)?;
    let (cout, cpg, kh, kw) = match w.shape() {
        [a, b, c, d] => (*a, *b, *c, *d),
        s => return Err(shape_err!("conv weight {s:?}")),
    };
    if cin % g.groups != 0 || cout % g.groups != 0 || cin / g.groups != cpg {
        return Err(shape_err!("naive_conv2d group mismatch"));
    }
    let ho = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let wo = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let opg = cout / g.groups;
    let mut out = vec![0.0; bn * cout * ho * wo];
    for n in 0..bn {
        for o in 0..cout {
            let grp = o / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cpg {
                        let c = grp * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * g.stride + ky * g.dilation) as i64 - g.padding as i64;
                                let ix = (ox * g.stride + kx * g.dilation) as i64 - g.padding as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= wd as i64 {
                                    continue;
                                }
                                s += x.data()[((n * cin + c) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((o * cpg + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    Tensor::new(&[bn, cout, ho, wo], out)
}

pub fn naive_gelu(x: &Tensor<f64>) -> Tensor<f64> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().map(|&v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())).collect(),
    )
}

/// Normalize each spatial position over channels, then apply `gamma`/`beta`.
pub fn naive_layernorm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Result<Tensor<f64>> {
    let (bn, c, h, w) = dims4(x)?;
    let mut out = vec![0.0; x.numel()];
    for n in 0..bn {
        for p in 0..h * w {
            let idx = |ch: usize| (n * c + ch) * h * w + p;
            let mean = (0..c).map(|ch| x.data()[idx(ch)]).sum::<f64>() / c as f64;
            let var = (0..c).map(|ch| (x.data()[idx(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
            for ch in 0..c {
                out[idx(ch)] = (x.data()[idx(ch)] - mean) / (var + eps).sqrt() * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// One channel plane read at fractional `(y, x)` with clamped corners; each
/// corner weighted by the area to its opposite corner.
fn bilinear_point(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let mut s = 0.0;
    for cy in [y0, y0 + 1.0] {
        for cx in [x0, x0 + 1.0] {
            let wt = (1.0 - (y - cy).abs()) * (1.0 - (x - cx).abs());
            s += wt * plane[clampi(cy as i64, h) * w + clampi(cx as i64, w)];
        }
    }
    s
}

/// `F[B,C,H,W]` sampled at `coords[B,P,2]` (y, x) into `[B,C,P]`.
pub fn naive_bilinear(f: &Tensor<f64>, coords: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (bn, c, h, w) = dims4(f)?;
    let p = coords.shape()[1];
    let mut out = vec![0.0; bn * c * p];
    for n in 0..bn {
        for ch in 0..c {
            let plane = &f.data()[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
            for i in 0..p {
                let y = coords.data()[(n * p + i) * 2];
                let x = coords.data()[(n * p + i) * 2 + 1];
                out[(n * c + ch) * p + i] = bilinear_point(plane, h, w, y, x);
            }
        }
    }
    Tensor::new(&[bn, c, p], out)
}

/// Projection weights of an attention module in oracle form.
#[derive(Clone, Debug)]
pub struct OracleAttention {
    pub wq: Tensor<f64>,
    pub bq: Tensor<f64>,
    pub wk: Tensor<f64>,
    pub bk: Tensor<f64>,
    pub wv: Tensor<f64>,
    pub bv: Tensor<f64>,
    pub wo: Tensor<f64>,
    pub bo: Tensor<f64>,
    pub heads: usize,
}

/// Offset predictor: depthwise kxk, pointwise, GELU, pointwise to 2P channels.
#[derive(Clone, Debug)]
pub struct OracleOffsetNet {
    pub dw_w: Tensor<f64>,
    pub dw_b: Tensor<f64>,
    pub pw_w: Tensor<f64>,
    pub pw_b: Tensor<f64>,
    pub out_w: Tensor<f64>,
    pub out_b: Tensor<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OracleSupport {
    /// Non-overlapping MxM windows, bias table `(2M-1)^2`.
    Window(usize),
    /// Centered kxk neighborhood, bias table `k^2`.
    Neighborhood(usize),
}

#[derive(Clone, Debug)]
pub struct OracleGroup {
    pub support: OracleSupport,
    /// `[heads_in_group, kb, kb]`
    pub bias: Tensor<f64>,
    pub offset_net: Option<OracleOffsetNet>,
}

pub fn naive_offsets(q: &Tensor<f64>, net: &OracleOffsetNet) -> Result<Tensor<f64>> {
    let c = q.shape()[1];
    let k = net.dw_w.shape()[2];
    let dw = naive_conv2d(q, &net.dw_w, Some(&net.dw_b), ConvGeometry { stride: 1, padding: (k - 1) / 2, dilation: 1, groups: c })?;
    let one = ConvGeometry { stride: 1, padding: 0, dilation: 1, groups: 1 };
    let pw = naive_conv2d(&dw, &net.pw_w, Some(&net.pw_b), one)?;
    naive_conv2d(&naive_gelu(&pw), &net.out_w, Some(&net.out_b), one)
}

/// Core per-query attention over channel block `[c0, c0 + cg)` of the
/// projected maps. Queries come from `q`, keys/values from `k`/`v`.
#[allow(clippy::too_many_arguments)]
fn naive_attend(
    q: &Tensor<f64>,
    k: &Tensor<f64>,
    v: &Tensor<f64>,
    c0: usize,
    cg: usize,
    heads: usize,
    support: OracleSupport,
    bias: &Tensor<f64>,
    offsets: Option<&Tensor<f64>>,
    out: &mut [f64],
) -> Result<()> {
    let (bn, c, h, w) = dims4(q)?;
    let d = cg / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let kb = bias.shape()[1];
    for n in 0..bn {
        for i in 0..h {
            for j in 0..w {
                // Sampling points (y, x, bias row, bias col).
                let mut pts: Vec<(f64, f64, usize, usize)> = Vec::new();
                match support {
                    OracleSupport::Neighborhood(ks) => {
                        let r = (ks / 2) as i64;
                        for u in -r..=r {
                            for vv in -r..=r {
                                pts.push((
                                    (i as i64 + u) as f64,
                                    (j as i64 + vv) as f64,
                                    (u + r) as usize,
                                    (vv + r) as usize,
                                ));
                            }
                        }
                    }
                    OracleSupport::Window(m) => {
                        let (oy, ox) = (i - i % m, j - j % m);
                        for a in 0..m {
                            for b in 0..m {
                                pts.push((
                                    (oy + a) as f64,
                                    (ox + b) as f64,
                                    oy + a + m - 1 - i,
                                    ox + b + m - 1 - j,
                                ));
                            }
                        }
                    }
                }
                if let Some(off) = offsets {
                    let np = pts.len();
                    for (pi, p) in pts.iter_mut().enumerate() {
                        p.0 += off.data()[((n * 2 * np + 2 * pi) * h + i) * w + j];
                        p.1 += off.data()[((n * 2 * np + 2 * pi + 1) * h + i) * w + j];
                    }
                }
                for hd in 0..heads {
                    let chans: Vec<usize> = (0..d).map(|t| c0 + hd * d + t).collect();
                    let plane = |t: &Tensor<f64>, ch: usize| {
                        let s = (n * c + ch) * h * w;
                        t.data()[s..s + h * w].to_vec()
                    };
                    let mut logits = Vec::with_capacity(pts.len());
                    let mut vals: Vec<Vec<f64>> = Vec::with_capacity(pts.len());
                    for &(py, px, by, bx) in &pts {
                        let mut dot = 0.0;
                        let mut vv = Vec::with_capacity(d);
                        for &ch in &chans {
                            let qv = q.data()[((n * c + ch) * h + i) * w + j];
                            let (kv, val) = if offsets.is_some() {
                                (bilinear_point(&plane(k, ch), h, w, py, px), bilinear_point(&plane(v, ch), h, w, py, px))
                            } else {
                                let yy = clampi(py as i64, h);
                                let xx = clampi(px as i64, w);
                                (
                                    k.data()[((n * c + ch) * h + yy) * w + xx],
                                    v.data()[((n * c + ch) * h + yy) * w + xx],
                                )
                            };
                            dot += qv * kv;
                            vv.push(val);
                        }
                        logits.push(dot * scale + bias.data()[(hd * kb + by) * kb + bx]);
                        vals.push(vv);
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (t, &ch) in chans.iter().enumerate() {
                        let mut s = 0.0;
                        for (pi, vv) in vals.iter().enumerate() {
                            s += e[pi] / z * vv[t];
                        }
                        out[((n * c + ch) * h + i) * w + j] = s;
                    }
                }
            }
        }
    }
    Ok(())
}

struct Projected {
    q: Tensor<f64>,
    k: Tensor<f64>,
    v: Tensor<f64>,
}

fn project(xq: &Tensor<f64>, xkv: &Tensor<f64>, a: &OracleAttention) -> Result<Projected> {
    Ok(Projected {
        q: naive_channel_linear(xq, &a.wq, Some(&a.bq))?,
        k: naive_channel_linear(xkv, &a.wk, Some(&a.bk))?,
        v: naive_channel_linear(xkv, &a.wv, Some(&a.bv))?,
    })
}

fn single_group(
    xq: &Tensor<f64>,
    xkv: &Tensor<f64>,
    a: &OracleAttention,
    support: OracleSupport,
    bias: &Tensor<f64>,
    offsets: Option<&Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let p = project(xq, xkv, a)?;
    let c = xq.shape()[1];
    let mut y = vec![0.0; xq.numel()];
    naive_attend(&p.q, &p.k, &p.v, 0, c, a.heads, support, bias, offsets, &mut y)?;
    naive_channel_linear(&Tensor::new(xq.shape(), y)?, &a.wo, Some(&a.bo))
}

pub fn naive_window_attention(x: &Tensor<f64>, a: &OracleAttention, bias: &Tensor<f64>, m: usize) -> Result<Tensor<f64>> {
    let (_, _, h, w) = dims4(x)?;
    if h % m != 0 || w % m != 0 {
        return Err(shape_err!("window {m} does not tile {h}x{w}"));
    }
    single_group(x, x, a, OracleSupport::Window(m), bias, None)
}

pub fn naive_sliding_attention(x: &Tensor<f64>, a: &OracleAttention, bias: &Tensor<f64>, k: usize) -> Result<Tensor<f64>> {
    single_group(x, x, a, OracleSupport::Neighborhood(k), bias, None)
}

/// Sliding attention whose queries come from `xq` and keys/values from `xkv`.
pub fn naive_sliding_cross(
    xq: &Tensor<f64>,
    xkv: &Tensor<f64>,
    a: &OracleAttention,
    bias: &Tensor<f64>,
    k: usize,
) -> Result<Tensor<f64>> {
    single_group(xq, xkv, a, OracleSupport::Neighborhood(k), bias, None)
}

/// Deformable sliding attention with an explicit offset field `[B, 2k^2, H, W]`.
pub fn naive_dswin(
    x: &Tensor<f64>,
    a: &OracleAttention,
    bias: &Tensor<f64>,
    offsets: &Tensor<f64>,
    k: usize,
) -> Result<Tensor<f64>> {
    single_group(x, x, a, OracleSupport::Neighborhood(k), bias, Some(offsets))
}

/// Multi-group attention: each group owns a contiguous channel block, its
/// own support and bias, and optionally an offset net fed by the full query map.
pub fn naive_ms_dswin(x: &Tensor<f64>, a: &OracleAttention, groups: &[OracleGroup]) -> Result<Tensor<f64>> {
    let p = project(x, x, a)?;
    let c = x.shape()[1];
    let g = groups.len();
    let (cg, hg) = (c / g, a.heads / g);
    let mut y = vec![0.0; x.numel()];
    for (gi, grp) in groups.iter().enumerate() {
        let offsets = grp.offset_net.as_ref().map(|net| naive_offsets(&p.q, net)).transpose()?;
        naive_attend(&p.q, &p.k, &p.v, gi * cg, cg, hg, grp.support, &grp.bias, offsets.as_ref(), &mut y)?;
    }
    naive_channel_linear(&Tensor::new(x.shape(), y)?, &a.wo, Some(&a.bo))
}

#[derive(Clone, Debug)]
pub struct OracleConv {
    pub w: Tensor<f64>,
    pub b: Tensor<f64>,
    pub geometry: ConvGeometry,
}

impl OracleConv {
    fn apply(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        naive_conv2d(x, &self.w, Some(&self.b), self.geometry)
    }
}

#[derive(Clone, Debug)]
pub enum OracleFfn {
    Gated { expand: OracleConv, branches: Vec<OracleConv>, fuse: OracleConv, project: OracleConv },
    Plain { fc1: OracleConv, fc2: OracleConv },
}

fn naive_mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect())
}

fn naive_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect())
}

/// Expand, split into content/gate halves, multi-scale depthwise branches on
/// the gate, fuse, GELU, gate the content, project.
pub fn naive_ffn(x: &Tensor<f64>, ffn: &OracleFfn) -> Result<Tensor<f64>> {
    match ffn {
        OracleFfn::Plain { fc1, fc2 } => fc2.apply(&naive_gelu(&fc1.apply(x)?)),
        OracleFfn::Gated { expand, branches, fuse, project } => {
            let e = expand.apply(x)?;
            let half = e.shape()[1] / 2;
            let content = e.narrow(1, 0, half)?;
            let gate = e.narrow(1, half, half)?;
            let outs = branches.iter().map(|b| b.apply(&gate)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Tensor<f64>> = outs.iter().collect();
            let fused = naive_gelu(&fuse.apply(&Tensor::concat(&refs, 1)?)?);
            project.apply(&naive_mul(&content, &fused))
        }
    }
}

#[derive(Clone, Debug)]
pub struct OracleBlock {
    pub norm1: (Tensor<f64>, Tensor<f64>),
    pub norm2: (Tensor<f64>, Tensor<f64>),
    pub eps: f64,
    pub attention: OracleAttention,
    pub groups: Vec<OracleGroup>,
    pub ffn: OracleFfn,
}

/// Pre-norm residual block: `y = x + attn(ln1 x)`, `out = y + ffn(ln2 y)`.
pub fn naive_block(x: &Tensor<f64>, b: &OracleBlock) -> Result<Tensor<f64>> {
    let a = naive_ms_dswin(&naive_layernorm(x, &b.norm1.0, &b.norm1.1, b.eps)?, &b.attention, &b.groups)?;
    let y = naive_add(x, &a);
    let f = naive_ffn(&naive_layernorm(&y, &b.norm2.0, &b.norm2.1, b.eps)?, &b.ffn)?;
    Ok(naive_add(&y, &f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eye(c: usize) -> Tensor<f64> {
        Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn identity_conv_is_identity() {
        let x = Tensor::from_fn(&[1, 2, 3, 3], |i| i as f64 * 0.5 - 2.0).unwrap();
        let w = eye(2).reshape(&[2, 2, 1, 1]).unwrap();
        let y = naive_conv2d(&x, &w, None, ConvGeometry { stride: 1, padding: 0, dilation: 1, groups: 1 }).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn delta_localizes_kernel_footprint() {
        let mut xs = vec![0.0; 25];
        xs[12] = 1.0;
        let x = Tensor::new(&[1, 1, 5, 5], xs).unwrap();
        let w = Tensor::from_fn(&[1, 1, 3, 3], |i| (i + 1) as f64).unwrap();
        let y = naive_conv2d(&x, &w, None, ConvGeometry { stride: 1, padding: 1, dilation: 1, groups: 1 }).unwrap();
        // Cross-correlation flips the footprint around the delta.
        for (i, v) in y.data().iter().enumerate() {
            let (r, c) = (i / 5, i % 5);
            let expected = if (1..=3).contains(&r) && (1..=3).contains(&c) { (9 - ((r - 1) * 3 + (c - 1))) as f64 } else { 0.0 };
            assert_eq!(*v, expected, "at {r},{c}");
        }
    }

    #[test]
    fn finite_diff_basics() {
        let x = Tensor::new(&[1], vec![3.0]).unwrap();
        let g = finite_diff(|t| t.data()[0] * t.data()[0], &x, 1e-4);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
        let coeffs = [2.0, -3.0, 0.5];
        let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = finite_diff(|t| t.data().iter().zip(coeffs).map(|(a, b)| a * b).sum(), &x, 1e-3);
        for (a, b) in g.data().iter().zip(coeffs) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    fn rand_attention(c: usize, heads: usize, seed: u64) -> OracleAttention {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let mut m = |shape: &[usize]| Tensor::from_fn(shape, |_| next()).unwrap();
        OracleAttention {
            wq: m(&[c, c]),
            bq: m(&[c]),
            wk: m(&[c, c]),
            bk: m(&[c]),
            wv: m(&[c, c]),
            bv: m(&[c]),
            wo: m(&[c, c]),
            bo: m(&[c]),
            heads,
        }
    }

    #[test]
    fn zero_offsets_dswin_equals_sliding_exactly() {
        let a = rand_attention(4, 2, 3);
        let x = Tensor::from_fn(&[1, 4, 5, 5], |i| ((i * 37) % 11) as f64 / 11.0 - 0.5).unwrap();
        let bias = Tensor::from_fn(&[2, 3, 3], |i| i as f64 * 0.01).unwrap();
        let off = Tensor::zeros(&[1, 18, 5, 5]).unwrap();
        let s = naive_sliding_attention(&x, &a, &bias, 3).unwrap();
        let d = naive_dswin(&x, &a, &bias, &off, 3).unwrap();
        assert_eq!(s.data(), d.data());
    }

    #[test]
    fn single_pixel_reduces_to_value_projection() {
        let a = rand_attention(3, 1, 9);
        let x = Tensor::new(&[1, 3, 1, 1], vec![0.2, -0.4, 0.9]).unwrap();
        let bias = Tensor::from_fn(&[1, 3, 3], |i| i as f64).unwrap();
        let y = naive_sliding_attention(&x, &a, &bias, 3).unwrap();
        let v = naive_channel_linear(&x, &a.wv, Some(&a.bv)).unwrap();
        let expected = naive_channel_linear(&v, &a.wo, Some(&a.bo)).unwrap();
        assert!(y.max_abs_diff(&expected).unwrap() < 1e-14);
    }

    #[test]
    fn bilinear_point_cases() {
        let plane = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_point(&plane, 2, 2, 0.5, 0.5), 2.5);
        assert_eq!(bilinear_point(&plane, 2, 2, 1.0, 0.0), 3.0);
        assert_eq!(bilinear_point(&plane, 2, 2, -3.0, 9.0), 2.0);
    }
}

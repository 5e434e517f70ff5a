//! Fused local attention over a per-query set of sampling points.
//!
//! For query `(i, j)` and point `p` the key and value are read at
//! `anchor_p(i, j) + offset_p(i, j)` through the bilinear sampler, the logit
//! is `q . k / sqrt(d) + bias[head, slot_p]`, and the output is the
//! softmax-weighted sum of sampled values. Without an offset field reads
//! are exact integer gathers with border replication.
//!
//! Internally every map is converted to position-major (HWC) layout so a
//! sample's channels are contiguous.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err, Result};
use crate::nn::Bilinear;
use crate::tensor::{dot, Scalar, Tensor};

/// Sampling grid of one head group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Support {
    /// Non-overlapping `size x size` windows; bias indexed by relative
    /// position on a `(2 size - 1)^2` table.
    Window { size: usize },
    /// `kernel x kernel` neighborhood centered on the query; bias indexed by
    /// slot on a `kernel^2` table.
    Neighborhood { kernel: usize },
}

impl Support {
    pub fn points(self) -> usize {
        match self {
            Support::Window { size } => size * size,
            Support::Neighborhood { kernel } => kernel * kernel,
        }
    }

    /// Side length of the bias table.
    pub fn bias_extent(self) -> usize {
        match self {
            Support::Window { size } => 2 * size - 1,
            Support::Neighborhood { kernel } => kernel,
        }
    }

    /// Side of the square region a query's points are drawn from.
    pub fn extent(self) -> usize {
        match self {
            Support::Window { size } => size,
            Support::Neighborhood { kernel } => kernel,
        }
    }

    pub fn validate(self, h: usize, w: usize) -> Result<()> {
        match self {
            Support::Neighborhood { kernel } if kernel % 2 == 0 => {
                Err(param_err!("neighborhood kernel must be odd, got {kernel}"))
            }
            Support::Window { size } if size == 0 || !h.is_multiple_of(size) || !w.is_multiple_of(size) => {
                Err(shape_err!("window size {size} does not tile a {h}x{w} map"))
            }
            _ => Ok(()),
        }
    }

    /// Anchor row/col and flat bias slot of point `p` for query `(i, j)`;
    /// closed form of the incremental walk in `Dims::samples`.
    #[cfg(test)]
    fn anchor(self, i: usize, j: usize, p: usize) -> (i64, i64, usize) {
        match self {
            Support::Neighborhood { kernel } => {
                let r = (kernel / 2) as i64;
                let (u, v) = (p / kernel, p % kernel);
                (i as i64 + u as i64 - r, j as i64 + v as i64 - r, p)
            }
            Support::Window { size } => {
                let (a, b) = (p / size, p % size);
                let (y, x) = (i - i % size + a, j - j % size + b);
                let ext = 2 * size - 1;
                (y as i64, x as i64, (y + size - 1 - i) * ext + (x + size - 1 - j))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Dims {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    d: usize,
    points: usize,
    slots: usize,
}

fn to_hwc(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for ch in 0..c {
            for p in 0..hw {
                out[(n * hw + p) * c + ch] = x[(n * c + ch) * hw + p];
            }
        }
    }
    out
}

fn from_hwc(x: &[f64], b: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for n in 0..b {
        for p in 0..hw {
            for ch in 0..c {
                out[(n * c + ch) * hw + p] = x[(n * hw + p) * c + ch];
            }
        }
    }
    out
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, v) in dst.iter_mut().zip(x) {
        *d += a * v;
    }
}

/// Inputs of one kernel invocation, all position-major.
struct Inputs<'a> {
    q: &'a [f64],
    k: &'a [f64],
    v: &'a [f64],
    bias: &'a [f64],
    /// `[B, H, W, 2P]` as `(dy, dx)` pairs
    offsets: Option<&'a [f64]>,
}

impl Dims {
    /// Sampling points of query `(i, j)` with their bias slots, in support order.
    fn samples(&self, support: Support, offsets: Option<&[f64]>, n: usize, i: usize, j: usize, out: &mut Vec<(Bilinear, usize)>) {
        out.clear();
        let base = ((n * self.h + i) * self.w + j) * 2 * self.points;
        let ext = support.extent();
        // Top-left point and the bias slot of that point.
        let (y0, x0, slot0, row_stride) = match support {
            Support::Neighborhood { kernel } => {
                let r = (kernel / 2) as i64;
                (i as i64 - r, j as i64 - r, 0, kernel)
            }
            Support::Window { size } => {
                let (oy, ox) = (i - i % size, j - j % size);
                let e = 2 * size - 1;
                (oy as i64, ox as i64, (oy + size - 1 - i) * e + (ox + size - 1 - j), e)
            }
        };
        for u in 0..ext {
            for v in 0..ext {
                let (y, x) = (y0 + u as i64, x0 + v as i64);
                let s = match offsets {
                    Some(off) => {
                        let p = base + 2 * (u * ext + v);
                        Bilinear::new(y as f64 + off[p], x as f64 + off[p + 1], self.h, self.w)
                    }
                    None => Bilinear::at(y, x, self.h, self.w),
                };
                out.push((s, slot0 + u * row_stride + v));
            }
        }
    }
}

/// Forward pass; returns the HWC output and the attention weights laid out
/// `[B, H*W, heads, P]`.
fn forward(dm: &Dims, support: Support, inp: &Inputs<'_>) -> (Vec<f64>, Vec<f64>) {
    match dm.d {
        4 => forward_d::<4>(dm, support, inp),
        8 => forward_d::<8>(dm, support, inp),
        16 => forward_d::<16>(dm, support, inp),
        _ => forward_d::<0>(dm, support, inp),
    }
}

/// `D` is the head width when known at compile time, 0 otherwise; fixed
/// widths let the per-corner dot products unroll.
fn forward_d<const D: usize>(dm: &Dims, support: Support, inp: &Inputs<'_>) -> (Vec<f64>, Vec<f64>) {
    let Dims { b, c, h, w, heads, d, points, slots } = *dm;
    let d = if D == 0 { d } else { D };
    let hw = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut y = vec![0.0; b * hw * c];
    let mut alpha = vec![0.0; b * hw * heads * points];
    let mut samples = Vec::with_capacity(points);
    let mut logits = vec![0.0; points];
    for n in 0..b {
        let kb = &inp.k[n * hw * c..(n + 1) * hw * c];
        let vb = &inp.v[n * hw * c..(n + 1) * hw * c];
        for i in 0..h {
            for j in 0..w {
                let pos = n * hw + i * w + j;
                dm.samples(support, inp.offsets, n, i, j, &mut samples);
                for hd in 0..heads {
                    let ch = hd * d..(hd + 1) * d;
                    let q = &inp.q[pos * c..][ch.clone()];
                    for (p, (s, slot)) in samples.iter().enumerate() {
                        let mut acc = 0.0;
                        for t in 0..4 {
                            if s.wt[t] != 0.0 {
                                acc += s.wt[t] * dot(q, &kb[s.idx[t] * c..][ch.clone()]);
                            }
                        }
                        logits[p] = acc * scale + inp.bias[hd * slots + slot];
                    }
                    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let a = &mut alpha[(pos * heads + hd) * points..][..points];
                    let mut z = 0.0;
                    for (a, l) in a.iter_mut().zip(&logits) {
                        *a = (l - mx).exp();
                        z += *a;
                    }
                    let out = &mut y[pos * c..][ch.clone()];
                    for (p, (s, _)) in samples.iter().enumerate() {
                        a[p] /= z;
                        for t in 0..4 {
                            if s.wt[t] != 0.0 {
                                axpy(out, a[p] * s.wt[t], &vb[s.idx[t] * c..][ch.clone()]);
                            }
                        }
                    }
                }
            }
        }
    }
    (y, alpha)
}

struct Backward {
    gq: Vec<f64>,
    gk: Vec<f64>,
    gv: Vec<f64>,
    gbias: Vec<f64>,
    goff: Option<Vec<f64>>,
}

fn backward(dm: &Dims, support: Support, inp: &Inputs<'_>, alpha: &[f64], gy: &[f64]) -> Backward {
    match dm.d {
        4 => backward_d::<4>(dm, support, inp, alpha, gy),
        8 => backward_d::<8>(dm, support, inp, alpha, gy),
        16 => backward_d::<16>(dm, support, inp, alpha, gy),
        _ => backward_d::<0>(dm, support, inp, alpha, gy),
    }
}

fn backward_d<const D: usize>(dm: &Dims, support: Support, inp: &Inputs<'_>, alpha: &[f64], gy: &[f64]) -> Backward {
    let Dims { b, c, h, w, heads, d, points, slots } = *dm;
    let d = if D == 0 { d } else { D };
    let hw = h * w;
    let scale = 1.0 / (d as f64).sqrt();
    let mut g = Backward {
        gq: vec![0.0; inp.q.len()],
        gk: vec![0.0; inp.k.len()],
        gv: vec![0.0; inp.v.len()],
        gbias: vec![0.0; inp.bias.len()],
        goff: inp.offsets.map(|o| vec![0.0; o.len()]),
    };
    let mut samples = Vec::with_capacity(points);
    // Per point: q.K and gy.V at each corner.
    let mut qk = vec![[0.0f64; 4]; points];
    let mut gv_dot = vec![[0.0f64; 4]; points];
    let mut gl = vec![0.0; points];
    for n in 0..b {
        let nb = n * hw * c;
        for i in 0..h {
            for j in 0..w {
                let pos = n * hw + i * w + j;
                dm.samples(support, inp.offsets, n, i, j, &mut samples);
                let obase = pos * 2 * points;
                for hd in 0..heads {
                    let ch = hd * d..(hd + 1) * d;
                    let q = &inp.q[pos * c..][ch.clone()];
                    let gyh = &gy[pos * c..][ch.clone()];
                    let a = &alpha[(pos * heads + hd) * points..][..points];
                    let full = inp.offsets.is_some();
                    let mut mean_ga = 0.0;
                    for (p, (s, _)) in samples.iter().enumerate() {
                        let mut ga = 0.0;
                        for t in 0..4 {
                            if full || s.wt[t] != 0.0 {
                                qk[p][t] = dot(q, &inp.k[nb + s.idx[t] * c..][ch.clone()]);
                                gv_dot[p][t] = dot(gyh, &inp.v[nb + s.idx[t] * c..][ch.clone()]);
                                ga += s.wt[t] * gv_dot[p][t];
                            }
                        }
                        gl[p] = ga;
                        mean_ga += a[p] * ga;
                    }
                    for p in 0..points {
                        gl[p] = a[p] * (gl[p] - mean_ga);
                    }
                    for (p, (s, slot)) in samples.iter().enumerate() {
                        g.gbias[hd * slots + slot] += gl[p];
                        let lg = gl[p] * scale;
                        for t in 0..4 {
                            if s.wt[t] == 0.0 {
                                continue;
                            }
                            let kidx = nb + s.idx[t] * c;
                            axpy(&mut g.gq[pos * c..][ch.clone()], lg * s.wt[t], &inp.k[kidx..][ch.clone()]);
                            axpy(&mut g.gk[kidx..][ch.clone()], lg * s.wt[t], q);
                            axpy(&mut g.gv[kidx..][ch.clone()], a[p] * s.wt[t], gyh);
                        }
                        if let Some(goff) = g.goff.as_mut() {
                            let (ly, lx) = (s.ly, s.lx);
                            let slope_y = |v: &[f64; 4]| (1.0 - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]);
                            let slope_x = |v: &[f64; 4]| (1.0 - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]);
                            goff[obase + 2 * p] += lg * slope_y(&qk[p]) + a[p] * slope_y(&gv_dot[p]);
                            goff[obase + 2 * p + 1] += lg * slope_x(&qk[p]) + a[p] * slope_x(&gv_dot[p]);
                        }
                    }
                }
            }
        }
    }
    g
}

fn dims_of<T: Scalar>(tape: &Tape<T>, q: Var, k: Var, v: Var, bias: Var, offsets: Option<Var>, support: Support, heads: usize) -> Result<Dims> {
    let qs = tape.value(q).shape();
    let &[b, c, h, w] = qs else {
        return Err(shape_err!("attention expects NCHW queries, got {qs:?}"));
    };
    for t in [k, v] {
        if tape.value(t).shape() != qs {
            return Err(shape_err!("attention keys/values {:?} vs queries {qs:?}", tape.value(t).shape()));
        }
    }
    if heads == 0 || c % heads != 0 {
        return Err(param_err!("{c} channels not divisible into {heads} heads"));
    }
    support.validate(h, w)?;
    let (points, ext) = (support.points(), support.bias_extent());
    if tape.value(bias).shape() != [heads, ext, ext] {
        return Err(shape_err!("bias table {:?}, expected [{heads}, {ext}, {ext}]", tape.value(bias).shape()));
    }
    if let Some(o) = offsets {
        if tape.value(o).shape() != [b, 2 * points, h, w] {
            return Err(shape_err!("offset field {:?}, expected [{b}, {}, {h}, {w}]", tape.value(o).shape(), 2 * points));
        }
    }
    Ok(Dims { b, c, h, w, heads, d: c / heads, points, slots: ext * ext })
}

/// Record one fused attention call.
///
/// `q`, `k`, `v` are `[B, C, H, W]` maps whose channels split evenly into
/// `heads`; `bias` is `[heads, e, e]` with `e = support.bias_extent()`;
/// `offsets`, when present, is `[B, 2P, H, W]` with channel `2p` holding the
/// row offset and `2p + 1` the column offset of point `p`.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    bias: Var,
    offsets: Option<Var>,
    support: Support,
    heads: usize,
) -> Result<Var> {
    let dm = dims_of(tape, q, k, v, bias, offsets, support, heads)?;
    let (y, alpha) = run_forward::<T>(&dm, support, tape.value(q), tape.value(k), tape.value(v), tape.value(bias), offsets.map(|o| tape.value(o)));
    let out = Tensor::from_f64s(vec![dm.b, dm.c, dm.h, dm.w], from_hwc(&y, dm.b, dm.c, dm.h * dm.w));
    let mut inputs = vec![q, k, v, bias];
    inputs.extend(offsets);
    let name = match (support, offsets.is_some()) {
        (Support::Window { .. }, false) => "window_attention",
        (Support::Window { .. }, true) => "deformable_window_attention",
        (Support::Neighborhood { .. }, false) => "sliding_attention",
        (Support::Neighborhood { .. }, true) => "dswin_attention",
    };
    tape.record(name, &inputs, out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Result<Vec<Option<Tensor<T>>>> {
        let hw = dm.h * dm.w;
        let q = to_hwc(&ins[0].to_f64_vec(), dm.b, dm.c, hw);
        let k = to_hwc(&ins[1].to_f64_vec(), dm.b, dm.c, hw);
        let v = to_hwc(&ins[2].to_f64_vec(), dm.b, dm.c, hw);
        let bias = ins[3].to_f64_vec();
        let off = ins.get(4).map(|o| to_hwc(&o.to_f64_vec(), dm.b, 2 * dm.points, hw));
        let gy = to_hwc(&g.to_f64_vec(), dm.b, dm.c, hw);
        let inp = Inputs { q: &q, k: &k, v: &v, bias: &bias, offsets: off.as_deref() };
        let r = backward(&dm, support, &inp, &alpha, &gy);
        let back = |x: Vec<f64>, ch: usize, shape: &[usize]| Tensor::from_f64s(shape.to_vec(), from_hwc(&x, dm.b, ch, hw));
        let mut grads = vec![
            needs[0].then(|| back(r.gq, dm.c, ins[0].shape())),
            needs[1].then(|| back(r.gk, dm.c, ins[1].shape())),
            needs[2].then(|| back(r.gv, dm.c, ins[2].shape())),
            needs[3].then(|| Tensor::from_f64s(ins[3].shape().to_vec(), r.gbias)),
        ];
        if ins.len() == 5 {
            grads.push(needs[4].then(|| back(r.goff.unwrap_or_default(), 2 * dm.points, ins[4].shape())));
        }
        Ok(grads)
    })
}

fn run_forward<T: Scalar>(
    dm: &Dims,
    support: Support,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    offsets: Option<&Tensor<T>>,
) -> (Vec<f64>, Vec<f64>) {
    let hw = dm.h * dm.w;
    let q = to_hwc(&q.to_f64_vec(), dm.b, dm.c, hw);
    let k = to_hwc(&k.to_f64_vec(), dm.b, dm.c, hw);
    let v = to_hwc(&v.to_f64_vec(), dm.b, dm.c, hw);
    let bias = bias.to_f64_vec();
    let off = offsets.map(|o| to_hwc(&o.to_f64_vec(), dm.b, 2 * dm.points, hw));
    forward(dm, support, &Inputs { q: &q, k: &k, v: &v, bias: &bias, offsets: off.as_deref() })
}

/// Attention weights `[B, H, W, heads, P]` of the same computation as [`attend`].
#[allow(clippy::too_many_arguments)]
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    bias: &Tensor<T>,
    offsets: Option<&Tensor<T>>,
    support: Support,
    heads: usize,
) -> Result<Tensor<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = [q, k, v, bias].into_iter().map(|t| tape.constant(t.clone())).collect();
    let o = offsets.map(|o| tape.constant(o.clone()));
    let dm = dims_of(&tape, vars[0], vars[1], vars[2], vars[3], o, support, heads)?;
    let (_, alpha) = run_forward(&dm, support, q, k, v, bias, offsets);
    Ok(Tensor::from_parts(vec![dm.b, dm.h, dm.w, dm.heads, dm.points], alpha))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_anchor_slots() {
        let s = Support::Window { size: 2 };
        // query (1,1) in the first window: point 0 is (0,0), relative (-1,-1) -> slot 0
        assert_eq!(s.anchor(1, 1, 0), (0, 0, 0));
        // query (0,0): point 3 is (1,1), relative (+1,+1) -> slot 8 on a 3x3 table
        assert_eq!(s.anchor(0, 0, 3), (1, 1, 8));
        // query (2,3) lives in window origin (2,2)
        assert_eq!(s.anchor(2, 3, 1), (2, 3, 4));
    }

    #[test]
    fn neighborhood_anchor_slots() {
        let s = Support::Neighborhood { kernel: 3 };
        assert_eq!(s.anchor(0, 0, 0), (-1, -1, 0));
        assert_eq!(s.anchor(4, 2, 4), (4, 2, 4));
        assert_eq!(s.anchor(4, 2, 8), (5, 3, 8));
    }

    #[test]
    fn sample_walk_matches_anchors() {
        for support in [Support::Neighborhood { kernel: 5 }, Support::Window { size: 3 }] {
            let points = support.points();
            let dm = Dims { b: 1, c: 1, h: 6, w: 9, heads: 1, d: 1, points, slots: 0 };
            let mut out = Vec::new();
            for i in 0..6 {
                for j in 0..9 {
                    dm.samples(support, None, 0, i, j, &mut out);
                    for (p, (s, slot)) in out.iter().enumerate() {
                        let (y, x, want) = support.anchor(i, j, p);
                        let (y, x) = (y.clamp(0, 5) as usize, x.clamp(0, 8) as usize);
                        assert_eq!((s.idx[0], *slot), (y * 9 + x, want));
                    }
                }
            }
        }
    }

    #[test]
    fn support_validation() {
        assert!(matches!(Support::Neighborhood { kernel: 4 }.validate(8, 8), Err(crate::Error::Parameter(_))));
        assert!(matches!(Support::Window { size: 3 }.validate(8, 8), Err(crate::Error::Shape(_))));
        assert!(Support::Window { size: 4 }.validate(8, 8).is_ok());
    }

    #[test]
    fn layout_round_trip() {
        let x: Vec<f64> = (0..24).map(|v| v as f64).collect();
        assert_eq!(from_hwc(&to_hwc(&x, 2, 3, 4), 2, 3, 4), x);
    }
}

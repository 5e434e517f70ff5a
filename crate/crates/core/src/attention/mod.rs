//! Local self-attention layers built on one fused kernel: the windowed
//! baseline, sliding neighborhood attention, and deformable sliding
//! attention with one kernel size per head group.

mod kernel;

pub use kernel::{attend, attention_weights, Support};

use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err, Error, Result};
use crate::nn::{channel_linear, concat, gelu, narrow, Conv2d, Conv2dGeometry};
use crate::oracle::{OracleAttention, OracleGroup, OracleOffsetNet, OracleSupport};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Predicts a `[B, 2P, H, W]` offset field from the projected queries:
/// depthwise conv, pointwise conv, GELU, pointwise conv to `2P` channels.
/// The last layer starts at zero so a fresh net predicts no displacement.
#[derive(Clone, Debug)]
pub struct OffsetNet {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
    pub project: Conv2d,
    pub points: usize,
}

/// Depthwise kernel of the offset net: the support extent, rounded down to odd.
fn offset_kernel(s: Support) -> usize {
    let e = s.extent();
    if e % 2 == 1 {
        e
    } else {
        e - 1
    }
}

impl OffsetNet {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize, support: Support, seed: u64) -> Result<Self> {
        let (k, p, c) = (offset_kernel(support), support.points(), channels);
        let mut conv = |name: &str, shape: [usize; 4], init: Init, geometry: Conv2dGeometry| -> Result<Conv2d> {
            Ok(Conv2d {
                weight: store.add(&format!("{prefix}.{name}.weight"), &shape, init, seed)?,
                bias: Some(store.add(&format!("{prefix}.{name}.bias"), &[shape[0]], Init::Zeros, seed)?),
                geometry,
            })
        };
        Ok(Self {
            depthwise: conv("dw", [c, 1, k, k], Init::FanIn(k * k), Conv2dGeometry::same(k, 1, c))?,
            pointwise: conv("pw", [c, c, 1, 1], Init::FanIn(c), Conv2dGeometry::POINTWISE)?,
            project: conv("project", [2 * p, c, 1, 1], Init::Zeros, Conv2dGeometry::POINTWISE)?,
            points: p,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, q: Var) -> Result<Var> {
        let h = self.depthwise.forward(tape, p, q)?;
        let h = self.pointwise.forward(tape, p, h)?;
        let h = gelu(tape, h)?;
        self.project.forward(tape, p, h)
    }

    fn to_oracle<T: Scalar>(&self, store: &ParamStore<T>) -> OracleOffsetNet {
        let w = |c: &Conv2d| store.get(c.weight).cast();
        let b = |c: &Conv2d| store.get(c.bias.expect("offset convs carry a bias")).cast();
        OracleOffsetNet {
            dw_w: w(&self.depthwise),
            dw_b: b(&self.depthwise),
            pw_w: w(&self.pointwise),
            pw_b: b(&self.pointwise),
            out_w: w(&self.project),
            out_b: b(&self.project),
        }
    }
}

/// One head group: a contiguous block of heads sharing a support.
#[derive(Clone, Debug)]
pub struct HeadGroup {
    pub support: Support,
    /// `[heads, e, e]`, `e = support.bias_extent()`
    pub bias: ParamId,
    pub offset_net: Option<OffsetNet>,
}

/// Where the sampling displacements come from.
#[derive(Clone, Copy, Debug)]
pub enum OffsetMode<'a> {
    /// Each group's offset net, if it has one.
    Predicted,
    /// Integer reads only, regardless of offset nets.
    Disabled,
    /// Caller-supplied `[B, 2P, H, W]` field per group.
    Given(&'a [Option<Var>]),
}

/// Projections plus per-group supports of one attention layer.
///
/// Projection weights are `[C, C]` applied over channels; heads split the
/// channels evenly and groups take contiguous runs of heads.
#[derive(Clone, Debug)]
pub struct Attention {
    pub channels: usize,
    pub heads: usize,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub groups: Vec<HeadGroup>,
}

impl Attention {
    /// Register a layer's parameters under `prefix`. With `deformable` every
    /// group gets an offset net.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        supports: &[Support],
        deformable: bool,
        seed: u64,
    ) -> Result<Self> {
        if supports.is_empty() {
            return Err(param_err!("attention needs at least one head group"));
        }
        if heads == 0 || !channels.is_multiple_of(heads) {
            return Err(param_err!("{channels} channels do not split into {heads} heads"));
        }
        if !heads.is_multiple_of(supports.len()) {
            return Err(param_err!("{heads} heads do not split into {} groups", supports.len()));
        }
        for s in supports {
            match *s {
                Support::Neighborhood { kernel } if kernel < 3 || kernel % 2 == 0 => {
                    return Err(param_err!("neighborhood kernel must be odd and >= 3, got {kernel}"));
                }
                Support::Window { size: 0 } => return Err(param_err!("window size must be positive")),
                _ => {}
            }
        }
        let c = channels;
        let mut lin = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.add(&format!("{prefix}.{name}.weight"), &[c, c], Init::FanIn(c), seed)?,
                store.add(&format!("{prefix}.{name}.bias"), &[c], Init::Zeros, seed)?,
            ))
        };
        let (wq, bq) = lin("q")?;
        let (wk, bk) = lin("k")?;
        let (wv, bv) = lin("v")?;
        let (wo, bo) = lin("out")?;
        let hg = heads / supports.len();
        let mut groups = Vec::with_capacity(supports.len());
        for (g, &support) in supports.iter().enumerate() {
            let e = support.bias_extent();
            let bias = store.add(&format!("{prefix}.g{g}.rel_bias"), &[hg, e, e], Init::Zeros, seed)?;
            let offset_net =
                if deformable { Some(OffsetNet::new(store, &format!("{prefix}.g{g}.offset"), c, support, seed)?) } else { None };
            groups.push(HeadGroup { support, bias, offset_net });
        }
        Ok(Self { channels, heads, wq, bq, wk, bk, wv, bv, wo, bo, groups })
    }

    pub fn is_deformable(&self) -> bool {
        self.groups.iter().any(|g| g.offset_net.is_some())
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with(tape, p, x, OffsetMode::Predicted)?.0)
    }

    /// Forward pass also returning the offset field used by each group.
    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: OffsetMode<'_>,
    ) -> Result<(Var, Vec<Option<Var>>)> {
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(shape_err!("attention over {} channels got input {shape:?}", self.channels));
        }
        let q = channel_linear(tape, x, p.var(self.wq), Some(p.var(self.bq)))?;
        let k = channel_linear(tape, x, p.var(self.wk), Some(p.var(self.bk)))?;
        let v = channel_linear(tape, x, p.var(self.wv), Some(p.var(self.bv)))?;
        let ng = self.groups.len();
        if let OffsetMode::Given(fields) = mode {
            if fields.len() != ng {
                return Err(shape_err!("{} offset fields for {ng} groups", fields.len()));
            }
        }
        let (cg, hg) = (self.channels / ng, self.heads / ng);
        let mut outs = Vec::with_capacity(ng);
        let mut used = Vec::with_capacity(ng);
        for (g, grp) in self.groups.iter().enumerate() {
            let offsets = match mode {
                OffsetMode::Predicted => grp.offset_net.as_ref().map(|net| net.forward(tape, p, q)).transpose()?,
                OffsetMode::Disabled => None,
                OffsetMode::Given(fields) => fields[g],
            };
            let slice = |tape: &mut Tape<T>, t: Var| if ng == 1 { Ok(t) } else { narrow(tape, t, 1, g * cg, cg) };
            let (qg, kg, vg) = (slice(tape, q)?, slice(tape, k)?, slice(tape, v)?);
            outs.push(attend(tape, qg, kg, vg, p.var(grp.bias), offsets, grp.support, hg)?);
            used.push(offsets);
        }
        let y = if ng == 1 { outs[0] } else { concat(tape, &outs, 1)? };
        Ok((channel_linear(tape, y, p.var(self.wo), Some(p.var(self.bo)))?, used))
    }

    /// Copy this layer's weights into the oracle's plain-tensor form.
    pub fn to_oracle<T: Scalar>(&self, store: &ParamStore<T>) -> (OracleAttention, Vec<OracleGroup>) {
        let t = |id: ParamId| store.get(id).cast::<f64>();
        let attn = OracleAttention {
            wq: t(self.wq),
            bq: t(self.bq),
            wk: t(self.wk),
            bk: t(self.bk),
            wv: t(self.wv),
            bv: t(self.bv),
            wo: t(self.wo),
            bo: t(self.bo),
            heads: self.heads,
        };
        let groups = self
            .groups
            .iter()
            .map(|g| OracleGroup {
                support: match g.support {
                    Support::Window { size } => OracleSupport::Window(size),
                    Support::Neighborhood { kernel } => OracleSupport::Neighborhood(kernel),
                },
                bias: t(g.bias),
                offset_net: g.offset_net.as_ref().map(|n| n.to_oracle(store)),
            })
            .collect();
        (attn, groups)
    }
}

fn expect_single(attn: &Attention, what: &str) -> Result<Support> {
    match attn.groups.as_slice() {
        [g] => Ok(g.support),
        gs => Err(param_err!("{what} expects one head group, layer has {}", gs.len())),
    }
}

/// Self-attention inside non-overlapping windows; `H` and `W` must be
/// multiples of the window size.
pub fn window_attention_baseline<T: Scalar>(tape: &mut Tape<T>, p: &Bound, attn: &Attention, x: Var) -> Result<Var> {
    match expect_single(attn, "window attention")? {
        Support::Window { .. } => Ok(attn.forward_with(tape, p, x, OffsetMode::Disabled)?.0),
        s => Err(param_err!("window attention on a {s:?} layer")),
    }
}

/// Every query attends to its centered neighborhood with border replication.
pub fn sliding_window_attention<T: Scalar>(tape: &mut Tape<T>, p: &Bound, attn: &Attention, x: Var) -> Result<Var> {
    if let Some(g) = attn.groups.iter().find(|g| !matches!(g.support, Support::Neighborhood { .. })) {
        return Err(param_err!("sliding attention on a {:?} group", g.support));
    }
    Ok(attn.forward_with(tape, p, x, OffsetMode::Disabled)?.0)
}

/// Single-group deformable sliding attention with predicted offsets.
pub fn dswin_attention<T: Scalar>(tape: &mut Tape<T>, p: &Bound, attn: &Attention, x: Var) -> Result<Var> {
    match expect_single(attn, "dswin attention")? {
        Support::Neighborhood { .. } if attn.is_deformable() => attn.forward(tape, p, x),
        s => Err(param_err!("dswin attention needs a deformable neighborhood group, got {s:?}")),
    }
}

/// Deformable sliding attention with one kernel size per head group.
pub fn ms_dswin_attention<T: Scalar>(tape: &mut Tape<T>, p: &Bound, attn: &Attention, x: Var) -> Result<Var> {
    attn.forward(tape, p, x)
}

/// Offset field `[B, 2P, H, W]` of group `g` predicted from projected queries `q`.
pub fn predict_offsets<T: Scalar>(tape: &mut Tape<T>, p: &Bound, attn: &Attention, q: Var, g: usize) -> Result<Var> {
    let grp = attn.groups.get(g).ok_or_else(|| Error::Parameter(format!("no head group {g}")))?;
    let net = grp.offset_net.as_ref().ok_or_else(|| Error::Parameter(format!("group {g} has no offset net")))?;
    net.forward(tape, p, q)
}

/// The `k x k x C` neighborhood around `(i, j)` of image `b`, with
/// out-of-range reads replicated from the border.
pub fn extract_neighborhood<T: Scalar>(x: &Tensor<T>, b: usize, i: usize, j: usize, k: usize) -> Result<Tensor<T>> {
    let &[nb, c, h, w] = x.shape() else {
        return Err(shape_err!("extract_neighborhood expects NCHW, got {:?}", x.shape()));
    };
    if k.is_multiple_of(2) {
        return Err(param_err!("neighborhood size must be odd, got {k}"));
    }
    if b >= nb || i >= h || j >= w {
        return Err(shape_err!("position ({b}, {i}, {j}) outside {:?}", x.shape()));
    }
    let r = (k / 2) as i64;
    let mut out = Vec::with_capacity(k * k * c);
    for u in 0..k as i64 {
        let y = (i as i64 + u - r).clamp(0, h as i64 - 1) as usize;
        for v in 0..k as i64 {
            let xx = (j as i64 + v - r).clamp(0, w as i64 - 1) as usize;
            out.extend((0..c).map(|ch| x.data()[((b * c + ch) * h + y) * w + xx]));
        }
    }
    Tensor::new(&[k, k, c], out)
}

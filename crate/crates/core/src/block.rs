//! Pre-norm transformer block: `y = x + attn(ln1 x)`, `out = y + ffn(ln2 y)`.

use serde::{Deserialize, Serialize};

use crate::attention::{Attention, OffsetMode, Support};
use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err, Result};
use crate::nn::{add, concat, gelu, layernorm, mul, narrow, Conv2d, Conv2dGeometry};
use crate::oracle::{ConvGeometry, OracleBlock, OracleConv, OracleFfn};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Scalar;

/// Depthwise `(kernel, dilation)` branches of the gated FFN.
pub const MSG_BRANCHES: [(usize, usize); 3] = [(3, 1), (5, 1), (3, 2)];

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            gamma: store.add(&format!("{prefix}.gamma"), &[c], Init::Ones, seed)?,
            beta: store.add(&format!("{prefix}.beta"), &[c], Init::Zeros, seed)?,
            eps: LN_EPS,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        layernorm(tape, x, p.var(self.gamma), p.var(self.beta), self.eps)
    }
}

#[derive(Clone, Debug)]
pub enum Ffn {
    /// Expand to content and gate halves, run multi-scale depthwise branches
    /// on the gate, fuse them through GELU, gate the content, project back.
    Gated { expand: Conv2d, branches: Vec<Conv2d>, fuse: Conv2d, project: Conv2d },
    /// Pointwise expand, GELU, pointwise project.
    Plain { fc1: Conv2d, fc2: Conv2d },
}

/// Pointwise or depthwise conv with fan-in init and a zero bias.
pub(crate) fn conv<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    g: Conv2dGeometry,
    seed: u64,
) -> Result<Conv2d> {
    let cpg = cin / g.groups;
    Ok(Conv2d {
        weight: store.add(&format!("{name}.weight"), &[cout, cpg, k, k], Init::FanIn(cpg * k * k), seed)?,
        bias: Some(store.add(&format!("{name}.bias"), &[cout], Init::Zeros, seed)?),
        geometry: g,
    })
}

impl Ffn {
    /// `branches` lists depthwise `(kernel, dilation)` pairs and is ignored
    /// when `gated` is false.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c: usize,
        ratio: usize,
        gated: bool,
        branches: &[(usize, usize)],
        seed: u64,
    ) -> Result<Self> {
        if ratio == 0 {
            return Err(param_err!("ffn expansion ratio must be positive"));
        }
        if gated && (branches.is_empty() || branches.iter().any(|&(k, d)| k % 2 == 0 || d == 0)) {
            return Err(param_err!("gated ffn needs odd-kernel branches with positive dilation, got {branches:?}"));
        }
        let hidden = ratio * c;
        let pw = Conv2dGeometry::POINTWISE;
        if !gated {
            return Ok(Ffn::Plain {
                fc1: conv(store, &format!("{prefix}.fc1"), c, hidden, 1, pw, seed)?,
                fc2: conv(store, &format!("{prefix}.fc2"), hidden, c, 1, pw, seed)?,
            });
        }
        let n = branches.len();
        let branches = branches
            .iter()
            .enumerate()
            .map(|(i, &(k, d))| conv(store, &format!("{prefix}.branch{i}"), hidden, hidden, k, Conv2dGeometry::same(k, d, hidden), seed))
            .collect::<Result<Vec<_>>>()?;
        Ok(Ffn::Gated {
            expand: conv(store, &format!("{prefix}.expand"), c, 2 * hidden, 1, pw, seed)?,
            branches,
            fuse: conv(store, &format!("{prefix}.fuse"), n * hidden, hidden, 1, pw, seed)?,
            project: conv(store, &format!("{prefix}.project"), hidden, c, 1, pw, seed)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Ffn::Plain { fc1, fc2 } => {
                let h = fc1.forward(tape, p, x)?;
                let h = gelu(tape, h)?;
                fc2.forward(tape, p, h)
            }
            Ffn::Gated { expand, branches, fuse, project } => {
                let e = expand.forward(tape, p, x)?;
                let half = tape.value(e).shape()[1] / 2;
                let content = narrow(tape, e, 1, 0, half)?;
                let gate = narrow(tape, e, 1, half, half)?;
                let outs = branches.iter().map(|b| b.forward(tape, p, gate)).collect::<Result<Vec<_>>>()?;
                let cat = concat(tape, &outs, 1)?;
                let f = fuse.forward(tape, p, cat)?;
                let f = gelu(tape, f)?;
                let m = mul(tape, content, f)?;
                project.forward(tape, p, m)
            }
        }
    }

    /// The conv that writes the branch output; zeroing it silences the FFN.
    pub fn output(&self) -> &Conv2d {
        match self {
            Ffn::Plain { fc2, .. } => fc2,
            Ffn::Gated { project, .. } => project,
        }
    }

    pub fn to_oracle<T: Scalar>(&self, store: &ParamStore<T>) -> OracleFfn {
        let c = |cv: &Conv2d| OracleConv {
            w: store.get(cv.weight).cast(),
            b: store.get(cv.bias.expect("ffn convs carry a bias")).cast(),
            geometry: ConvGeometry {
                stride: cv.geometry.stride,
                padding: cv.geometry.padding,
                dilation: cv.geometry.dilation,
                groups: cv.geometry.groups,
            },
        };
        match self {
            Ffn::Plain { fc1, fc2 } => OracleFfn::Plain { fc1: c(fc1), fc2: c(fc2) },
            Ffn::Gated { expand, branches, fuse, project } => OracleFfn::Gated {
                expand: c(expand),
                branches: branches.iter().map(c).collect(),
                fuse: c(fuse),
                project: c(project),
            },
        }
    }
}

/// Hyperparameters of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub channels: usize,
    pub heads: usize,
    pub supports: Vec<Support>,
    pub deformable: bool,
    pub msg_ffn: bool,
    pub ffn_ratio: usize,
    pub ffn_branches: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attention: Attention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

impl Block {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, cfg: &BlockConfig, seed: u64) -> Result<Self> {
        let c = cfg.channels;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), c, seed)?,
            attention: Attention::new(store, &format!("{prefix}.attn"), c, cfg.heads, &cfg.supports, cfg.deformable, seed)?,
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), c, seed)?,
            ffn: Ffn::new(store, &format!("{prefix}.ffn"), c, cfg.ffn_ratio, cfg.msg_ffn, &cfg.ffn_branches, seed)?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with(tape, p, x, OffsetMode::Predicted)?.0)
    }

    /// Forward pass also returning the attention offset field of each group.
    pub fn forward_with<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        mode: OffsetMode<'_>,
    ) -> Result<(Var, Vec<Option<Var>>)> {
        let n = self.norm1.forward(tape, p, x)?;
        let (a, offsets) = self.attention.forward_with(tape, p, n, mode)?;
        let y = add(tape, x, a)?;
        let n = self.norm2.forward(tape, p, y)?;
        let f = self.ffn.forward(tape, p, n)?;
        Ok((add(tape, y, f)?, offsets))
    }

    pub fn to_oracle<T: Scalar>(&self, store: &ParamStore<T>) -> OracleBlock {
        let (attention, groups) = self.attention.to_oracle(store);
        let ln = |l: &LayerNorm| (store.get(l.gamma).cast(), store.get(l.beta).cast());
        OracleBlock {
            norm1: ln(&self.norm1),
            norm2: ln(&self.norm2),
            eps: self.norm1.eps,
            attention,
            groups,
            ffn: self.ffn.to_oracle(store),
        }
    }
}

/// Multi-scale gated FFN of an NCHW map.
pub fn msg_ffn<T: Scalar>(tape: &mut Tape<T>, p: &Bound, ffn: &Ffn, x: Var) -> Result<Var> {
    if !matches!(ffn, Ffn::Gated { .. }) {
        return Err(param_err!("msg_ffn called with a plain ffn"));
    }
    ffn.forward(tape, p, x)
}

/// One deformable sliding-window transformer block.
pub fn dstb_forward<T: Scalar>(tape: &mut Tape<T>, p: &Bound, block: &Block, x: Var) -> Result<Var> {
    let c = tape.value(x).shape().get(1).copied();
    if c != Some(block.attention.channels) {
        return Err(shape_err!("block over {} channels got {:?}", block.attention.channels, tape.value(x).shape()));
    }
    block.forward(tape, p, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_many;
    use crate::nn::sum;
    use crate::oracle::{naive_block, naive_ffn};
    use crate::rng::{stream, stream_rng};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, stream::TEST, 0);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    fn cfg(msg: bool) -> BlockConfig {
        BlockConfig {
            channels: 4,
            heads: 2,
            supports: vec![Support::Neighborhood { kernel: 3 }, Support::Neighborhood { kernel: 5 }],
            deformable: true,
            msg_ffn: msg,
            ffn_ratio: 2,
            ffn_branches: MSG_BRANCHES.to_vec(),
        }
    }

    fn perturbed(store: &mut ParamStore<f64>, blocks: &[&Block]) {
        store.perturb(21, 0.3, |n| !n.contains(".offset.project"));
        store.perturb(22, 0.01, |n| n.ends_with(".offset.project.weight"));
        for b in blocks {
            for g in &b.attention.groups {
                let bias = g.offset_net.as_ref().unwrap().project.bias.unwrap();
                let n = store.get(bias).numel();
                store.set(bias, Tensor::from_fn(&[n], |i| if i % 2 == 0 { -0.3 } else { 0.4 }).unwrap()).unwrap();
            }
        }
    }

    #[test]
    fn ffn_variants_match_oracle() {
        for gated in [true, false] {
            let mut store = ParamStore::<f64>::new();
            let f = Ffn::new(&mut store, "ffn", 4, 2, gated, &MSG_BRANCHES, 1).unwrap();
            store.perturb(2, 0.2, |_| true);
            let x = rand_t(&[2, 4, 6, 5], 3);
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let y = f.forward(&mut tape, &p, xv).unwrap();
            let want = naive_ffn(&x, &f.to_oracle(&store)).unwrap();
            assert!(tape.value(y).max_abs_diff(&want).unwrap() <= 1e-10);
            assert_eq!(msg_ffn(&mut tape, &p, &f, xv).is_ok(), gated);
        }
    }

    #[test]
    fn block_matches_oracle() {
        let mut store = ParamStore::<f64>::new();
        let b = Block::new(&mut store, "blk", &cfg(true), 4).unwrap();
        perturbed(&mut store, &[&b]);
        let x = rand_t(&[1, 4, 7, 7], 5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = dstb_forward(&mut tape, &p, &b, xv).unwrap();
        let want = naive_block(&x, &b.to_oracle(&store)).unwrap();
        assert!(tape.value(y).max_abs_diff(&want).unwrap() <= 1e-10);
    }

    #[test]
    fn silenced_branches_give_identity() {
        let mut store = ParamStore::<f64>::new();
        let b = Block::new(&mut store, "blk", &cfg(true), 6).unwrap();
        store.perturb(7, 0.3, |_| true);
        let out = b.ffn.output();
        for id in [b.attention.wo, b.attention.bo, out.weight, out.bias.unwrap()] {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape).unwrap()).unwrap();
        }
        let x = rand_t(&[1, 4, 5, 5], 8);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let y = b.forward(&mut tape, &p, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn two_block_gradients() {
        let mut store = ParamStore::<f64>::new();
        let b0 = Block::new(&mut store, "b0", &cfg(true), 9).unwrap();
        let b1 = Block::new(&mut store, "b1", &cfg(false), 9).unwrap();
        perturbed(&mut store, &[&b0, &b1]);
        let x = rand_t(&[1, 4, 5, 5], 10);
        let proj = rand_t(&[1, 4, 5, 5], 11);
        let mut inputs = vec![x];
        inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
        let rep = grad_check_many(
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                let h = b0.forward(t, &p, v[0])?;
                let h = b1.forward(t, &p, h)?;
                let pc = t.constant(proj.clone());
                let m = mul(t, h, pc)?;
                sum(t, m)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
    }
}

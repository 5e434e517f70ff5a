//! Four-level U-shaped restoration network.
//!
//! Embed (3x3 conv) -> encoder levels 0..2, each followed by a stride-2 3x3
//! conv that doubles channels -> bottleneck (level 3) -> decoder levels
//! 2..0, each entered through a 1x1 conv plus depth-to-space upsampling and
//! a concat + 1x1 skip fusion -> 3x3 head. The head output is added to the
//! input image.

use serde::{Deserialize, Serialize};

use crate::attention::{OffsetMode, Support};
use crate::autograd::{Tape, Var};
use crate::block::{conv, Block, BlockConfig, Ffn, MSG_BRANCHES};
use crate::error::{shape_err, Error, Result};
use crate::nn::{add, concat, conv_output_extent, crop, depth_to_space, pad_replicate, Conv2d, Conv2dGeometry};
use crate::params::{Bound, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const LEVELS: usize = 4;
/// Encoder levels 0..=3 followed by decoder levels 2, 1, 0.
pub const STAGES: usize = 2 * LEVELS - 1;
pub const STAGE_NAMES: [&str; STAGES] = ["enc0", "enc1", "enc2", "bottleneck", "dec2", "dec1", "dec0"];

/// Network hyperparameters. Every ablation variant is a value of this type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_channels: usize,
    pub base_channels: usize,
    /// Blocks per encoder level; decoder levels mirror levels 0..=2.
    pub stage_depths: Vec<usize>,
    pub heads: Vec<usize>,
    /// Kernel size of each head group, per level.
    pub kernel_sizes: Vec<Vec<usize>>,
    pub ffn_ratio: usize,
    /// `(kernel, dilation)` depthwise branches of the gated FFN.
    pub ffn_branches: Vec<(usize, usize)>,
    pub msg_ffn_enabled: bool,
    pub offsets_enabled: bool,
    /// Replace every level's kernel set by this single kernel.
    pub single_kernel_override: Option<usize>,
    /// Use non-overlapping windows of this size instead of neighborhoods.
    pub window_size: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::tiny()
    }
}

impl ModelConfig {
    /// Desk-scale preset.
    pub fn tiny() -> Self {
        Self {
            image_channels: 3,
            base_channels: 8,
            stage_depths: vec![1, 1, 1, 1],
            heads: vec![1, 2, 4, 8],
            kernel_sizes: vec![vec![7], vec![5, 7], vec![3, 5], vec![3, 5]],
            ffn_ratio: 2,
            ffn_branches: MSG_BRANCHES.to_vec(),
            msg_ffn_enabled: true,
            offsets_enabled: true,
            single_kernel_override: None,
            window_size: None,
        }
    }

    /// Full-scale layout. Width and heads are one consistent choice for the
    /// published depths and kernel sets.
    pub fn full() -> Self {
        Self {
            base_channels: 48,
            stage_depths: vec![4, 6, 6, 8],
            heads: vec![3, 6, 12, 24],
            kernel_sizes: vec![vec![5, 7, 9], vec![5, 7, 9], vec![3, 5, 7], vec![3, 5, 7]],
            ..Self::tiny()
        }
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn supports(&self, level: usize) -> Vec<Support> {
        if let Some(size) = self.window_size {
            vec![Support::Window { size }]
        } else if let Some(k) = self.single_kernel_override {
            vec![Support::Neighborhood { kernel: k }]
        } else {
            self.kernel_sizes[level].iter().map(|&k| Support::Neighborhood { kernel: k }).collect()
        }
    }

    pub fn block_config(&self, level: usize) -> BlockConfig {
        BlockConfig {
            channels: self.level_channels(level),
            heads: self.heads[level],
            supports: self.supports(level),
            deformable: self.offsets_enabled,
            msg_ffn: self.msg_ffn_enabled,
            ffn_ratio: self.ffn_ratio,
            ffn_branches: self.ffn_branches.clone(),
        }
    }

    /// Encoder level processed by `stage`.
    pub fn stage_level(stage: usize) -> usize {
        if stage < LEVELS {
            stage
        } else {
            STAGES - 1 - stage
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.base_channels == 0 {
            return bad("image_channels and base_channels must be positive".into());
        }
        for (name, len) in [("stage_depths", self.stage_depths.len()), ("heads", self.heads.len()), ("kernel_sizes", self.kernel_sizes.len())] {
            if len != LEVELS {
                return bad(format!("{name} needs {LEVELS} entries, got {len}"));
            }
        }
        if self.stage_depths.contains(&0) {
            return bad("every level needs at least one block".into());
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be positive".into());
        }
        if self.msg_ffn_enabled && (self.ffn_branches.is_empty() || self.ffn_branches.iter().any(|&(k, d)| k % 2 == 0 || d == 0)) {
            return bad(format!("ffn_branches must be odd kernels with positive dilation, got {:?}", self.ffn_branches));
        }
        if self.window_size.is_some() && self.single_kernel_override.is_some() {
            return bad("window_size and single_kernel_override are exclusive".into());
        }
        if self.window_size == Some(0) {
            return bad("window_size must be positive".into());
        }
        for level in 0..LEVELS {
            let (c, h) = (self.level_channels(level), self.heads[level]);
            if h == 0 || c % h != 0 {
                return bad(format!("level {level}: {h} heads do not divide {c} channels"));
            }
            let supports = self.supports(level);
            if h % supports.len() != 0 {
                return bad(format!("level {level}: {h} heads do not split into {} kernel groups", supports.len()));
            }
            for s in supports {
                if let Support::Neighborhood { kernel } = s {
                    if kernel < 3 || kernel % 2 == 0 {
                        return bad(format!("level {level}: kernel {kernel} must be odd and >= 3"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Input extents the network accepts without padding.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (LEVELS - 1);
        if h == 0 || w == 0 || !h.is_multiple_of(f) || !w.is_multiple_of(f) {
            return Err(shape_err!("input {h}x{w} is not divisible by {f}"));
        }
        if let Some(m) = self.window_size {
            let (hs, ws) = (h >> (LEVELS - 1), w >> (LEVELS - 1));
            if hs % m != 0 || ws % m != 0 {
                return Err(shape_err!("window {m} does not tile the {hs}x{ws} bottleneck of a {h}x{w} input"));
            }
        }
        Ok(())
    }
}

/// Offsets recorded at the first block of a stage.
#[derive(Clone, Debug)]
pub struct StageTrace {
    pub offsets: Vec<Option<Var>>,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Accounting {
    pub params: usize,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub embed: Conv2d,
    /// Indexed by stage; see [`STAGE_NAMES`].
    pub stages: Vec<Vec<Block>>,
    pub downs: Vec<Conv2d>,
    /// Indexed by the decoder level they produce.
    pub ups: Vec<Conv2d>,
    pub fuses: Vec<Conv2d>,
    pub head: Conv2d,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut ps = ParamStore::new();
        let same3 = Conv2dGeometry::same(3, 1, 1);
        let pw = Conv2dGeometry::POINTWISE;
        let embed = conv(&mut ps, "embed", cfg.image_channels, cfg.base_channels, 3, same3, seed)?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut downs = Vec::new();
        for level in 0..LEVELS {
            let bc = cfg.block_config(level);
            let name = STAGE_NAMES[level];
            stages.push(
                (0..cfg.stage_depths[level]).map(|i| Block::new(&mut ps, &format!("{name}.{i}"), &bc, seed)).collect::<Result<Vec<_>>>()?,
            );
            if level + 1 < LEVELS {
                let (c, g) = (cfg.level_channels(level), Conv2dGeometry { stride: 2, padding: 1, dilation: 1, groups: 1 });
                downs.push(conv(&mut ps, &format!("down{level}"), c, 2 * c, 3, g, seed)?);
            }
        }
        let (mut ups, mut fuses) = (vec![None; LEVELS - 1], vec![None; LEVELS - 1]);
        for stage in LEVELS..STAGES {
            let level = ModelConfig::stage_level(stage);
            let c = cfg.level_channels(level);
            ups[level] = Some(conv(&mut ps, &format!("up{level}"), 2 * c, 4 * c, 1, pw, seed)?);
            fuses[level] = Some(conv(&mut ps, &format!("fuse{level}"), 2 * c, c, 1, pw, seed)?);
            let bc = cfg.block_config(level);
            let name = STAGE_NAMES[stage];
            stages.push(
                (0..cfg.stage_depths[level]).map(|i| Block::new(&mut ps, &format!("{name}.{i}"), &bc, seed)).collect::<Result<Vec<_>>>()?,
            );
        }
        let head = conv(&mut ps, "head", cfg.base_channels, cfg.image_channels, 3, same3, seed)?;
        Ok(Self {
            config: cfg,
            params: ps,
            embed,
            stages,
            downs,
            ups: ups.into_iter().map(Option::unwrap).collect(),
            fuses: fuses.into_iter().map(Option::unwrap).collect(),
            head,
        })
    }

    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, image: Var) -> Result<Var> {
        Ok(self.forward_traced(tape, p, image, true)?.0)
    }

    /// Forward pass recording each stage's first-block offsets. With
    /// `offsets` false every block reads at integer positions.
    pub fn forward_traced(&self, tape: &mut Tape<T>, p: &Bound, image: Var, offsets: bool) -> Result<(Var, Vec<StageTrace>)> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.config.image_channels {
            return Err(shape_err!("model expects [B, {}, H, W], got {shape:?}", self.config.image_channels));
        }
        self.config.check_extent(shape[2], shape[3])?;
        let mode = if offsets { OffsetMode::Predicted } else { OffsetMode::Disabled };
        let mut traces = Vec::with_capacity(STAGES);
        let mut run_stage = |tape: &mut Tape<T>, stage: usize, mut h: Var| -> Result<Var> {
            let s = tape.value(h).shape();
            let (height, width) = (s[2], s[3]);
            for (i, b) in self.stages[stage].iter().enumerate() {
                let (out, offs) = b.forward_with(tape, p, h, mode)?;
                if i == 0 {
                    traces.push(StageTrace { offsets: offs, height, width });
                }
                h = out;
            }
            Ok(h)
        };
        let mut h = self.embed.forward(tape, p, image)?;
        let mut skips = Vec::with_capacity(LEVELS - 1);
        for level in 0..LEVELS {
            h = run_stage(tape, level, h)?;
            if level + 1 < LEVELS {
                skips.push(h);
                h = self.downs[level].forward(tape, p, h)?;
            }
        }
        for stage in LEVELS..STAGES {
            let level = ModelConfig::stage_level(stage);
            let u = self.ups[level].forward(tape, p, h)?;
            let u = depth_to_space(tape, u, 2)?;
            let skip = skips[level];
            if tape.value(u).shape() != tape.value(skip).shape() {
                return Err(shape_err!("skip fusion at level {level}: {:?} vs {:?}", tape.value(u).shape(), tape.value(skip).shape()));
            }
            let cat = concat(tape, &[u, skip], 1)?;
            h = self.fuses[level].forward(tape, p, cat)?;
            h = run_stage(tape, stage, h)?;
        }
        let out = self.head.forward(tape, p, h)?;
        Ok((add(tape, image, out)?, traces))
    }

    /// Inference on a `[B, C, H, W]` image of any extent: replicate-pads to a
    /// multiple of 8 and crops the result back.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (padded, h, w) = self.pad_input(image)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(padded);
        let y = self.forward(&mut tape, &p, x)?;
        crop(tape.value(y), h, w)
    }

    fn pad_input(&self, image: &Tensor<T>) -> Result<(Tensor<T>, usize, usize)> {
        let &[_, _, h, w] = image.shape() else {
            return Err(shape_err!("expected an NCHW image, got {:?}", image.shape()));
        };
        let f = 1 << (LEVELS - 1);
        let up = |n: usize| n.div_ceil(f) * f;
        Ok((pad_replicate(image, up(h) - h, up(w) - w)?, h, w))
    }

    /// Per-pixel mean offset length `[H_s, W_s]` of one head group at the
    /// first block of `stage`, for a single image.
    pub fn offset_magnitude(&self, image: &Tensor<T>, stage: usize, group: usize) -> Result<Tensor<f64>> {
        if stage >= STAGES {
            return Err(Error::Parameter(format!("stage {stage} out of range 0..{STAGES}")));
        }
        if !self.config.offsets_enabled {
            return Err(Error::Parameter("model has no offset nets".into()));
        }
        let groups = self.config.supports(ModelConfig::stage_level(stage)).len();
        if group >= groups {
            return Err(Error::Parameter(format!("stage {stage} has {groups} head groups, asked for {group}")));
        }
        if image.shape().first() != Some(&1) {
            return Err(shape_err!("offset maps take a single image, got {:?}", image.shape()));
        }
        let (padded, _, _) = self.pad_input(image)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let x = tape.constant(padded);
        let (_, traces) = self.forward_traced(&mut tape, &p, x, true)?;
        let tr = &traces[stage];
        let field = tape.value(tr.offsets[group].expect("deformable model records offsets")).to_f64_vec();
        let (hw, points) = (tr.height * tr.width, field.len() / (2 * tr.height * tr.width));
        let mag = (0..hw)
            .map(|i| (0..points).map(|p| field[2 * p * hw + i].hypot(field[(2 * p + 1) * hw + i])).sum::<f64>() / points as f64)
            .collect();
        Tensor::new(&[tr.height, tr.width], mag)
    }

    /// Parameter count and multiply-accumulates of one forward pass at `h x w`.
    ///
    /// Convs count `out * in/groups * kh * kw * H' * W'`; each attention
    /// head adds `2 P d` per query and each deformable group adds `4 P C_g`
    /// per query for bilinear sampling. Norms, activations, and elementwise
    /// ops are free.
    pub fn count_params_flops(&self, h: usize, w: usize) -> Result<Accounting> {
        self.config.check_extent(h, w)?;
        let mut n = MacCounter { params: &self.params, macs: 0 };
        n.conv(&self.embed, h, w);
        for stage in 0..STAGES {
            let level = ModelConfig::stage_level(stage);
            let (hs, ws) = (h >> level, w >> level);
            for b in &self.stages[stage] {
                n.block(b, hs, ws);
            }
            if stage < LEVELS - 1 {
                n.conv(&self.downs[stage], hs, ws);
            }
            if stage >= LEVELS {
                n.conv(&self.ups[level], hs / 2, ws / 2);
                n.conv(&self.fuses[level], hs, ws);
            }
        }
        n.conv(&self.head, h, w);
        Ok(Accounting { params: self.params.num_scalars(), macs: n.macs })
    }
}

struct MacCounter<'a, T: Scalar> {
    params: &'a ParamStore<T>,
    macs: u64,
}

impl<T: Scalar> MacCounter<'_, T> {
    fn conv(&mut self, c: &Conv2d, h: usize, w: usize) {
        let s = self.params.get(c.weight).shape();
        let ho = conv_output_extent(h, s[2], c.geometry).unwrap_or(0);
        let wo = conv_output_extent(w, s[3], c.geometry).unwrap_or(0);
        self.macs += (s[0] * s[1] * s[2] * s[3] * ho * wo) as u64;
    }

    fn block(&mut self, b: &Block, h: usize, w: usize) {
        let a = &b.attention;
        let (c, hw) = (a.channels as u64, (h * w) as u64);
        self.macs += 4 * c * c * hw;
        let cg = c / a.groups.len() as u64;
        for g in &a.groups {
            let p = g.support.points() as u64;
            self.macs += 2 * p * cg * hw;
            if let Some(net) = &g.offset_net {
                self.macs += 4 * p * cg * hw;
                for cv in [&net.depthwise, &net.pointwise, &net.project] {
                    self.conv(cv, h, w);
                }
            }
        }
        match &b.ffn {
            Ffn::Plain { fc1, fc2 } => {
                self.conv(fc1, h, w);
                self.conv(fc2, h, w);
            }
            Ffn::Gated { expand, branches, fuse, project } => {
                for cv in std::iter::once(expand).chain(branches).chain([fuse, project]) {
                    self.conv(cv, h, w);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{l1_loss, Conv2dGeometry};
    use crate::params::Init;
    use crate::rng::{stream, stream_rng};
    use rand::Rng;

    fn image(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = stream_rng(seed, stream::TEST, 0);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn build_is_deterministic_and_validated() {
        let a = Model::<f32>::build(&ModelConfig::tiny(), 3).unwrap();
        let b = Model::<f32>::build(&ModelConfig::tiny(), 3).unwrap();
        assert_eq!(a.params, b.params);
        let mut bad = ModelConfig::tiny();
        bad.heads[1] = 3;
        assert!(matches!(Model::<f32>::build(&bad, 0), Err(Error::Config(_))));
        bad = ModelConfig::tiny();
        bad.kernel_sizes[0] = vec![4];
        assert!(matches!(Model::<f32>::build(&bad, 0), Err(Error::Config(_))));
        bad = ModelConfig::tiny();
        bad.stage_depths.pop();
        assert!(matches!(Model::<f32>::build(&bad, 0), Err(Error::Config(_))));
        assert!(ModelConfig::full().validate().is_ok());
    }

    #[test]
    fn zero_head_is_identity_and_shapes_hold() {
        let mut m = Model::<f32>::build(&ModelConfig::tiny(), 1).unwrap();
        m.params.perturb(2, 0.1, |_| true);
        for id in [m.head.weight, m.head.bias.unwrap()] {
            let s = m.params.get(id).shape().to_vec();
            m.params.set(id, Tensor::zeros(&s).unwrap()).unwrap();
        }
        let x = image(&[1, 3, 16, 24], 3);
        assert_eq!(m.infer(&x).unwrap(), x);
        let odd = image(&[1, 3, 18, 13], 4);
        assert_eq!(m.infer(&odd).unwrap().shape(), odd.shape());

        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let v = tape.constant(odd);
        assert!(matches!(m.forward(&mut tape, &p, v), Err(Error::Shape(_))));
    }

    #[test]
    fn fresh_offsets_match_disabled_offsets() {
        let m = Model::<f32>::build(&ModelConfig::tiny(), 5).unwrap();
        let x = image(&[1, 3, 16, 16], 6);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, false);
        let v = tape.constant(x);
        let (a, traces) = m.forward_traced(&mut tape, &p, v, true).unwrap();
        let (b, _) = m.forward_traced(&mut tape, &p, v, false).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
        assert_eq!(traces.len(), STAGES);
        assert_eq!((traces[3].height, traces[3].width), (2, 2));
        assert_eq!((traces[6].height, traces[6].width), (16, 16));
    }

    #[test]
    fn sliding_variant_shares_every_parameter() {
        let mut off = ModelConfig::tiny();
        off.offsets_enabled = false;
        let a = Model::<f32>::build(&ModelConfig::tiny(), 7).unwrap();
        let b = Model::<f32>::build(&off, 7).unwrap();
        let mut shared = 0;
        for (_, name, t) in b.params.iter() {
            assert_eq!(a.params.by_name(name), Some(t), "{name}");
            shared += 1;
        }
        assert!(a.params.iter().all(|(_, n, _)| b.params.id(n).is_some() || n.contains(".offset.")));
        assert!(shared < a.params.len());
    }

    #[test]
    fn accounting_closed_forms() {
        let mut ps = ParamStore::<f32>::new();
        let c = Conv2d {
            weight: ps.add("w", &[3, 2, 1, 1], Init::Zeros, 0).unwrap(),
            bias: Some(ps.add("b", &[3], Init::Zeros, 0).unwrap()),
            geometry: Conv2dGeometry::POINTWISE,
        };
        let mut n = MacCounter { params: &ps, macs: 0 };
        n.conv(&c, 4, 4);
        assert_eq!((ps.num_scalars(), n.macs), (9, 96));

        let m = Model::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        let small = m.count_params_flops(32, 32).unwrap();
        let big = m.count_params_flops(64, 64).unwrap();
        assert_eq!(small.params, big.params);
        assert_eq!(big.macs, 4 * small.macs);
    }

    #[test]
    fn training_step_reduces_loss_direction() {
        // One tiny backward pass: every parameter receives a finite gradient.
        let m = Model::<f32>::build(&ModelConfig::tiny(), 8).unwrap();
        let x = image(&[2, 3, 16, 16], 9);
        let y = image(&[2, 3, 16, 16], 10);
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape, true);
        let (xv, yv) = (tape.constant(x), tape.constant(y));
        let out = m.forward(&mut tape, &p, xv).unwrap();
        let loss = l1_loss(&mut tape, out, yv).unwrap();
        let g = tape.backward(loss).unwrap();
        for (id, name, _) in m.params.iter() {
            let gv = g.get(p.var(id)).unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(gv.data().iter().all(|v| v.is_finite()));
        }
    }
}

//! Verification suites shared by the CLI and the acceptance tests: every
//! optimized kernel against its oracle, and every differentiable op against
//! central differences.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, Support};
use crate::autograd::{grad_check_many, Tape, Var};
use crate::block::{Block, BlockConfig, Ffn, MSG_BRANCHES};
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::nn::{
    add, bilinear_sample, channel_linear, concat, conv2d, conv_output_extent, depth_to_space, exp, gelu, l1_loss, layernorm, linear, mean, mul,
    narrow, reshape, scale, softmax_lastdim, sub, sum, Conv2dGeometry,
};
use crate::oracle::{
    naive_bilinear, naive_block, naive_conv2d, naive_ffn, naive_linear, naive_matmul, naive_ms_dswin, naive_sliding_attention, naive_softmax,
    naive_window_attention, tolerance_for, ConvGeometry, OracleReport,
};
use crate::params::{Bound, ParamStore};
use crate::rng::{name_hash, stream, stream_rng};
use crate::tensor::{Scalar, Tensor};

/// Tolerance on the gradient-check relative error.
pub const GRAD_TOL: f64 = 1e-4;
/// Central-difference step of the gradient suite.
pub const GRAD_EPS: f64 = 1e-3;

/// Kernels covered by [`oracle_suite`].
pub const ORACLE_KERNELS: [&str; 11] =
    ["matmul", "conv2d", "linear", "softmax", "bilinear_sample", "window_attention", "sliding_attention", "dswin_attention", "ms_dswin_attention", "msg_ffn", "dstb"];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).expect("non-empty shape")
}

fn cast_store<T: Scalar, U: Scalar>(s: &ParamStore<T>) -> ParamStore<U> {
    let mut out = ParamStore::new();
    for (_, n, t) in s.iter() {
        out.insert(n, t.cast()).expect("names are unique");
    }
    out
}

/// Perturb every parameter, keeping offset heads small with a fractional
/// bias so sample points sit inside bilinear cells rather than on their
/// edges.
pub fn perturb_for_checks<T: Scalar>(store: &mut ParamStore<T>, seed: u64) {
    store.perturb(seed, 0.3, |n| !n.contains(".offset.project"));
    store.perturb(seed + 1, 0.01, |n| n.ends_with(".offset.project.weight"));
    let biases: Vec<_> = store.iter().filter(|(_, n, _)| n.ends_with(".offset.project.bias")).map(|(id, _, t)| (id, t.numel())).collect();
    for (id, n) in biases {
        store.set(id, Tensor::from_fn(&[n], |i| T::from_f64(if i % 2 == 0 { 0.3 } else { -0.65 })).expect("n > 0")).expect("same shape");
    }
}

fn run_layer<T: Scalar>(store: &ParamStore<T>, x: &Tensor<T>, f: impl Fn(&mut Tape<T>, &Bound, Var) -> Result<Var>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = f(&mut tape, &p, xv)?;
    Ok(tape.value(y).clone())
}

/// One random instance of `kernel` evaluated by the optimized path in `T`
/// and by the oracle on the same `T`-rounded inputs.
fn oracle_instance<T: Scalar>(kernel: &str, seed: u64) -> Result<(Tensor<T>, Tensor<f64>)> {
    let mut rng = stream_rng(seed, stream::TEST, name_hash(kernel));
    let round = |t: Tensor<f64>| -> (Tensor<T>, Tensor<f64>) {
        let r = t.cast::<T>();
        let back = r.cast();
        (r, back)
    };
    match kernel {
        "matmul" => {
            let (m, p, n) = (rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..8));
            let (a, a64) = round(rand_tensor(&mut rng, &[m, p], -1.0, 1.0));
            let (b, b64) = round(rand_tensor(&mut rng, &[p, n], -1.0, 1.0));
            Ok((a.matmul(&b)?, naive_matmul(&a64, &b64)?))
        }
        "conv2d" => {
            let groups = [1, 2][rng.random_range(0..2)];
            let cin = groups * rng.random_range(1..3);
            let cout = groups * rng.random_range(1..3);
            let k = [1, 3, 5][rng.random_range(0..3)];
            let g = Conv2dGeometry { stride: rng.random_range(1..3), padding: rng.random_range(0..3), dilation: rng.random_range(1..3), groups };
            let (h, w) = (rng.random_range(9..13), rng.random_range(9..13));
            debug_assert!(conv_output_extent(h, k, g).is_some());
            let (x, x64) = round(rand_tensor(&mut rng, &[2, cin, h, w], -1.0, 1.0));
            let (wt, w64) = round(rand_tensor(&mut rng, &[cout, cin / groups, k, k], -1.0, 1.0));
            let (b, b64) = round(rand_tensor(&mut rng, &[cout], -1.0, 1.0));
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(b));
            let y = conv2d(&mut tape, xv, wv, Some(bv), g)?;
            let og = ConvGeometry { stride: g.stride, padding: g.padding, dilation: g.dilation, groups };
            Ok((tape.value(y).clone(), naive_conv2d(&x64, &w64, Some(&b64), og)?))
        }
        "linear" => {
            let (din, dout) = (rng.random_range(1..9), rng.random_range(1..9));
            let (x, x64) = round(rand_tensor(&mut rng, &[2, 3, din], -1.0, 1.0));
            let (wt, w64) = round(rand_tensor(&mut rng, &[din, dout], -1.0, 1.0));
            let (b, b64) = round(rand_tensor(&mut rng, &[dout], -1.0, 1.0));
            let mut tape = Tape::new();
            let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(b));
            let y = linear(&mut tape, xv, wv, Some(bv))?;
            Ok((tape.value(y).clone(), naive_linear(&x64, &w64, Some(&b64))?))
        }
        "softmax" => {
            let n = rng.random_range(1..12);
            let (x, x64) = round(rand_tensor(&mut rng, &[3, n], -4.0, 4.0));
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let y = softmax_lastdim(&mut tape, xv)?;
            Ok((tape.value(y).clone(), naive_softmax(&x64)))
        }
        "bilinear_sample" => {
            let (c, h, w, p) = (rng.random_range(1..4), rng.random_range(2..8), rng.random_range(2..8), rng.random_range(1..20));
            let (f, f64_) = round(rand_tensor(&mut rng, &[2, c, h, w], -1.0, 1.0));
            let coords = Tensor::from_fn(&[2, p, 2], |i| rng.random_range(-1.5..(if i % 2 == 0 { h } else { w }) as f64 + 0.5))?;
            let (cd, c64) = round(coords);
            let mut tape = Tape::new();
            let (fv, cv) = (tape.constant(f), tape.constant(cd));
            let y = bilinear_sample(&mut tape, fv, cv)?;
            Ok((tape.value(y).clone(), naive_bilinear(&f64_, &c64)?))
        }
        "window_attention" | "sliding_attention" | "dswin_attention" | "ms_dswin_attention" => {
            let (supports, deformable) = match kernel {
                "window_attention" => (vec![Support::Window { size: [2, 3, 4][rng.random_range(0..3)] }], false),
                "sliding_attention" => (vec![Support::Neighborhood { kernel: [3, 5, 7][rng.random_range(0..3)] }], false),
                "dswin_attention" => (vec![Support::Neighborhood { kernel: [3, 5][rng.random_range(0..2)] }], true),
                _ => (vec![Support::Neighborhood { kernel: 3 }, Support::Neighborhood { kernel: 5 }], true),
            };
            let mut s64 = ParamStore::<f64>::new();
            let attn = Attention::new(&mut s64, "attn", 8, 4, &supports, deformable, seed)?;
            perturb_for_checks(&mut s64, seed);
            let store = cast_store::<f64, T>(&s64);
            let (h, w) = match supports[0] {
                Support::Window { size } => (size * rng.random_range(1..3), size * rng.random_range(1..3)),
                Support::Neighborhood { .. } => (rng.random_range(4..9), rng.random_range(4..9)),
            };
            let b = rng.random_range(1..3);
            let (x, x64) = round(rand_tensor(&mut rng, &[b, 8, h, w], -1.0, 1.0));
            let got = run_layer(&store, &x, |t, p, x| attn.forward(t, p, x))?;
            let (oa, og) = attn.to_oracle(&store);
            let want = match supports[0] {
                Support::Window { size } if !deformable => naive_window_attention(&x64, &oa, &og[0].bias, size)?,
                Support::Neighborhood { kernel } if !deformable => naive_sliding_attention(&x64, &oa, &og[0].bias, kernel)?,
                _ => naive_ms_dswin(&x64, &oa, &og)?,
            };
            Ok((got, want))
        }
        "msg_ffn" => {
            let mut s64 = ParamStore::<f64>::new();
            let ffn = Ffn::new(&mut s64, "ffn", 4, 2, true, &MSG_BRANCHES, seed)?;
            perturb_for_checks(&mut s64, seed);
            let store = cast_store::<f64, T>(&s64);
            let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
            let (x, x64) = round(rand_tensor(&mut rng, &[2, 4, h, w], -1.0, 1.0));
            let got = run_layer(&store, &x, |t, p, x| ffn.forward(t, p, x))?;
            Ok((got, naive_ffn(&x64, &ffn.to_oracle(&store))?))
        }
        "dstb" => {
            let (block, store, x, x64) = block_instance::<T>(&mut rng, seed)?;
            let got = run_layer(&store, &x, |t, p, x| block.forward(t, p, x))?;
            Ok((got, naive_block(&x64, &block.to_oracle(&store))?))
        }
        other => Err(crate::Error::Parameter(format!("unknown oracle kernel {other}"))),
    }
}

type BlockInstance<T> = (Block, ParamStore<T>, Tensor<T>, Tensor<f64>);

fn block_instance<T: Scalar>(rng: &mut ChaCha8Rng, seed: u64) -> Result<BlockInstance<T>> {
    let cfg = BlockConfig {
        channels: 8,
        heads: 4,
        supports: vec![Support::Neighborhood { kernel: 3 }, Support::Neighborhood { kernel: 5 }],
        deformable: true,
        msg_ffn: true,
        ffn_ratio: 2,
        ffn_branches: MSG_BRANCHES.to_vec(),
    };
    let mut s64 = ParamStore::<f64>::new();
    let block = Block::new(&mut s64, "blk", &cfg, seed)?;
    perturb_for_checks(&mut s64, seed);
    let store = cast_store::<f64, T>(&s64);
    let (h, w) = (rng.random_range(4..8), rng.random_range(4..8));
    let x = rand_tensor(rng, &[1, 8, h, w], -1.0, 1.0).cast::<T>();
    let x64 = x.cast();
    Ok((block, store, x, x64))
}

/// Worst-case comparison of `kernel` in dtype `T` over `seeds` instances.
pub fn oracle_check<T: Scalar>(kernel: &str, seeds: u64) -> Result<OracleReport> {
    let mut worst: Option<OracleReport> = None;
    for seed in 0..seeds {
        let (got, want) = oracle_instance::<T>(kernel, seed)?;
        let r = OracleReport::compare(&format!("{kernel}/{}", T::DTYPE), &got, &want, tolerance_for::<T>())?;
        if worst.as_ref().is_none_or(|w| r.max_rel_diff > w.max_rel_diff) {
            worst = Some(r);
        }
    }
    worst.ok_or_else(|| crate::Error::Parameter("oracle suite needs at least one seed".into()))
}

/// Every kernel in both dtypes.
pub fn oracle_suite(seeds: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::with_capacity(2 * ORACLE_KERNELS.len());
    for k in ORACLE_KERNELS {
        out.push(oracle_check::<f32>(k, seeds)?);
        out.push(oracle_check::<f64>(k, seeds)?);
    }
    Ok(out)
}

/// `sum(y * r)` for a fixed random `r`, so every output element matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = stream_rng(seed, stream::TEST, 0xfeed);
    let r = tape.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let m = mul(tape, y, r)?;
    sum(tape, m)
}

type GradFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;

struct GradCase {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: GradFn,
}

fn case(name: &'static str, inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase { name, inputs, f: Box::new(f) }
}

/// Input followed by every parameter of `store`.
fn with_params(x: Tensor<f64>, store: &ParamStore<f64>) -> Vec<Tensor<f64>> {
    std::iter::once(x).chain(store.iter().map(|(_, _, t)| t.clone())).collect()
}

fn layer_case(name: &'static str, x: Tensor<f64>, store: ParamStore<f64>, f: impl Fn(&mut Tape<f64>, &Bound, Var) -> Result<Var> + 'static) -> GradCase {
    let inputs = with_params(x, &store);
    case(name, inputs, move |t, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let y = f(t, &p, v[0])?;
        project(t, y, 1)
    })
}

fn attention_case(name: &'static str, supports: &[Support], deformable: bool, h: usize, w: usize) -> Result<GradCase> {
    let mut store = ParamStore::new();
    let attn = Attention::new(&mut store, "attn", 4, 2, supports, deformable, 3)?;
    perturb_for_checks(&mut store, 4);
    let x = rand_tensor(&mut stream_rng(5, stream::TEST, name_hash(name)), &[1, 4, h, w], -1.0, 1.0);
    Ok(layer_case(name, x, store, move |t, p, x| attn.forward(t, p, x)))
}

fn grad_cases(filter: Option<&str>) -> Result<Vec<GradCase>> {
    let keep = |n: &str| filter.is_none_or(|f| n.contains(f));
    let mut rng = stream_rng(17, stream::TEST, 0);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -1.0, 1.0);
    let mut cases = Vec::new();
    let unary = |f: fn(&mut Tape<f64>, Var) -> Result<Var>| move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let y = f(t, v[0])?;
        project(t, y, 2)
    };
    let binary = |f: fn(&mut Tape<f64>, Var, Var) -> Result<Var>| move |t: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let y = f(t, v[0], v[1])?;
        project(t, y, 2)
    };
    cases.push(case("add", vec![r(&[3, 4]), r(&[3, 4])], binary(add)));
    cases.push(case("sub", vec![r(&[3, 4]), r(&[3, 4])], binary(sub)));
    cases.push(case("mul", vec![r(&[3, 4]), r(&[3, 4])], binary(mul)));
    cases.push(case("exp", vec![r(&[5])], unary(exp)));
    cases.push(case("scale", vec![r(&[5])], unary(|t, x| scale(t, x, -1.7))));
    cases.push(case("sum", vec![r(&[2, 3])], |t, v| sum(t, v[0])));
    cases.push(case("mean", vec![r(&[2, 3])], |t, v| {
        let s = mul(t, v[0], v[0])?;
        mean(t, s)
    }));
    cases.push(case("reshape", vec![r(&[2, 6])], unary(|t, x| reshape(t, x, &[3, 4]))));
    cases.push(case("narrow", vec![r(&[2, 5, 3])], unary(|t, x| narrow(t, x, 1, 1, 3))));
    cases.push(case("concat", vec![r(&[1, 2, 3, 3]), r(&[1, 3, 3, 3])], |t, v| {
        let y = concat(t, &[v[0], v[1]], 1)?;
        project(t, y, 2)
    }));
    cases.push(case("linear", vec![r(&[2, 3, 4]), r(&[4, 5]), r(&[5])], |t, v| {
        let y = linear(t, v[0], v[1], Some(v[2]))?;
        project(t, y, 2)
    }));
    cases.push(case("channel_linear", vec![r(&[2, 3, 4, 2]), r(&[3, 5]), r(&[5])], |t, v| {
        let y = channel_linear(t, v[0], v[1], Some(v[2]))?;
        project(t, y, 2)
    }));
    for (name, g, cin, cout, k) in [
        ("conv2d_same", Conv2dGeometry::same(3, 1, 1), 2, 3, 3),
        ("conv2d_stride2", Conv2dGeometry { stride: 2, padding: 1, dilation: 1, groups: 1 }, 2, 3, 3),
        ("conv2d_depthwise_dilated", Conv2dGeometry::same(3, 2, 4), 4, 4, 3),
        ("conv2d_pointwise", Conv2dGeometry::POINTWISE, 3, 2, 1),
    ] {
        cases.push(case(name, vec![r(&[1, cin, 6, 7]), r(&[cout, cin / g.groups, k, k]), r(&[cout])], move |t, v| {
            let y = conv2d(t, v[0], v[1], Some(v[2]), g)?;
            project(t, y, 2)
        }));
    }
    cases.push(case("gelu", vec![r(&[7]).scale(3.0)], unary(gelu)));
    cases.push(case("softmax", vec![r(&[3, 5]).scale(2.0)], unary(softmax_lastdim)));
    cases.push(case("layernorm", vec![r(&[1, 4, 3, 2]), r(&[4]), r(&[4])], |t, v| {
        let y = layernorm(t, v[0], v[1], v[2], 1e-5)?;
        project(t, y, 2)
    }));
    let pred = r(&[2, 6]);
    let gap = r(&[2, 6]).map(|d| d.signum() * (0.1 + d.abs()));
    cases.push(case("l1_loss", vec![pred.clone(), pred.add(&gap)?], |t, v| l1_loss(t, v[0], v[1])));
    // Sample points strictly inside cells, away from the kinks at integers.
    let mut crng = stream_rng(18, stream::TEST, 0);
    let coords = Tensor::from_fn(&[1, 6, 2], |i| {
        let extent = if i % 2 == 0 { 5 } else { 6 };
        crng.random_range(0..extent - 1) as f64 + crng.random_range(0.2..0.8)
    })?;
    cases.push(case("bilinear_sample", vec![r(&[1, 2, 5, 6]), coords], |t, v| {
        let y = bilinear_sample(t, v[0], v[1])?;
        project(t, y, 2)
    }));
    cases.push(case("depth_to_space", vec![r(&[1, 8, 2, 3])], unary(|t, x| depth_to_space(t, x, 2))));

    if keep("window_attention") {
        cases.push(attention_case("window_attention", &[Support::Window { size: 3 }], false, 6, 3)?);
    }
    if keep("sliding_attention") {
        cases.push(attention_case("sliding_attention", &[Support::Neighborhood { kernel: 3 }], false, 5, 4)?);
    }
    if keep("dswin_attention") {
        cases.push(attention_case("dswin_attention", &[Support::Neighborhood { kernel: 3 }], true, 5, 5)?);
    }
    if keep("ms_dswin_attention") {
        cases.push(attention_case("ms_dswin_attention", &[Support::Neighborhood { kernel: 3 }, Support::Neighborhood { kernel: 5 }], true, 4, 5)?);
    }
    if keep("deformable_window_attention") {
        cases.push(attention_case("deformable_window_attention", &[Support::Window { size: 2 }], true, 4, 4)?);
    }
    if keep("msg_ffn") {
        let mut store = ParamStore::new();
        let ffn = Ffn::new(&mut store, "ffn", 2, 2, true, &MSG_BRANCHES, 3)?;
        perturb_for_checks(&mut store, 6);
        cases.push(layer_case("msg_ffn", r(&[1, 2, 5, 5]), store, move |t, p, x| ffn.forward(t, p, x)));
    }
    if keep("dstb") || keep("two_block") {
        let cfg = BlockConfig {
            channels: 4,
            heads: 2,
            supports: vec![Support::Neighborhood { kernel: 3 }, Support::Neighborhood { kernel: 5 }],
            deformable: true,
            msg_ffn: true,
            ffn_ratio: 2,
            ffn_branches: MSG_BRANCHES.to_vec(),
        };
        let mut store = ParamStore::new();
        let a = Block::new(&mut store, "b0", &cfg, 3)?;
        let b = Block::new(&mut store, "b1", &cfg, 3)?;
        perturb_for_checks(&mut store, 7);
        let x = r(&[1, 4, 4, 5]);
        if keep("dstb") {
            let mut single = ParamStore::new();
            for (_, n, t) in store.iter().filter(|(_, n, _)| n.starts_with("b0.")) {
                single.insert(n, t.clone())?;
            }
            let a1 = a.clone();
            cases.push(layer_case("dstb", x.clone(), single, move |t, p, x| a1.forward(t, p, x)));
        }
        if keep("two_block") {
            cases.push(layer_case("two_block", x, store, move |t, p, x| {
                let h = a.forward(t, p, x)?;
                b.forward(t, p, h)
            }));
        }
    }
    if keep("model_end_to_end") {
        let cfg = ModelConfig { base_channels: 4, heads: vec![1, 2, 2, 2], ..ModelConfig::tiny() };
        let mut model = Model::<f64>::build(&cfg, 3)?;
        perturb_for_checks(&mut model.params, 8);
        let x = rand_tensor(&mut stream_rng(19, stream::TEST, 0), &[1, 3, 8, 8], 0.0, 1.0);
        cases.push(case("model_end_to_end", vec![x], move |t, v| {
            let p = model.params.bind(t, false);
            let y = model.forward(t, &p, v[0])?;
            project(t, y, 3)
        }));
    }
    Ok(cases.into_iter().filter(|c| keep(c.name)).collect())
}

/// Names of the ops covered by [`gradcheck_suite`].
pub fn gradcheck_names() -> Vec<&'static str> {
    grad_cases(None).map(|cs| cs.iter().map(|c| c.name).collect()).unwrap_or_default()
}

/// Central-difference check (`f64`, eps 1e-3) of every op whose name
/// contains `filter`.
pub fn gradcheck_suite(filter: Option<&str>) -> Result<Vec<OracleReport>> {
    grad_cases(filter)?
        .into_iter()
        .map(|c| {
            let rep = grad_check_many(&c.f, &c.inputs, GRAD_EPS)?;
            Ok(OracleReport {
                kernel: c.name.to_string(),
                shape: c.inputs[0].shape().to_vec(),
                max_abs_diff: rep.max_abs_err,
                max_rel_diff: rep.max_rel_err,
                tolerance: GRAD_TOL,
                pass: rep.max_rel_err <= GRAD_TOL,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_passes_on_a_few_seeds() {
        for r in oracle_suite(2).unwrap() {
            assert!(r.pass, "{r:?}");
        }
    }

    #[test]
    fn gradcheck_filter_selects_by_substring() {
        let names: Vec<String> = gradcheck_suite(Some("conv2d")).unwrap().into_iter().map(|r| r.kernel).collect();
        assert_eq!(names.len(), 4);
        assert!(names.iter().all(|n| n.starts_with("conv2d")));
        assert!(gradcheck_suite(Some("no_such_op")).unwrap().is_empty());
        assert!(gradcheck_names().contains(&"two_block"));
    }

    #[test]
    fn perturbation_keeps_offsets_fractional() {
        let mut store = ParamStore::<f64>::new();
        Attention::new(&mut store, "a", 4, 2, &[Support::Neighborhood { kernel: 3 }], true, 1).unwrap();
        perturb_for_checks(&mut store, 2);
        let b = store.by_name("a.g0.offset.project.bias").unwrap();
        assert_eq!(&b.data()[..2], &[0.3, -0.65]);
    }
}

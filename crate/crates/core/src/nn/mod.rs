//! Differentiable primitives recorded on a [`Tape`].
//!
//! Each function computes its forward value eagerly and records a
//! hand-written vector-Jacobian product.

mod act;
mod conv;
mod resample;
mod sample;

pub use act::{gelu, gelu_scalar, layernorm, softmax_lastdim};
pub use conv::{channel_linear, conv2d, conv_output_extent, linear, Conv2d, Conv2dGeometry};
pub use resample::{crop, depth_to_space, pad_replicate};
pub use sample::bilinear_sample;
pub(crate) use sample::Bilinear;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

type Grads<T> = Result<Vec<Option<Tensor<T>>>>;

fn same_shape<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape(), tape.value(b).shape());
    if sa != sb {
        return Err(shape_err!("{op}: {sa:?} vs {sb:?}"));
    }
    Ok(())
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(f64, f64) -> f64) -> Tensor<T> {
    Tensor::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| T::from_f64(f(x.to_f64(), y.to_f64()))).collect(),
    )
}

pub fn add<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "add")?;
    let out = zip_map(tape.value(a), tape.value(b), |x, y| x + y);
    tape.record("add", &[a, b], out, |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        Ok(vec![Some(g.clone()), Some(g.clone())])
    })
}

pub fn sub<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "sub")?;
    let out = zip_map(tape.value(a), tape.value(b), |x, y| x - y);
    tape.record("sub", &[a, b], out, |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        Ok(vec![Some(g.clone()), Some(g.scale(-1.0))])
    })
}

pub fn mul<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    same_shape(tape, a, b, "mul")?;
    let out = zip_map(tape.value(a), tape.value(b), |x, y| x * y);
    tape.record("mul", &[a, b], out, |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        Ok(vec![
            needs[0].then(|| zip_map(g, ins[1], |g, b| g * b)),
            needs[1].then(|| zip_map(g, ins[0], |g, a| g * a)),
        ])
    })
}

pub fn scale<T: Scalar>(tape: &mut Tape<T>, a: Var, s: f64) -> Result<Var> {
    let out = tape.value(a).scale(s);
    tape.record("scale", &[a], out, move |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        Ok(vec![Some(g.scale(s))])
    })
}

pub fn add_scalar<T: Scalar>(tape: &mut Tape<T>, a: Var, s: f64) -> Result<Var> {
    let out = tape.value(a).map(|x| x + s);
    tape.record("add_scalar", &[a], out, |g: &Tensor<T>, _: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        Ok(vec![Some(g.clone())])
    })
}

pub fn exp<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let out = tape.value(a).map(f64::exp);
    tape.record("exp", &[a], out, |g: &Tensor<T>, _: &[&Tensor<T>], out: &Tensor<T>, _: &[bool]| -> Grads<T> {
        Ok(vec![Some(zip_map(g, out, |g, y| g * y))])
    })
}

/// Sum of all elements into shape `[1]`.
pub fn sum<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let out = Tensor::scalar(T::from_f64(tape.value(a).sum_all()));
    tape.record("sum", &[a], out, |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), vec![g.data()[0]; ins[0].numel()]))])
    })
}

pub fn mean<T: Scalar>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    let n = tape.value(a).numel() as f64;
    let s = sum(tape, a)?;
    scale(tape, s, 1.0 / n)
}

pub fn reshape<T: Scalar>(tape: &mut Tape<T>, a: Var, shape: &[usize]) -> Result<Var> {
    let out = tape.value(a).reshape(shape)?;
    tape.record("reshape", &[a], out, |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        Ok(vec![Some(g.reshape(ins[0].shape())?)])
    })
}

/// Copy of `len` entries from `start` along `axis`.
pub fn narrow<T: Scalar>(tape: &mut Tape<T>, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
    let out = tape.value(a).narrow(axis, start, len)?;
    tape.record("narrow", &[a], out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        let shape = ins[0].shape();
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = vec![T::from_f64(0.0); ins[0].numel()];
        for o in 0..outer {
            let src = &g.data()[o * len * inner..(o + 1) * len * inner];
            let dst = (o * full + start) * inner;
            data[dst..dst + len * inner].copy_from_slice(src);
        }
        Ok(vec![Some(Tensor::from_parts(shape.to_vec(), data))])
    })
}

pub fn concat<T: Scalar>(tape: &mut Tape<T>, parts: &[Var], axis: usize) -> Result<Var> {
    let values: Vec<&Tensor<T>> = parts.iter().map(|&p| tape.value(p)).collect();
    let out = Tensor::concat(&values, axis)?;
    tape.record("concat", parts, out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        let mut start = 0;
        ins.iter()
            .zip(needs)
            .map(|(t, &need)| {
                let len = t.shape()[axis];
                let piece = need.then(|| g.narrow(axis, start, len)).transpose();
                start += len;
                piece
            })
            .collect()
    })
}

/// Mean absolute difference with `sign(0) = 0` in the gradient.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    same_shape(tape, pred, target, "l1_loss")?;
    let (p, t) = (tape.value(pred), tape.value(target));
    let n = p.numel() as f64;
    let diffs: Vec<f64> = p.data().iter().zip(t.data()).map(|(a, b)| (a.to_f64() - b.to_f64()).abs()).collect();
    let out = Tensor::scalar(T::from_f64(crate::tensor::pairwise_sum(&diffs) / n));
    tape.record("l1_loss", &[pred, target], out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        let s = g.data()[0].to_f64() / n;
        let dp = zip_map(ins[0], ins[1], |a, b| {
            let d = a - b;
            if d > 0.0 {
                s
            } else if d < 0.0 {
                -s
            } else {
                0.0
            }
        });
        Ok(vec![needs[0].then(|| dp.clone()), needs[1].then(|| dp.scale(-1.0))])
    })
}

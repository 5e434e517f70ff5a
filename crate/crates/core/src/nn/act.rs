use crate::autograd::{Tape, Var};
use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::Grads;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let out = tape.value(x).map(gelu_scalar);
    tape.record("gelu", &[x], out, |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        let d = g.data().iter().zip(ins[0].data()).map(|(g, x)| g.to_f64() * gelu_grad(x.to_f64())).collect();
        Ok(vec![Some(Tensor::from_f64s(g.shape().to_vec(), d))])
    })
}

/// Max-subtracted softmax along the last axis.
pub fn softmax_lastdim<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let xv = tape.value(x);
    let n = *xv.shape().last().unwrap();
    let mut out = Vec::with_capacity(xv.numel());
    let mut row = Vec::with_capacity(n);
    for chunk in xv.data().chunks(n) {
        row.clear();
        row.extend(chunk.iter().map(|v| v.to_f64()));
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - mx).exp());
        let z = crate::tensor::pairwise_sum(&row);
        out.extend(row.iter().map(|v| v / z));
    }
    let out = Tensor::from_f64s(xv.shape().to_vec(), out);
    tape.record("softmax", &[x], out, move |g: &Tensor<T>, _: &[&Tensor<T>], y: &Tensor<T>, _: &[bool]| -> Grads<T> {
        let mut d = Vec::with_capacity(g.numel());
        for (gc, yc) in g.data().chunks(n).zip(y.data().chunks(n)) {
            let dot: f64 = gc.iter().zip(yc).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
            d.extend(gc.iter().zip(yc).map(|(a, b)| b.to_f64() * (a.to_f64() - dot)));
        }
        Ok(vec![Some(Tensor::from_f64s(g.shape().to_vec(), d))])
    })
}

/// Normalize every spatial position of an NCHW map over its channels, then
/// scale by `gamma[C]` and shift by `beta[C]`.
pub fn layernorm<T: Scalar>(tape: &mut Tape<T>, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(param_err!("layernorm eps must be positive, got {eps}"));
    }
    let xv = tape.value(x);
    let &[b, c, h, w] = xv.shape() else {
        return Err(shape_err!("layernorm expects NCHW, got {:?}", xv.shape()));
    };
    for p in [gamma, beta] {
        if tape.value(p).shape() != [c] {
            return Err(shape_err!("layernorm affine {:?} for {c} channels", tape.value(p).shape()));
        }
    }
    let plane = h * w;
    let stats = move |xs: &[f64]| -> (Vec<f64>, Vec<f64>) {
        // Normalized values and 1/sigma per position.
        let mut xhat = vec![0.0; xs.len()];
        let mut inv = vec![0.0; b * plane];
        for n in 0..b {
            for p in 0..plane {
                let at = |ch: usize| (n * c + ch) * plane + p;
                let mean = (0..c).map(|ch| xs[at(ch)]).sum::<f64>() / c as f64;
                let var = (0..c).map(|ch| (xs[at(ch)] - mean).powi(2)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv[n * plane + p] = is;
                for ch in 0..c {
                    xhat[at(ch)] = (xs[at(ch)] - mean) * is;
                }
            }
        }
        (xhat, inv)
    };
    let (xhat, _) = stats(&xv.to_f64_vec());
    let gs = tape.value(gamma).to_f64_vec();
    let bs = tape.value(beta).to_f64_vec();
    let out: Vec<f64> = xhat.iter().enumerate().map(|(i, v)| v * gs[(i / plane) % c] + bs[(i / plane) % c]).collect();
    let out = Tensor::from_f64s(xv.shape().to_vec(), out);
    tape.record("layernorm", &[x, gamma, beta], out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        let (xhat, inv) = stats(&ins[0].to_f64_vec());
        let gs = ins[1].to_f64_vec();
        let go = g.to_f64_vec();
        let mut gx = vec![0.0; go.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for n in 0..b {
            for p in 0..plane {
                let at = |ch: usize| (n * c + ch) * plane + p;
                let (mut m1, mut m2) = (0.0, 0.0);
                for ch in 0..c {
                    let gh = go[at(ch)] * gs[ch];
                    m1 += gh;
                    m2 += gh * xhat[at(ch)];
                    ggamma[ch] += go[at(ch)] * xhat[at(ch)];
                    gbeta[ch] += go[at(ch)];
                }
                m1 /= c as f64;
                m2 /= c as f64;
                let is = inv[n * plane + p];
                for ch in 0..c {
                    gx[at(ch)] = is * (go[at(ch)] * gs[ch] - m1 - xhat[at(ch)] * m2);
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_f64s(ins[0].shape().to_vec(), gx)),
            needs[1].then(|| Tensor::from_f64s(vec![c], ggamma)),
            needs[2].then(|| Tensor::from_f64s(vec![c], gbeta)),
        ])
    })
}

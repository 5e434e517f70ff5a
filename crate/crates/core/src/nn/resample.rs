use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::Grads;

/// `[B, C*r*r, H, W] -> [B, C, H*r, W*r]`, channel `c*r*r + i*r + j` landing
/// at sub-pixel `(i, j)`.
pub fn depth_to_space<T: Scalar>(tape: &mut Tape<T>, x: Var, r: usize) -> Result<Var> {
    let xv = tape.value(x);
    let &[b, crr, h, w] = xv.shape() else {
        return Err(shape_err!("depth_to_space expects NCHW, got {:?}", xv.shape()));
    };
    if r == 0 || crr % (r * r) != 0 {
        return Err(shape_err!("depth_to_space: {crr} channels not divisible by {r}^2"));
    }
    let c = crr / (r * r);
    let (ho, wo) = (h * r, w * r);
    // Output flat index -> input flat index.
    let src = move |o: usize| {
        let (n, rest) = (o / (c * ho * wo), o % (c * ho * wo));
        let (ch, rest) = (rest / (ho * wo), rest % (ho * wo));
        let (oy, ox) = (rest / wo, rest % wo);
        let sub = (oy % r) * r + ox % r;
        ((n * crr + ch * r * r + sub) * h + oy / r) * w + ox / r
    };
    let data = (0..xv.numel()).map(|o| xv.data()[src(o)]).collect();
    let out = Tensor::from_parts(vec![b, c, ho, wo], data);
    tape.record("depth_to_space", &[x], out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, _: &[bool]| -> Grads<T> {
        let mut gx = vec![T::from_f64(0.0); g.numel()];
        for (o, v) in g.data().iter().enumerate() {
            gx[src(o)] = *v;
        }
        Ok(vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))])
    })
}

/// Replicate-pad the bottom and right edges of an NCHW tensor.
pub fn pad_replicate<T: Scalar>(x: &Tensor<T>, bottom: usize, right: usize) -> Result<Tensor<T>> {
    let &[b, c, h, w] = x.shape() else {
        return Err(shape_err!("pad_replicate expects NCHW, got {:?}", x.shape()));
    };
    let (hp, wp) = (h + bottom, w + right);
    let mut data = Vec::with_capacity(b * c * hp * wp);
    for bc in 0..b * c {
        for y in 0..hp {
            let row = &x.data()[(bc * h + y.min(h - 1)) * w..][..w];
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(row[w - 1], right));
        }
    }
    Ok(Tensor::from_parts(vec![b, c, hp, wp], data))
}

/// Top-left `h x w` window of an NCHW tensor.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let &[b, c, hi, wi] = x.shape() else {
        return Err(shape_err!("crop expects NCHW, got {:?}", x.shape()));
    };
    if h == 0 || w == 0 || h > hi || w > wi {
        return Err(shape_err!("crop {h}x{w} from {hi}x{wi}"));
    }
    let mut data = Vec::with_capacity(b * c * h * w);
    for bc in 0..b * c {
        for y in 0..h {
            data.extend_from_slice(&x.data()[(bc * hi + y) * wi..][..w]);
        }
    }
    Ok(Tensor::from_parts(vec![b, c, h, w], data))
}

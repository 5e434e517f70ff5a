use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

use super::Grads;

/// Corner indices and weights of one bilinear read on an `h x w` plane.
///
/// Corners outside the plane are clamped to the border, so the sampler is
/// total. At integer coordinates the sample belongs to its floor cell and
/// coordinate derivatives use that cell's slopes.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Bilinear {
    /// Flat plane offsets of corners (y0,x0), (y0,x1), (y1,x0), (y1,x1).
    pub idx: [usize; 4],
    pub wt: [f64; 4],
    pub ly: f64,
    pub lx: f64,
}

impl Bilinear {
    #[inline]
    pub fn new(y: f64, x: f64, h: usize, w: usize) -> Self {
        let (fy, fx) = (y.floor(), x.floor());
        let (ly, lx) = (y - fy, x - fx);
        let cy = |v: f64| v.clamp(0.0, (h - 1) as f64) as usize;
        let cx = |v: f64| v.clamp(0.0, (w - 1) as f64) as usize;
        let (y0, y1, x0, x1) = (cy(fy), cy(fy + 1.0), cx(fx), cx(fx + 1.0));
        Self {
            idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            wt: [(1.0 - ly) * (1.0 - lx), (1.0 - ly) * lx, ly * (1.0 - lx), ly * lx],
            ly,
            lx,
        }
    }

    /// Exact read at an integer position (clamped).
    #[inline]
    pub fn at(y: i64, x: i64, h: usize, w: usize) -> Self {
        let p = y.clamp(0, h as i64 - 1) as usize * w + x.clamp(0, w as i64 - 1) as usize;
        Self { idx: [p, p, p, p], wt: [1.0, 0.0, 0.0, 0.0], ly: 0.0, lx: 0.0 }
    }

    #[inline]
    pub fn read(&self, plane: &[f64]) -> f64 {
        self.wt[0] * plane[self.idx[0]]
            + self.wt[1] * plane[self.idx[1]]
            + self.wt[2] * plane[self.idx[2]]
            + self.wt[3] * plane[self.idx[3]]
    }

    /// `(d/dy, d/dx)` of [`read`](Self::read).
    #[inline]
    pub fn slopes(&self, plane: &[f64]) -> (f64, f64) {
        let [a, b, c, d] = self.idx.map(|i| plane[i]);
        ((1.0 - self.lx) * (c - a) + self.lx * (d - b), (1.0 - self.ly) * (b - a) + self.ly * (d - c))
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f64], g: f64) {
        for k in 0..4 {
            plane[self.idx[k]] += self.wt[k] * g;
        }
    }
}

/// Sample `f[B,C,H,W]` at `coords[B,P,2]` holding `(y, x)` pairs; returns `[B,C,P]`.
///
/// Differentiable with respect to both the feature map and the coordinates.
pub fn bilinear_sample<T: Scalar>(tape: &mut Tape<T>, f: Var, coords: Var) -> Result<Var> {
    let (fv, cv) = (tape.value(f), tape.value(coords));
    let (&[b, c, h, w], &[b2, p, two]) = (fv.shape(), cv.shape()) else {
        return Err(shape_err!("bilinear_sample expects [B,C,H,W] and [B,P,2], got {:?} and {:?}", fv.shape(), cv.shape()));
    };
    if b != b2 || two != 2 {
        return Err(shape_err!("bilinear_sample: features {:?} with coords {:?}", fv.shape(), cv.shape()));
    }
    let plane = h * w;
    let fs = fv.to_f64_vec();
    let cs = cv.to_f64_vec();
    let mut out = vec![0.0; b * c * p];
    for n in 0..b {
        for i in 0..p {
            let s = Bilinear::new(cs[(n * p + i) * 2], cs[(n * p + i) * 2 + 1], h, w);
            for ch in 0..c {
                out[(n * c + ch) * p + i] = s.read(&fs[(n * c + ch) * plane..(n * c + ch + 1) * plane]);
            }
        }
    }
    let out = Tensor::from_f64s(vec![b, c, p], out);
    tape.record("bilinear_sample", &[f, coords], out, move |g: &Tensor<T>, ins: &[&Tensor<T>], _: &Tensor<T>, needs: &[bool]| -> Grads<T> {
        let fs = ins[0].to_f64_vec();
        let cs = ins[1].to_f64_vec();
        let go = g.to_f64_vec();
        let mut gf = vec![0.0; fs.len()];
        let mut gc = vec![0.0; cs.len()];
        for n in 0..b {
            for i in 0..p {
                let s = Bilinear::new(cs[(n * p + i) * 2], cs[(n * p + i) * 2 + 1], h, w);
                for ch in 0..c {
                    let gv = go[(n * c + ch) * p + i];
                    let range = (n * c + ch) * plane..(n * c + ch + 1) * plane;
                    if needs[1] {
                        let (dy, dx) = s.slopes(&fs[range.clone()]);
                        gc[(n * p + i) * 2] += gv * dy;
                        gc[(n * p + i) * 2 + 1] += gv * dx;
                    }
                    if needs[0] {
                        s.scatter(&mut gf[range], gv);
                    }
                }
            }
        }
        Ok(vec![
            needs[0].then(|| Tensor::from_f64s(ins[0].shape().to_vec(), gf)),
            needs[1].then(|| Tensor::from_f64s(ins[1].shape().to_vec(), gc)),
        ])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check_many;
    use crate::nn::{mul, sum};
    use crate::oracle::naive_bilinear;
    use proptest::prelude::*;
    use rand::Rng;

    fn sample(f: &Tensor<f64>, coords: &[(f64, f64)]) -> Tensor<f64> {
        let mut tape = Tape::new();
        let fv = tape.constant(f.clone());
        let flat: Vec<f64> = coords.iter().flat_map(|&(y, x)| [y, x]).collect();
        let c = tape.constant(Tensor::new(&[1, coords.len(), 2], flat).unwrap());
        let y = bilinear_sample(&mut tape, fv, c).unwrap();
        tape.value(y).clone()
    }

    fn grid(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut rng = crate::rng::stream_rng(seed, crate::rng::stream::TEST, 0);
        Tensor::from_fn(&[1, 2, h, w], |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn integer_and_midpoint_reads() {
        let f = grid(4, 5, 1);
        let s = sample(&f, &[(2.0, 3.0)]);
        assert_eq!(s.data()[0], f.data()[2 * 5 + 3]);
        assert_eq!(s.data()[1], f.data()[20 + 2 * 5 + 3]);

        let sq = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        assert_eq!(sample(&sq, &[(0.5, 0.5)]).data(), &[15.0 / 4.0]);
    }

    #[test]
    fn border_replication() {
        let sq = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 4.0, 8.0]).unwrap();
        let s = sample(&sq, &[(-3.0, -0.5), (5.0, 0.25), (0.0, 7.5)]);
        assert_eq!(s.data(), &[1.0, 5.0, 2.0]);
    }

    #[test]
    fn matches_oracle() {
        let f = grid(5, 6, 2);
        let mut rng = crate::rng::stream_rng(3, crate::rng::stream::TEST, 0);
        let pts: Vec<(f64, f64)> = (0..40).map(|_| (rng.random_range(-2.0..7.0), rng.random_range(-2.0..8.0))).collect();
        let got = sample(&f, &pts);
        let flat: Vec<f64> = pts.iter().flat_map(|&(y, x)| [y, x]).collect();
        let r = naive_bilinear(&f, &Tensor::new(&[1, 40, 2], flat).unwrap()).unwrap();
        assert!(got.max_abs_diff(&r).unwrap() < 1e-14);
    }

    proptest! {
        #[test]
        fn piecewise_bilinear_midpoints(y in 0i64..4, x in 0i64..4) {
            let f = grid(4, 5, 4);
            let (y, x) = (y as f64, x as f64);
            let s = sample(&f, &[(y, x), (y, x + 1.0), (y, x + 0.5)]);
            for ch in 0..2 {
                let d = &s.data()[ch * 3..ch * 3 + 3];
                prop_assert!((d[2] - 0.5 * (d[0] + d[1])).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn coordinate_gradient_at_fractional_point() {
        let f = grid(4, 5, 5);
        let coords = Tensor::new(&[1, 1, 2], vec![1.3, 2.7]).unwrap();
        let proj = Tensor::new(&[1, 2, 1], vec![0.7, -1.3]).unwrap();
        let rep = grad_check_many(
            |t, v| {
                let s = bilinear_sample(t, v[0], v[1])?;
                let p = t.constant(proj.clone());
                let m = mul(t, s, p)?;
                sum(t, m)
            },
            &[f, coords],
            1e-3,
        )
        .unwrap();
        assert!(rep.max_rel_err <= 1e-5, "{rep:?}");
    }
}

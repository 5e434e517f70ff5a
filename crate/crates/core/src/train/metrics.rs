//! PSNR and single-scale SSIM.

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("{what}: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `10 log10(peak^2 / MSE)`; `+inf` when the inputs are identical.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64() - y.to_f64()).powi(2)).sum::<f64>() / a.numel() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for ox in 0..wo {
            rows[y * wo + ox] = g.iter().enumerate().map(|(i, gv)| gv * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            out[oy * wo + ox] = g.iter().enumerate().map(|(i, gv)| gv * rows[(oy + i) * wo + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over every `[H, W]` plane of `[.., H, W]` inputs in `[0, 1]`,
/// using an 11x11 Gaussian window (sigma 1.5) over valid positions.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    let s = a.shape();
    if s.len() < 2 || s[s.len() - 2] < SSIM_WINDOW || s[s.len() - 1] < SSIM_WINDOW {
        return Err(shape_err!("ssim needs planes of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {s:?}"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let g = gaussian_window();
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let planes = a.numel() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let x = &av[p * h * w..][..h * w];
        let y = &bv[p * h * w..][..h * w];
        let prod = |f: fn(f64, f64) -> f64| x.iter().zip(y).map(|(u, v)| f(*u, *v)).collect::<Vec<f64>>();
        let mu_x = filter(x, h, w, &g);
        let mu_y = filter(y, h, w, &g);
        let xx = filter(&prod(|u, _| u * u), h, w, &g);
        let yy = filter(&prod(|_, v| v * v), h, w, &g);
        let xy = filter(&prod(|u, v| u * v), h, w, &g);
        let mut sum = 0.0;
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = xx[i] - mx * mx;
            let syy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2));
        }
        total += sum / mu_x.len() as f64;
    }
    Ok(total / planes as f64)
}

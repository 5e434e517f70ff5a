//! Synthetic degradations applied to clean patches.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Degradation recipe. Noise levels are on the 0-255 scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DegradationSpec {
    GaussianNoise { sigma: f64 },
    /// Bright straight streaks; `angle` in degrees from vertical.
    SyntheticRain { streaks: usize, angle: f64, intensity: f64, length: usize },
    /// Applied left to right.
    Compose { steps: Vec<DegradationSpec> },
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self::GaussianNoise { sigma: 25.0 }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::GaussianNoise { sigma } if !(sigma.is_finite() && *sigma >= 0.0) => {
                Err(Error::Config(format!("gaussian_noise sigma must be finite and >= 0, got {sigma}")))
            }
            Self::SyntheticRain { angle, intensity, .. } if !(angle.is_finite() && intensity.is_finite() && *intensity >= 0.0) => {
                Err(Error::Config(format!("synthetic_rain needs finite angle and intensity >= 0, got {angle}, {intensity}")))
            }
            Self::Compose { steps } => steps.iter().try_for_each(Self::validate),
            _ => Ok(()),
        }
    }
}

/// Unclamped noise `N(0, (sigma/255)^2)` with the given element count.
pub fn noise_field(n: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let s = sigma / 255.0;
    (0..n).map(|_| s * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// Degrade a `[.., C, H, W]` image with values in `[0, 1]`. The result is
/// clamped to `[0, 1]`.
pub fn degrade<T: Scalar>(clean: &Tensor<T>, spec: &DegradationSpec, rng: &mut impl Rng) -> Result<Tensor<T>> {
    spec.validate()?;
    let shape = clean.shape();
    if shape.len() < 3 {
        return Err(shape_err!("degrade expects [.., C, H, W], got {shape:?}"));
    }
    let mut x = clean.to_f64_vec();
    apply(&mut x, shape, spec, rng);
    Ok(Tensor::from_parts(shape.to_vec(), x.into_iter().map(|v| T::from_f64(v.clamp(0.0, 1.0))).collect()))
}

fn apply(x: &mut [f64], shape: &[usize], spec: &DegradationSpec, rng: &mut impl Rng) {
    match spec {
        DegradationSpec::GaussianNoise { sigma } => {
            if *sigma > 0.0 {
                let noise = noise_field(x.len(), *sigma, rng);
                for (v, n) in x.iter_mut().zip(noise) {
                    *v = (*v + n).clamp(0.0, 1.0);
                }
            }
        }
        DegradationSpec::SyntheticRain { streaks, angle, intensity, length } => {
            let [c, h, w] = shape[shape.len() - 3..] else { unreachable!() };
            let (dx, dy) = angle.to_radians().sin_cos();
            for img in x.chunks_mut(c * h * w) {
                for _ in 0..*streaks {
                    let x0 = rng.random_range(0.0..w as f64);
                    let y0 = rng.random_range(-(*length as f64)..h as f64);
                    let gain = intensity * rng.random_range(0.5..1.0);
                    for t in 0..*length {
                        let (py, px) = ((y0 + t as f64 * dy).round(), (x0 + t as f64 * dx).round());
                        if py < 0.0 || px < 0.0 || py >= h as f64 || px >= w as f64 {
                            continue;
                        }
                        for ch in 0..c {
                            let v = &mut img[(ch * h + py as usize) * w + px as usize];
                            *v = (*v + gain).min(1.0);
                        }
                    }
                }
            }
        }
        DegradationSpec::Compose { steps } => {
            for s in steps {
                apply(x, shape, s, rng);
            }
        }
    }
}

//! Component ablation matrix on the desk task.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{Dataset, TrainConfig, Trainer};
use crate::error::Result;
use crate::model::ModelConfig;

/// One row of the matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub model: ModelConfig,
}

/// Variants whose ordering is checked: window baseline, sliding window,
/// deformable sliding window at k = 7.
pub const A6_VARIANTS: [&str; 3] = ["window_baseline", "sliding_k7", "dswin_k7"];

/// Window size of the baseline rows.
const WINDOW: usize = 8;

/// Rows built from `base`, adding one component at a time. Every row but
/// the last uses the plain FFN.
pub fn ablation_matrix(base: &ModelConfig) -> Vec<Variant> {
    let plain = ModelConfig { msg_ffn_enabled: false, offsets_enabled: false, single_kernel_override: None, window_size: None, ..base.clone() };
    let row = |name: &str, f: &dyn Fn(&mut ModelConfig)| {
        let mut m = plain.clone();
        f(&mut m);
        Variant { name: name.to_string(), model: m }
    };
    let mut rows = vec![
        row("window_baseline", &|m| m.window_size = Some(WINDOW)),
        row("sliding_k7", &|m| m.single_kernel_override = Some(7)),
        row("deformable_window", &|m| {
            m.window_size = Some(WINDOW);
            m.offsets_enabled = true;
        }),
    ];
    for k in [5, 7, 9] {
        rows.push(row(&format!("dswin_k{k}"), &|m| {
            m.single_kernel_override = Some(k);
            m.offsets_enabled = true;
        }));
    }
    rows.push(row("ms_dswin", &|m| m.offsets_enabled = true));
    rows.push(row("ms_dswin_msg", &|m| {
        m.offsets_enabled = true;
        m.msg_ffn_enabled = true;
    }));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub params: usize,
    pub final_loss: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub input_psnr: f64,
    pub wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub median_psnr: f64,
    pub median_ssim: f64,
}

/// `lower <= upper` on median held-out PSNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub lower: String,
    pub upper: String,
    pub gap_db: f64,
    pub holds: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub runs: Vec<AblationRun>,
    pub summary: Vec<VariantSummary>,
    /// Adjacent and outer comparisons along [`A6_VARIANTS`], when present.
    pub orderings: Vec<Ordering>,
}

impl AblationReport {
    pub fn median_psnr(&self, variant: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.variant == variant).map(|s| s.median_psnr)
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Train every variant once per seed for `train.total_steps` steps and
/// summarise held-out PSNR.
pub fn run_ablation(
    variants: &[Variant],
    train: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    mut progress: impl FnMut(&AblationRun),
) -> Result<AblationReport> {
    train.validate()?;
    let mut runs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let start = Instant::now();
            let cfg = TrainConfig { seed, ..train.clone() };
            let mut t = Trainer::new(&v.model, &cfg, data.clone())?;
            let mut final_loss = f64::NAN;
            let mut quality = (f64::NAN, f64::NAN);
            t.run(|r| {
                final_loss = r.loss;
                if let (Some(p), Some(s)) = (r.psnr, r.ssim) {
                    quality = (p, s);
                }
            })?;
            let run = AblationRun {
                variant: v.name.clone(),
                seed,
                params: t.model.params.num_scalars(),
                final_loss,
                psnr: quality.0,
                ssim: quality.1,
                input_psnr: t.eval.input_psnr,
                wall_s: start.elapsed().as_secs_f64(),
            };
            progress(&run);
            runs.push(run);
        }
    }
    let summary: Vec<VariantSummary> = variants
        .iter()
        .map(|v| {
            let of = |f: fn(&AblationRun) -> f64| median(runs.iter().filter(|r| r.variant == v.name).map(f).collect());
            VariantSummary { variant: v.name.clone(), median_psnr: of(|r| r.psnr), median_ssim: of(|r| r.ssim) }
        })
        .collect();
    let mut report = AblationReport { steps: train.total_steps, seeds: seeds.to_vec(), runs, summary, orderings: Vec::new() };
    let chain: Option<Vec<f64>> = A6_VARIANTS.iter().map(|n| report.median_psnr(n)).collect();
    if let Some(m) = chain {
        for (i, j) in [(0, 1), (1, 2), (0, 2)] {
            let gap_db = m[j] - m[i];
            report.orderings.push(Ordering { lower: A6_VARIANTS[i].into(), upper: A6_VARIANTS[j].into(), gap_db, holds: gap_db >= 0.0 });
        }
    }
    Ok(report)
}

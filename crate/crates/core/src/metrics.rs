//! Region Dice on hard label maps and input-quality metrics (PSNR, SSIM, RMSE).

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Tumour regions as unions of external label codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    WholeTumor,
    TumorCore,
    EnhancingTumor,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WholeTumor, Region::TumorCore, Region::EnhancingTumor];

    pub fn codes(self) -> &'static [u8] {
        match self {
            Region::WholeTumor => &[1, 2, 4],
            Region::TumorCore => &[1, 4],
            Region::EnhancingTumor => &[4],
        }
    }

    pub fn contains(self, code: u8) -> bool {
        self.codes().contains(&code)
    }

    /// Short column suffix: `whole`, `core`, `enh`.
    pub fn key(self) -> &'static str {
        match self {
            Region::WholeTumor => "whole",
            Region::TumorCore => "core",
            Region::EnhancingTumor => "enh",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Region::WholeTumor => "Whole Tumor",
            Region::TumorCore => "Tumor Core",
            Region::EnhancingTumor => "Enhancing Tumor",
        }
    }
}

/// Hard binary Dice `2|A∩B| / (|A|+|B|)` on a region mask; 1 when both are empty.
pub fn region_dice(pred: &LabelMap, truth: &LabelMap, region: Region) -> Result<f64> {
    if pred.extents() != truth.extents() {
        return Err(Error::shape(
            "region_dice",
            format!("{:?} vs {:?}", pred.extents(), truth.extents()),
        ));
    }
    let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.codes().iter().zip(truth.codes()) {
        let (ip, it) = (region.contains(p), region.contains(t));
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Dice for all three regions in [`Region::ALL`] order.
pub fn region_dices(pred: &LabelMap, truth: &LabelMap) -> Result<[f64; 3]> {
    Ok([
        region_dice(pred, truth, Region::WholeTumor)?,
        region_dice(pred, truth, Region::TumorCore)?,
        region_dice(pred, truth, Region::EnhancingTumor)?,
    ])
}

pub fn rmse(reference: &Tensor, test: &Tensor) -> Result<f64> {
    reference.expect_same_shape(test, "rmse")?;
    let sq: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sq / reference.len() as f64).sqrt())
}

/// `20 log10(MAX / RMSE)` with `MAX = max |reference|`.
pub fn psnr(reference: &Tensor, test: &Tensor) -> Result<f64> {
    let e = rmse(reference, test)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(20.0 * (reference.max_abs() / e).log10())
}

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Normalized 1D Gaussian taps of the SSIM window.
pub fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut w: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let s: f64 = w.iter().sum();
    for v in &mut w {
        *v /= s;
    }
    w
}

/// Valid-mode separable filtering of one `[D, H, W]` channel.
fn filter_valid(x: &[f64], [d, h, w]: [usize; 3], taps: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let k = taps.len();
    let (wd, hd, dd) = (w - k + 1, h - k + 1, d - k + 1);
    let mut a = vec![0.0; d * h * wd];
    for z in 0..d {
        for y in 0..h {
            let row = &x[(z * h + y) * w..];
            for o in 0..wd {
                a[(z * h + y) * wd + o] = taps.iter().enumerate().map(|(t, c)| c * row[o + t]).sum();
            }
        }
    }
    let mut b = vec![0.0; d * hd * wd];
    for z in 0..d {
        for o in 0..hd {
            for xx in 0..wd {
                b[(z * hd + o) * wd + xx] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, c)| c * a[(z * h + o + t) * wd + xx])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; dd * hd * wd];
    for o in 0..dd {
        for y in 0..hd {
            for xx in 0..wd {
                out[(o * hd + y) * wd + xx] = taps
                    .iter()
                    .enumerate()
                    .map(|(t, c)| c * b[((o + t) * hd + y) * wd + xx])
                    .sum();
            }
        }
    }
    (out, [dd, hd, wd])
}

/// Mean local SSIM over all channels using a 7³ Gaussian window (σ 1.5) at
/// every position where the window fits. The dynamic range is the reference
/// max − min over all channels.
pub fn ssim(reference: &Tensor, test: &Tensor) -> Result<f64> {
    reference.expect_same_shape(test, "ssim")?;
    let s = reference.shape();
    if s.len() != 4 || s[1..].iter().any(|&e| e < SSIM_WINDOW) {
        return Err(Error::shape(
            "ssim",
            format!("need [C,D,H,W] with spatial extents >= {SSIM_WINDOW}, got {s:?}"),
        ));
    }
    let (lo, hi) = reference.min_max();
    let range = if hi > lo { hi - lo } else { 1.0 };
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let taps = gaussian_taps();
    let ext = [s[1], s[2], s[3]];
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..s[0] {
        let x = reference.channel(c);
        let y = test.channel(c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
        let (mx, _) = filter_valid(x, ext, &taps);
        let (my, _) = filter_valid(y, ext, &taps);
        let (sxx, _) = filter_valid(&xx, ext, &taps);
        let (syy, _) = filter_valid(&yy, ext, &taps);
        let (sxy, _) = filter_valid(&xy, ext, &taps);
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Quality of a perturbed input relative to its clean reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub psnr_db: f64,
    pub ssim: f64,
    pub rmse: f64,
}

pub fn quality(reference: &Tensor, test: &Tensor) -> Result<QualityReport> {
    Ok(QualityReport {
        psnr_db: psnr(reference, test)?,
        ssim: ssim(reference, test)?,
        rmse: rmse(reference, test)?,
    })
}

//! Band-wise PSNR/SSIM and their means (MPSNR/MSSIM).
//!
//! Peak is 1.0 for normalized cubes. PSNR saturates at [`PSNR_CAP`] so that a
//! perfect reconstruction stays finite. SSIM uses an 11×11 Gaussian window
//! (sigma 1.5), `C1 = (0.01·L)²`, `C2 = (0.03·L)²`, half-sample symmetric
//! borders, and averages the SSIM map over every pixel.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hsio::{symmetric_index, HsiCube, SpatialMask};

pub const PSNR_CAP: f64 = 100.0;
pub const DEFAULT_PEAK: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Full,
    /// PSNR over missing pixels only; SSIM stays full-frame.
    MaskedOnly,
}

impl Region {
    pub fn as_str(self) -> &'static str {
        match self {
            Region::Full => "full",
            Region::MaskedOnly => "masked_only",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandQuality {
    pub band: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub mpsnr: f64,
    pub mssim: f64,
    pub per_band: Vec<BandQuality>,
    pub region: Region,
    /// Set when PSNR is region-restricted but SSIM was computed full-frame.
    pub ssim_full_frame: bool,
}

impl QualityReport {
    /// `band,psnr,ssim` rows followed by a `mean` summary row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("band,psnr,ssim\n");
        for b in &self.per_band {
            let _ = writeln!(out, "{},{:.6},{:.6}", b.band, b.psnr, b.ssim);
        }
        let _ = writeln!(out, "mean,{:.6},{:.6}", self.mpsnr, self.mssim);
        out
    }

    pub fn summary_json(&self) -> String {
        format!(
            "{{\"mpsnr\": {:.6}, \"mssim\": {:.6}, \"region\": \"{}\", \"ssim_full_frame\": {}}}",
            self.mpsnr,
            self.mssim,
            self.region.as_str(),
            self.ssim_full_frame
        )
    }
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

/// `10·log10(peak² / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(band_a: &[f32], band_b: &[f32], peak: f64) -> Result<f64> {
    if band_a.len() != band_b.len() || band_a.is_empty() {
        return Err(Error::Shape(format!(
            "psnr: bands have {} and {} samples",
            band_a.len(),
            band_b.len()
        )));
    }
    if !(peak > 0.0) {
        return Err(Error::Config(format!("psnr: peak must be positive, got {peak}")));
    }
    let mse = band_a
        .iter()
        .zip(band_b)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / band_a.len() as f64;
    Ok(psnr_from_mse(mse, peak))
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|t| (-((t * t) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable Gaussian filter with symmetric borders.
fn filter(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            tmp[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * img[i * w + symmetric_index(j as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            out[i * w + j] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * tmp[symmetric_index(i as isize + k as isize - r, h) * w + j])
                .sum();
        }
    }
    out
}

/// Mean structural similarity of two `height × width` bands.
pub fn ssim(band_a: &[f32], band_b: &[f32], height: usize, width: usize, peak: f64) -> Result<f64> {
    if band_a.len() != height * width || band_b.len() != height * width {
        return Err(Error::Shape(format!(
            "ssim: expected {height}x{width} bands, got {} and {} samples",
            band_a.len(),
            band_b.len()
        )));
    }
    if height.min(width) < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {height}x{width}"
        )));
    }
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let taps = gaussian_taps();
    let a: Vec<f64> = band_a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = band_b.iter().map(|&v| v as f64).collect();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let (mu_a, mu_b) = (filter(&a, height, width, &taps), filter(&b, height, width, &taps));
    let (e_aa, e_bb, e_ab) = (
        filter(&aa, height, width, &taps),
        filter(&bb, height, width, &taps),
        filter(&ab, height, width, &taps),
    );
    let total: f64 = (0..height * width)
        .map(|p| {
            let (ma, mb) = (mu_a[p], mu_b[p]);
            let va = e_aa[p] - ma * ma;
            let vb = e_bb[p] - mb * mb;
            let cov = e_ab[p] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / (height * width) as f64)
}

/// Band-mean PSNR, restricted to missing pixels when `mask` is given.
pub fn mpsnr(x_hat: &HsiCube, reference: &HsiCube, mask: Option<&SpatialMask>) -> Result<f64> {
    let per_band = band_psnrs(x_hat, reference, mask)?;
    Ok(per_band.iter().sum::<f64>() / per_band.len() as f64)
}

fn band_psnrs(x_hat: &HsiCube, reference: &HsiCube, mask: Option<&SpatialMask>) -> Result<Vec<f64>> {
    if !x_hat.same_dims(reference) {
        return Err(Error::Shape(format!(
            "evaluate: {}x{}x{} vs reference {}x{}x{}",
            x_hat.height(),
            x_hat.width(),
            x_hat.bands(),
            reference.height(),
            reference.width(),
            reference.bands()
        )));
    }
    let missing: Option<Vec<usize>> = match mask {
        None => None,
        Some(m) => {
            crate::operators::check_mask_dims(reference, m)?;
            let idx: Vec<usize> = (0..m.bits().len()).filter(|&p| m.bits()[p] == 0).collect();
            if idx.is_empty() {
                return Err(Error::Config("masked-region metrics need at least one missing pixel".into()));
            }
            Some(idx)
        }
    };
    (0..x_hat.bands())
        .map(|b| match &missing {
            None => psnr(x_hat.band(b), reference.band(b), DEFAULT_PEAK),
            Some(idx) => {
                let (xa, xb) = (x_hat.band(b), reference.band(b));
                let a: Vec<f32> = idx.iter().map(|&p| xa[p]).collect();
                let r: Vec<f32> = idx.iter().map(|&p| xb[p]).collect();
                psnr(&a, &r, DEFAULT_PEAK)
            }
        })
        .collect()
}

/// Per-band PSNR/SSIM with their means. With a mask, PSNR covers the missing
/// pixels only and SSIM remains full-frame (`ssim_full_frame` is set).
pub fn evaluate(x_hat: &HsiCube, reference: &HsiCube, mask: Option<&SpatialMask>) -> Result<QualityReport> {
    let psnrs = band_psnrs(x_hat, reference, mask)?;
    let (h, w) = (x_hat.height(), x_hat.width());
    let per_band = psnrs
        .into_iter()
        .enumerate()
        .map(|(b, p)| {
            Ok(BandQuality {
                band: b,
                psnr: p,
                ssim: ssim(x_hat.band(b), reference.band(b), h, w, DEFAULT_PEAK)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_band.len() as f64;
    Ok(QualityReport {
        mpsnr: per_band.iter().map(|b| b.psnr).sum::<f64>() / n,
        mssim: per_band.iter().map(|b| b.ssim).sum::<f64>() / n,
        region: if mask.is_some() { Region::MaskedOnly } else { Region::Full },
        ssim_full_frame: mask.is_some(),
        per_band,
    })
}

use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Reported in place of +∞ when the two images are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

impl Metrics {
    pub fn compute(x: &Image, reference: &Image) -> Result<Metrics> {
        Ok(Metrics {
            psnr: psnr(x, reference, 1.0)?,
            ssim: ssim(x, reference)?,
            mse: mse(x, reference)?,
        })
    }
}

pub fn mse(x: &Image, reference: &Image) -> Result<f64> {
    x.ensure_same_shape(reference)?;
    let n = x.len() as f64;
    Ok(x.data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn psnr(x: &Image, reference: &Image, peak: f64) -> Result<f64> {
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be positive, got {peak}")));
    }
    let m = mse(x, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP_DB))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable "valid" filtering: output is `(h - 10) × (w - 10)`.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let base = r * w + c;
            rows[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[base + k])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[(r + k) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean SSIM with an 11×11 Gaussian window (σ = 1.5), computed over window
/// positions fully inside the image and averaged over channels.
pub fn ssim(x: &Image, reference: &Image) -> Result<f64> {
    x.ensure_same_shape(reference)?;
    let (h, w) = (x.height(), x.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * SSIM_RANGE).powi(2);
    let c2 = (SSIM_K2 * SSIM_RANGE).powi(2);

    let mut total = 0.0;
    for ch in 0..x.channels() {
        let a = x.plane(ch);
        let b = reference.plane(ch);
        let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u * v).collect();

        let mu_a = filter_valid(&a, h, w, &taps);
        let mu_b = filter_valid(&b, h, w, &taps);
        let e_aa = filter_valid(&aa, h, w, &taps);
        let e_bb = filter_valid(&bb, h, w, &taps);
        let e_ab = filter_valid(&ab, h, w, &taps);

        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / n as f64;
    }
    Ok(total / x.channels() as f64)
}

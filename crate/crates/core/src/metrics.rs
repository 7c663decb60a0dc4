//! PSNR and SSIM on 8-bit frames.
//!
//! Both metrics quantize their inputs to 8 bits first, so scores match
//! what is measured on the PNG files written to disk.

use crate::error::{Error, Result};
use crate::media_io::{RgbFrame, LUMA_WEIGHTS};

/// PSNR reported for identical frames.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const DYNAMIC_RANGE: f64 = 255.0;

fn check(a: &RgbFrame, b: &RgbFrame) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// PSNR over raw 8-bit samples, all channels jointly.
pub fn psnr_u8(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(format!(
            "psnr inputs have {} and {} samples",
            a.len(),
            b.len()
        )));
    }
    let sse: u64 = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    if sse == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = sse as f64 / a.len() as f64;
    Ok((10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    check(a, b)?;
    psnr_u8(&a.quantize(), &b.quantize())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter, keeping only fully covered positions.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM of two single-channel images on the 0..255 scale.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    if a.len() != h * w || b.len() != h * w {
        return Err(Error::shape("ssim plane size mismatch"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let c1 = (SSIM_K1 * DYNAMIC_RANGE).powi(2);
    let c2 = (SSIM_K2 * DYNAMIC_RANGE).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2))
        })
        .sum();
    Ok(total / n as f64)
}

/// Luma of an 8-bit RGB frame on the 0..255 scale.
pub fn luma_u8(frame: &RgbFrame) -> Vec<f64> {
    let q = frame.quantize();
    let n = frame.height() * frame.width();
    (0..n)
        .map(|i| {
            LUMA_WEIGHTS[2] * q[2 * n + i] as f64
                + LUMA_WEIGHTS[1] * q[n + i] as f64
                + LUMA_WEIGHTS[0] * q[i] as f64
        })
        .collect()
}

/// SSIM on luma with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range 255.
pub fn ssim(a: &RgbFrame, b: &RgbFrame) -> Result<f64> {
    check(a, b)?;
    ssim_plane(&luma_u8(a), &luma_u8(b), a.height(), a.width())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize) -> RgbFrame {
        RgbFrame::from_fn(h, w, |c, y, x| ((c * 37 + y * 11 + x * 7) % 200) as f64 / 255.0)
    }

    #[test]
    fn identical_frames() {
        let a = pattern(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_offset_psnr() {
        let a = pattern(16, 16);
        let b = a.map(|v| v + 16.0 / 255.0);
        // MSE is exactly 256.
        let want = 20.0 * (255.0f64 / 16.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn window_is_normalized() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn size_checks() {
        let a = pattern(16, 16);
        assert!(psnr(&a, &pattern(16, 15)).is_err());
        assert!(ssim(&pattern(10, 16), &pattern(10, 16)).is_err());
    }
}

//! PSNR and SSIM on [0,1]-range RGB tensors.
//!
//! PSNR is computed over all pixels and channels with MAX = 1; identical
//! images report +inf. SSIM uses the original constants: 11x11 Gaussian
//! window with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1, computed
//! per channel over valid window positions and averaged.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// BT.601 luma weights, used by the optional Y-channel PSNR.
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.same_shape(b)?;
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / a.data.len() as f64;
    Ok(mse_to_db(mse))
}

/// PSNR on the luminance channel only.
pub fn psnr_y(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.same_shape(b)?;
    let Shape { n, c, h, w } = a.shape;
    if c != 3 {
        return Err(Error::ShapeMismatch {
            expected: "3 channels".into(),
            got: a.shape.to_string(),
        });
    }
    let mut mse = 0.0;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut d = 0.0;
                for ci in 0..3 {
                    d += LUMA[ci] * (a.at(ni, ci, y, x) as f64 - b.at(ni, ci, y, x) as f64);
                }
                mse += d * d;
            }
        }
    }
    Ok(mse_to_db(mse / (n * h * w) as f64))
}

fn mse_to_db(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let denom = 2.0 * SSIM_SIGMA * SSIM_SIGMA;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            let v = (-(dy * dy + dx * dx) / denom).exp();
            k[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    a.same_shape(b)?;
    let Shape { n, c, h, w } = a.shape;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            h,
            w,
            min: SSIM_WINDOW,
        });
    }
    let window = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1; // (K1·L)² with L = 1
    let c2 = SSIM_K2 * SSIM_K2;

    let mut total = 0.0;
    let mut count = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            for wy in 0..=(h - SSIM_WINDOW) {
                for wx in 0..=(w - SSIM_WINDOW) {
                    let (mut mu_a, mut mu_b) = (0.0f64, 0.0f64);
                    let (mut aa, mut bb, mut ab) = (0.0f64, 0.0f64, 0.0f64);
                    for ky in 0..SSIM_WINDOW {
                        let ra = a.row(ni, ci, wy + ky);
                        let rb = b.row(ni, ci, wy + ky);
                        for kx in 0..SSIM_WINDOW {
                            let g = window[ky * SSIM_WINDOW + kx];
                            let va = ra[wx + kx] as f64;
                            let vb = rb[wx + kx] as f64;
                            mu_a += g * va;
                            mu_b += g * vb;
                            aa += g * va * va;
                            bb += g * vb * vb;
                            ab += g * va * vb;
                        }
                    }
                    let var_a = aa - mu_a * mu_a;
                    let var_b = bb - mu_b * mu_b;
                    let cov = ab - mu_a * mu_b;
                    let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                    total += s;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

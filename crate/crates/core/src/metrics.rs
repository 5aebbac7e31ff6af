//! Full-reference image quality metrics on `[0, peak]` images.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    y.expect_shape(x.shape(), "mse")?;
    let sum: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum();
    Ok(sum / x.len() as f64)
}

/// `10 log10(peak^2 / MSE)`; `+inf` when the images are identical.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let m = mse(x, y)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM with an 11×11 Gaussian window (sigma 1.5), computed per
/// channel over the valid region and averaged over channels and samples.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, peak: f64) -> Result<f64> {
    let s = x.shape();
    y.expect_shape(s, "ssim")?;
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{s} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let mut total = 0.0;
    let mut planes = 0usize;
    for n in 0..s.n {
        for c in 0..s.c {
            let a: Vec<f64> = x.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let b: Vec<f64> = y.plane(n, c).iter().map(|v| v.as_f64()).collect();
            let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
            let mu_a = filter_valid(&a, s.h, s.w, &g);
            let mu_b = filter_valid(&b, s.h, s.w, &g);
            let e_aa = filter_valid(&prod(&a, &a), s.h, s.w, &g);
            let e_bb = filter_valid(&prod(&b, &b), s.h, s.w, &g);
            let e_ab = filter_valid(&prod(&a, &b), s.h, s.w, &g);
            let mut acc = 0.0;
            for i in 0..mu_a.len() {
                let (ma, mb) = (mu_a[i], mu_b[i]);
                let va = e_aa[i] - ma * ma;
                let vb = e_bb[i] - mb * mb;
                let cov = e_ab[i] - ma * mb;
                acc += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
            total += acc / mu_a.len() as f64;
            planes += 1;
        }
    }
    Ok(total / planes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn window_is_normalized_and_symmetric() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
        assert!(g[5] > g[4]);
    }

    #[test]
    fn small_images_are_rejected() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8));
        assert!(ssim(&x, &x, 1.0).is_err());
    }
}

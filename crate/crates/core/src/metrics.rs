//! Image-quality metrics, always restricted to a mask when one is given.

use crate::error::{Error, Result};
use crate::spectral::SpectralImage;

/// Returned by [`psnr`] when the images agree exactly.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check(a: &SpectralImage, b: &SpectralImage, mask: Option<&SpectralImage>) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::Dimension(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    if let Some(m) = mask {
        if !m.same_resolution(a) || m.channels() != 1 {
            return Err(Error::Dimension("mask must be single-channel at image resolution".into()));
        }
    }
    Ok(())
}

fn inside(mask: Option<&SpectralImage>, p: usize) -> bool {
    mask.map_or(true, |m| m.data()[p] > 0.5)
}

fn mse(a: &SpectralImage, b: &SpectralImage, mask: Option<&SpectralImage>) -> Result<f64> {
    check(a, b, mask)?;
    let c = a.channels();
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.pixel_count() {
        if !inside(mask, p) {
            continue;
        }
        for j in 0..c {
            let d = a.data()[p * c + j] - b.data()[p * c + j];
            sum += d * d;
        }
        n += c;
    }
    if n == 0 {
        return Err(Error::InvalidParameter("mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

/// `10 log10(peak² / MSE)`; [`PSNR_IDENTICAL`] when the MSE is zero.
pub fn psnr(a: &SpectralImage, b: &SpectralImage, peak: f64, mask: Option<&SpectralImage>) -> Result<f64> {
    let e = mse(a, b, mask)?;
    Ok(if e == 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (peak * peak / e).log10()
    })
}

pub fn rmse(a: &SpectralImage, b: &SpectralImage, mask: Option<&SpectralImage>) -> Result<f64> {
    Ok(mse(a, b, mask)?.sqrt())
}

/// Mean angular error in degrees between unit-vector images.
pub fn normal_mae(a: &SpectralImage, b: &SpectralImage, mask: Option<&SpectralImage>) -> Result<f64> {
    check(a, b, mask)?;
    if a.channels() != 3 {
        return Err(Error::Dimension("normal maps need 3 channels".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..a.pixel_count() {
        if !inside(mask, p) {
            continue;
        }
        let u = &a.data()[3 * p..3 * p + 3];
        let v = &b.data()[3 * p..3 * p + 3];
        let nu = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        let nv = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if (nu - 1.0).abs() > 1e-3 || (nv - 1.0).abs() > 1e-3 {
            return Err(Error::InvalidParameter(format!(
                "non-unit normal at pixel {p} (norms {nu:.4}, {nv:.4})"
            )));
        }
        let d = (u[0] * v[0] + u[1] * v[1] + u[2] * v[2]).clamp(-1.0, 1.0);
        sum += d.acos().to_degrees();
        n += 1;
    }
    if n == 0 {
        return Err(Error::InvalidParameter("mask selects no pixels".into()));
    }
    Ok(sum / n as f64)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (k, v) in w.iter_mut().enumerate() {
        let x = k as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Structural similarity of the channel-mean images with an 11×11 Gaussian
/// window (σ = 1.5), peak 1. Averaged over every window that fits inside the
/// image and whose center lies in the mask.
pub fn ssim(a: &SpectralImage, b: &SpectralImage, mask: Option<&SpectralImage>) -> Result<f64> {
    check(a, b, mask)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Dimension(format!("{w}x{h} image is smaller than the SSIM window")));
    }
    let gray = |img: &SpectralImage| -> Vec<f64> {
        let c = img.channels();
        (0..w * h)
            .map(|p| img.data()[p * c..(p + 1) * c].iter().sum::<f64>() / c as f64)
            .collect()
    };
    let (x, y) = (gray(a), gray(b));
    let win = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let half = SSIM_WINDOW / 2;
    let mut sum = 0.0;
    let mut n = 0usize;
    for cy in half..h - half {
        for cx in half..w - half {
            if !inside(mask, cy * w + cx) {
                continue;
            }
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (j, wy) in win.iter().enumerate() {
                for (i, wx) in win.iter().enumerate() {
                    let p = (cy + j - half) * w + cx + i - half;
                    let wt = wx * wy;
                    mx += wt * x[p];
                    my += wt * y[p];
                    sxx += wt * x[p] * x[p];
                    syy += wt * y[p] * y[p];
                    sxy += wt * x[p] * y[p];
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cxy = sxy - mx * my;
            sum += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidParameter("mask selects no SSIM windows".into()));
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> SpectralImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = (0..w * h * c).map(|_| 0.5 + 0.2 * (rng.gen::<f64>() - 0.5)).collect();
        SpectralImage::from_data(w, h, c, d).unwrap()
    }

    #[test]
    fn psnr_values() {
        let a = SpectralImage::filled(4, 4, 1, 0.5);
        assert_eq!(psnr(&a, &a, 1.0, None).unwrap(), PSNR_IDENTICAL);
        let b = SpectralImage::filled(4, 4, 1, 0.6);
        assert!((psnr(&a, &b, 1.0, None).unwrap() - 20.0).abs() < 1e-9);
        let c = SpectralImage::new(4, 4, 2);
        assert!(psnr(&a, &c, 1.0, None).is_err());
    }

    #[test]
    fn mask_ignores_outside_pixels() {
        let a = SpectralImage::filled(4, 4, 1, 0.5);
        let mut b = a.clone();
        b.set(0, 0, 0, 100.0);
        let mut m = SpectralImage::filled(4, 4, 1, 1.0);
        m.set(0, 0, 0, 0.0);
        assert_eq!(psnr(&a, &b, 1.0, Some(&m)).unwrap(), PSNR_IDENTICAL);
        assert_eq!(rmse(&a, &b, Some(&m)).unwrap(), 0.0);
    }

    #[test]
    fn rmse_offset_and_permutation() {
        let a = noise(5, 3, 2, 1);
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        let b = a.map(|v| v + 0.25);
        assert!((rmse(&a, &b, None).unwrap() - 0.25).abs() < 1e-12);
        let rev = |img: &SpectralImage| {
            let mut d: Vec<f64> = img.data().chunks(2).rev().flatten().copied().collect();
            d.shrink_to_fit();
            SpectralImage::from_data(5, 3, 2, d).unwrap()
        };
        let c = noise(5, 3, 2, 2);
        assert!((rmse(&a, &c, None).unwrap() - rmse(&rev(&a), &rev(&c), None).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn normal_errors() {
        let mk = |v: [f64; 3]| SpectralImage::from_data(2, 2, 3, v.repeat(4)).unwrap();
        let z = mk([0.0, 0.0, 1.0]);
        assert_eq!(normal_mae(&z, &z, None).unwrap(), 0.0);
        assert!((normal_mae(&z, &mk([1.0, 0.0, 0.0]), None).unwrap() - 90.0).abs() < 1e-9);
        assert!((normal_mae(&z, &mk([0.0, 0.0, -1.0]), None).unwrap() - 180.0).abs() < 1e-9);
        assert!(normal_mae(&z, &mk([0.0, 0.0, 0.5]), None).is_err());
    }

    #[test]
    fn ssim_properties() {
        let a = noise(24, 20, 3, 3);
        assert!((ssim(&a, &a, None).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg, None).unwrap() < 0.2);
        let b = noise(24, 20, 3, 4);
        assert!((ssim(&a, &b, None).unwrap() - ssim(&b, &a, None).unwrap()).abs() < 1e-12);
        assert!(ssim(&noise(8, 20, 1, 0), &noise(8, 20, 1, 1), None).is_err());
    }
}

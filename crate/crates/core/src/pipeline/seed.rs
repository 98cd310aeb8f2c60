//! Initial splats on the visual hull of the capture masks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::io::CaptureSet;
use crate::scene::Gaussian2D;
use crate::spectral::{orthonormal_basis, Mat3, Vec3};

/// Bilinear mask lookup at a continuous pixel position; zero outside.
fn mask_at(mask: &crate::spectral::SpectralImage, x: f64, y: f64) -> f64 {
    let (w, h) = (mask.width() as f64, mask.height() as f64);
    if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
        return 0.0;
    }
    let xc = x.clamp(0.0, w - 1.0);
    let yc = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let x1 = (x0 + 1).min(mask.width() - 1);
    let y1 = (y0 + 1).min(mask.height() - 1);
    let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
    let m = |x: usize, y: usize| mask.get(x, y, 0);
    (1.0 - fy) * ((1.0 - fx) * m(x0, y0) + fx * m(x1, y0)) + fy * ((1.0 - fx) * m(x0, y1) + fx * m(x1, y1))
}

/// True when `p` projects inside every mask.
pub fn in_visual_hull(captures: &CaptureSet, p: &Vec3) -> bool {
    captures.views.iter().all(|v| match v.camera.project(p) {
        Some((px, _)) => mask_at(&v.mask, px.x, px.y) >= 0.5,
        None => false,
    })
}

/// Point closest (in least squares) to every optical axis.
pub fn axes_center(captures: &CaptureSet) -> Result<Vec3> {
    let mut a = Mat3::zeros();
    let mut b = Vec3::zeros();
    for v in &captures.views {
        let d = v.camera.rotation.transpose() * Vec3::z();
        let p = Mat3::identity() - d * d.transpose();
        a += p;
        b += p * v.camera.center();
    }
    a.try_inverse()
        .map(|inv| inv * b)
        .ok_or_else(|| Error::Degenerate("optical axes are parallel".into()))
}

/// Places `count` splats on the hull boundary found by bisection along
/// Fibonacci directions from the axes center (assumes a star-shaped hull).
/// Each splat faces along its direction with a random in-plane rotation;
/// the scale is `scale_factor` times the mean spacing.
pub fn seed_from_masks(
    captures: &CaptureSet,
    count: usize,
    scale_factor: f64,
    opacity: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Gaussian2D>> {
    if count == 0 {
        return Err(Error::InvalidParameter("seed count must be positive".into()));
    }
    let c = axes_center(captures)?;
    if !in_visual_hull(captures, &c) {
        return Err(Error::Degenerate("mask hull does not contain the axes center".into()));
    }
    let reach = captures
        .views
        .iter()
        .map(|v| (v.camera.center() - c).norm())
        .fold(f64::INFINITY, f64::min)
        * 0.9;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut points = Vec::with_capacity(count);
    for k in 0..count {
        let y = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
        let r = (1.0 - y * y).sqrt();
        let phi = golden * k as f64;
        let d = Vec3::new(r * phi.cos(), y, r * phi.sin());
        // march out to the first outside sample, then bisect
        let step = reach / 64.0;
        let mut lo = 0.0;
        let mut hi = reach;
        let mut s = step;
        while s < reach {
            if !in_visual_hull(captures, &(c + d * s)) {
                hi = s;
                break;
            }
            lo = s;
            s += step;
        }
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if in_visual_hull(captures, &(c + d * mid)) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        points.push((c + d * lo, d, lo));
    }
    let mean_r = points.iter().map(|p| p.2).sum::<f64>() / count as f64;
    let spacing = (4.0 * std::f64::consts::PI * mean_r * mean_r / count as f64).sqrt();
    let scale = spacing * scale_factor;
    Ok(points
        .into_iter()
        .map(|(p, n, _)| {
            let (a, b) = orthonormal_basis(&n);
            let ang: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let tu = a * ang.cos() + b * ang.sin();
            Gaussian2D::new(p, tu, n.cross(&tu), [scale, scale], opacity).expect("valid seed")
        })
        .collect())
}

//! Reconstruction quality against a ground-truth bundle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{CaptureSet, GroundTruth};
use crate::metrics::{normal_mae, psnr, rmse, ssim};
use crate::scene::Scene;
use crate::spectral::SpectralImage;

use super::relight::attribute_maps;

/// Metrics averaged over views. Every metric is restricted to pixels inside
/// the ground-truth mask that the reconstruction covers; `coverage_iou`
/// reports how well those two sets agree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: usize,
    pub albedo_psnr: f64,
    pub albedo_ssim: f64,
    pub albedo_nir_rmse: f64,
    pub roughness_rmse: f64,
    pub metallic_rmse: f64,
    pub normal_mae_deg: f64,
    pub coverage_iou: f64,
    /// Computed over the joint mask of every view rather than averaged.
    pub albedo_psnr_pooled: f64,
}

/// Coverage threshold for a reconstructed pixel to count as covered.
pub const COVERED_ALPHA: f64 = 0.5;

pub fn evaluate(scene: &Scene, captures: &CaptureSet, gt: &GroundTruth) -> Result<EvalReport> {
    if captures.len() != gt.views.len() {
        return Err(Error::Dimension(format!(
            "{} views but {} ground-truth views",
            captures.len(),
            gt.views.len()
        )));
    }
    let mut acc = [0.0; 7];
    let (mut sq, mut cnt) = (0.0, 0usize);
    for (v, t) in captures.views.iter().zip(&gt.views) {
        let maps = attribute_maps(scene, &v.camera)?;
        let m = t.mask.data();
        let a = maps.alpha.data();
        let (mut inter, mut uni) = (0.0, 0.0);
        let eval: Vec<f64> = (0..m.len())
            .map(|p| {
                let g = m[p] > 0.5;
                let r = a[p] > COVERED_ALPHA;
                inter += (g && r) as u8 as f64;
                uni += (g || r) as u8 as f64;
                (g && r) as u8 as f64
            })
            .collect();
        let mask = SpectralImage::from_data(v.camera.width, v.camera.height, 1, eval)?;
        acc[0] += psnr(&maps.albedo_rgb, &t.albedo_rgb, 1.0, Some(&mask))?;
        acc[1] += ssim(&maps.albedo_rgb, &t.albedo_rgb, Some(&mask))?;
        acc[2] += rmse(&maps.albedo_nir, &t.albedo_nir, Some(&mask))?;
        acc[3] += rmse(&maps.roughness, &t.roughness, Some(&mask))?;
        acc[4] += rmse(&maps.metallic, &t.metallic, Some(&mask))?;
        acc[5] += normal_mae(&maps.normal, &t.normal, Some(&mask))?;
        acc[6] += if uni > 0.0 { inter / uni } else { 1.0 };
        for p in 0..m.len() {
            if mask.data()[p] > 0.5 {
                for c in 0..3 {
                    let d = maps.albedo_rgb.data()[3 * p + c] - t.albedo_rgb.data()[3 * p + c];
                    sq += d * d;
                }
                cnt += 3;
            }
        }
    }
    let n = captures.len() as f64;
    Ok(EvalReport {
        views: captures.len(),
        albedo_psnr: acc[0] / n,
        albedo_ssim: acc[1] / n,
        albedo_nir_rmse: acc[2] / n,
        roughness_rmse: acc[3] / n,
        metallic_rmse: acc[4] / n,
        normal_mae_deg: acc[5] / n,
        coverage_iou: acc[6] / n,
        albedo_psnr_pooled: if sq == 0.0 { f64::INFINITY } else { 10.0 * (cnt as f64 / sq).log10() },
    })
}

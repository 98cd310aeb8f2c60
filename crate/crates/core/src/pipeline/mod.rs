//! Three-stage optimization: geometry from RGB, NIR reflectance from
//! flash-only images, then RGB albedo and environment lighting.

mod eval;
mod losses;
mod optim;
mod relight;
mod seed;
mod shaders;
mod stages;

pub use eval::{evaluate, EvalReport, COVERED_ALPHA};
pub use losses::{depth_normal_loss, edge_aware, l1_masked, mask_loss, rgb_edge_loss, GeomGrad, GEOM_MIN_ALPHA};
pub use optim::{Adam, AdamParams};
pub use relight::{attribute_maps, relight, AttributeMaps, RelightConfig};
pub use seed::{axes_center, in_visual_hull, seed_from_masks};
pub use shaders::{nir_shading, NirShader, RawBasis, ShShader};
pub use stages::{
    initial_bases, run, stage1, stage2, stage3, transfer_cross_spectral, LogRow, LossLog, LossWeights, OptimConfig,
    Stage1Config, Stage2Config, Stage3Config, StageSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{Camera, Vec3};

/// Flash co-mounted with the camera.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlashModel {
    /// Offset from the camera center, camera frame.
    pub offset: Vec3,
    pub intensity: f64,
}

impl FlashModel {
    pub fn new(offset: Vec3, intensity: f64) -> Result<Self> {
        if !(intensity > 0.0) || !intensity.is_finite() {
            return Err(Error::InvalidParameter(format!("flash intensity {intensity} must be positive")));
        }
        Ok(FlashModel { offset, intensity })
    }

    pub fn position(&self, camera: &Camera) -> Vec3 {
        camera.center() + camera.rotation.transpose() * self.offset
    }
}

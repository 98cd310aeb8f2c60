//! Rendering a reconstructed scene: attribute maps and relighting.

use rayon::prelude::*;

use crate::brdf::{lobe, SurfaceBrdf};
use crate::envlight::{mis_pixel, EnvironmentMap, IndirectMode, MisConfig, Occluders, RAY_EPSILON};
use crate::error::{Error, Result};
use crate::render::{rasterize, ValueShader};
use crate::scene::{Scene, Stage};
use crate::spectral::{Camera, PointLight, SpectralImage};

use super::stages::{image_from, pixel_rng, pixel_surfaces, shade_albedo};

/// Per-pixel material and geometry of a reconstruction, normalized by
/// coverage (zero where coverage ≤ 1e-3).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMaps {
    pub albedo_rgb: SpectralImage,
    pub albedo_nir: SpectralImage,
    pub roughness: SpectralImage,
    pub metallic: SpectralImage,
    pub normal: SpectralImage,
    pub alpha: SpectralImage,
}

/// Material maps need the cross-spectral transfer; before it, splats
/// report their current mixture collapse.
pub fn attribute_maps(scene: &Scene, camera: &Camera) -> Result<AttributeMaps> {
    let mut values = Vec::with_capacity(6 * scene.len());
    for g in &scene.gaussians {
        let c = match g.frozen {
            Some(c) => c,
            None if !g.mixture_logits.is_empty() => crate::brdf::collapse(&scene.bases, &g.mixture_weights())?,
            None => crate::brdf::Collapsed {
                roughness: 0.0,
                metallic: 0.0,
                albedo_nir: 0.0,
            },
        };
        let a = g.albedo_rgb();
        values.extend_from_slice(&[a[0], a[1], a[2], c.albedo_nir, c.roughness, c.metallic]);
    }
    let out = rasterize(&scene.gaussians, camera, &ValueShader { channels: 6, values });
    let attrs = out.normalized_radiance();
    let (w, h) = (out.width(), out.height());
    let pick = |lo: usize, n: usize| {
        let d = (0..w * h).flat_map(|p| attrs.data()[6 * p + lo..6 * p + lo + n].iter().copied()).collect();
        image_from(d, w, h, n)
    };
    Ok(AttributeMaps {
        albedo_rgb: pick(0, 3),
        albedo_nir: pick(3, 1),
        roughness: pick(4, 1),
        metallic: pick(5, 1),
        normal: out.normal_map(),
        alpha: out.alpha.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelightConfig {
    pub n_brdf: usize,
    pub n_light: usize,
    pub indirect: IndirectMode,
    pub seed: u64,
    /// Composite the environment behind the object.
    pub background: bool,
}

impl Default for RelightConfig {
    fn default() -> Self {
        RelightConfig {
            n_brdf: 64,
            n_light: 64,
            indirect: IndirectMode::Off,
            seed: 0,
            background: true,
        }
    }
}

/// RGB image of a stage-3 scene under new lighting: MIS environment
/// shading plus shadowed point lights (inverse square, per-channel albedo).
pub fn relight(
    scene: &Scene,
    env: Option<&EnvironmentMap>,
    lights: &[PointLight],
    camera: &Camera,
    config: &RelightConfig,
) -> Result<SpectralImage> {
    if scene.stage < Stage::Transferred {
        return Err(Error::StageOrder(format!(
            "relighting needs transferred materials, got stage {:?}",
            scene.stage.name()
        )));
    }
    let (w, h) = (camera.width, camera.height);
    if env.is_none() && lights.is_empty() {
        return Ok(SpectralImage::new(w, h, 3));
    }
    let ones = ValueShader {
        channels: 1,
        values: vec![1.0; scene.len()],
    };
    let out = rasterize(&scene.gaussians, camera, &ones);
    let surfaces = pixel_surfaces(scene, &out, None);
    let albedo: Vec<[f64; 3]> = scene.gaussians.iter().map(|g| g.albedo_rgb()).collect();
    let occ = Occluders::new(&scene.gaussians);
    let blockers = |k: usize| albedo[k];
    let mis = MisConfig {
        n_brdf: config.n_brdf,
        n_light: config.n_light,
        indirect: config.indirect,
        record_env_terms: false,
    };
    let shaded: Vec<(usize, [f64; 3])> = surfaces
        .par_iter()
        .map(|s| {
            let a = shade_albedo(&s.weights, &albedo);
            let brdf = SurfaceBrdf {
                albedo: [a[0], a[1], a[2], s.albedo_nir],
                roughness: s.roughness,
                metallic: s.metallic,
            };
            let mut rgb = [0.0; 3];
            if let Some(env) = env {
                let mut rng = pixel_rng(config.seed, 0, 0, s.px as u64);
                rgb = mis_pixel(&s.point, &brdf, env, Some(&occ), Some(&blockers), &mis, &mut rng).radiance;
            }
            let (p, n, o) = (s.point.position, s.point.normal, s.point.view);
            for l in lights {
                let a = l.position - p;
                let dist = a.norm();
                if dist < 1e-12 {
                    continue;
                }
                let i = a / dist;
                let ci = n.dot(&i);
                if ci <= 0.0 {
                    continue;
                }
                let origin = p + n * RAY_EPSILON;
                let mut t_vis = 1.0;
                occ.trace(&origin, &i, |_, t, alpha| {
                    if t < dist - RAY_EPSILON {
                        t_vis *= 1.0 - alpha;
                    }
                    t_vis >= 1e-4
                });
                if t_vis < 1e-4 {
                    continue;
                }
                let e = l.intensity / (dist * dist) * ci * t_vis;
                let (co, cio) = (n.dot(&o), i.dot(&o));
                for c in 0..3 {
                    rgb[c] += e * lobe(brdf.albedo[c], brdf.roughness, brdf.metallic, ci, co, cio);
                }
            }
            (s.px, rgb)
        })
        .collect();
    let mut img = SpectralImage::new(w, h, 3);
    let alpha = out.alpha.data();
    for p in 0..w * h {
        if config.background {
            if let Some(env) = env {
                let bg = env.eval(&camera.pixel_ray(p % w, p / w).direction);
                for c in 0..3 {
                    img.data_mut()[3 * p + c] = (1.0 - alpha[p]).max(0.0) * bg[c];
                }
            }
        }
    }
    for (p, rgb) in shaded {
        for c in 0..3 {
            img.data_mut()[3 * p + c] += alpha[p].min(1.0) * rgb[c];
        }
    }
    Ok(img)
}

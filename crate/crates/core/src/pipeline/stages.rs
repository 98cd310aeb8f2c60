//! Stage drivers: geometry from RGB, NIR reflectance from flash images,
//! cross-spectral transfer, RGB albedo and environment from ambient images.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{collapse, param, Basis, BasisSet, SurfaceBrdf};
use crate::envlight::{mis_pixel, EnvironmentMap, IndirectMode, MisConfig, Occluders, ShadingPoint};
use crate::error::{io_err, Error, Result};
use crate::io::{CaptureSet, CaptureView};
use crate::render::{backward, rasterize, RenderGrad, RenderOutput, SceneGrad, ValueShader, ALPHA_NORMALIZE_MIN};
use crate::scene::{sh_coeff_count, Gaussian2D, Scene, Stage, DEFAULT_SH_DEGREE};
use crate::spectral::{Vec3, SpectralImage};

use super::losses::{depth_normal_loss, edge_aware, l1_masked, mask_loss};
use super::optim::{Adam, AdamParams};
use super::seed::seed_from_masks;
use super::shaders::{NirShader, RawBasis, ShShader};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub geom: f64,
    pub mask: f64,
    pub smooth: f64,
    pub rgb_edge: f64,
    /// Edge sharpness of the RGB-edge guide.
    pub k: f64,
    /// Edge sharpness of the stage-2 smoothness guide.
    pub k_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            geom: 0.05,
            mask: 0.1,
            smooth: 0.01,
            rgb_edge: 0.01,
            k: 10.0,
            k_s: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.geom, self.mask, self.smooth, self.rgb_edge, self.k, self.k_s];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub steps: usize,
    pub gaussians: usize,
    /// Initial splat scale relative to the seed spacing.
    pub scale_factor: f64,
    pub init_opacity: f64,
    pub views_per_step: usize,
    pub lr_center: f64,
    pub lr_rotation: f64,
    pub lr_scale: f64,
    pub lr_opacity: f64,
    pub lr_sh: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 300,
            gaussians: 3000,
            scale_factor: 0.8,
            init_opacity: 0.9,
            views_per_step: 1,
            lr_center: 5e-4,
            lr_rotation: 3e-3,
            lr_scale: 3e-3,
            lr_opacity: 0.02,
            lr_sh: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub steps: usize,
    pub bases: usize,
    pub views_per_step: usize,
    pub lr_basis: f64,
    pub lr_mixture: f64,
    /// Geometry rates are the stage-1 rates times this factor.
    pub geometry_lr_scale: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            steps: 400,
            bases: 2,
            views_per_step: 1,
            lr_basis: 0.02,
            lr_mixture: 0.05,
            geometry_lr_scale: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub steps: usize,
    pub views_per_step: usize,
    pub lr_albedo: f64,
    pub lr_env: f64,
    pub env_height: usize,
    pub env_width: usize,
    pub n_brdf: usize,
    pub n_light: usize,
    pub optimize_env: bool,
    pub indirect: IndirectMode,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config {
            steps: 200,
            views_per_step: 1,
            lr_albedo: 0.03,
            lr_env: 0.03,
            env_height: crate::envlight::DEFAULT_ENV_HEIGHT,
            env_width: crate::envlight::DEFAULT_ENV_WIDTH,
            n_brdf: 16,
            n_light: 16,
            optimize_env: true,
            indirect: IndirectMode::Off,
        }
    }
}

/// Everything that controls a run. Serialized as JSON; missing fields take
/// their defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub seed: u64,
    pub adam: AdamParams,
    /// Learning rates decay exponentially to this fraction over each stage.
    pub lr_final_fraction: f64,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub weights: LossWeights,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            seed: 0,
            adam: AdamParams::default(),
            lr_final_fraction: 0.1,
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            weights: LossWeights::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        let s1 = &self.stage1;
        let s2 = &self.stage2;
        let s3 = &self.stage3;
        let rates = [
            s1.lr_center,
            s1.lr_rotation,
            s1.lr_scale,
            s1.lr_opacity,
            s1.lr_sh,
            s2.lr_basis,
            s2.lr_mixture,
            s2.geometry_lr_scale,
            s3.lr_albedo,
            s3.lr_env,
            self.lr_final_fraction,
        ];
        if rates.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::InvalidParameter("learning rates must be positive".into()));
        }
        let counts = [
            s1.gaussians,
            s1.views_per_step,
            s2.bases,
            s2.views_per_step,
            s3.views_per_step,
            s3.env_height,
            s3.env_width,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidParameter("counts must be at least 1".into()));
        }
        if s3.n_brdf + s3.n_light == 0 {
            return Err(Error::InvalidParameter("stage 3 needs at least one sample per pixel".into()));
        }
        if !(0.0..=1.0).contains(&s1.init_opacity) || !(s1.scale_factor > 0.0) {
            return Err(Error::InvalidParameter("invalid stage-1 seeding parameters".into()));
        }
        let b = &self.adam;
        if !(0.0..1.0).contains(&b.beta1) || !(0.0..1.0).contains(&b.beta2) || !(b.eps > 0.0) {
            return Err(Error::InvalidParameter("Adam betas must lie in [0,1) and eps > 0".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: OptimConfig = crate::io::load_json(path)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_json(path, self)
    }

    fn lr(&self, base: f64, step: usize, steps: usize) -> f64 {
        if steps <= 1 {
            return base;
        }
        base * self.lr_final_fraction.powf(step as f64 / (steps - 1) as f64)
    }
}

/// One optimization step. The weighted terms add up to `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub stage: u8,
    pub step: usize,
    pub total: f64,
    pub rec: f64,
    pub geom: f64,
    pub mask: f64,
    pub smooth: f64,
    pub rgb_edge: f64,
    /// Reconstruction PSNR of the step's views inside the mask, peak 1.
    pub psnr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LogRow>,
}

impl LossLog {
    pub fn push(&mut self, row: LogRow) {
        log::debug!(
            "stage {} step {}: total {:.6} rec {:.6} geom {:.6} mask {:.6} smooth {:.6} edge {:.6} psnr {:.2}",
            row.stage,
            row.step,
            row.total,
            row.rec,
            row.geom,
            row.mask,
            row.smooth,
            row.rgb_edge,
            row.psnr
        );
        self.rows.push(row);
    }

    pub fn stage(&self, stage: u8) -> impl Iterator<Item = &LogRow> {
        self.rows.iter().filter(move |r| r.stage == stage)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Csv(e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Csv(e))?;
        }
        w.flush().map_err(io_err(format!("writing {}", path.display())))?;
        Ok(())
    }
}

fn psnr_of(sq: f64, n: usize) -> f64 {
    if n == 0 || sq == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (n as f64 / sq).log10()
    }
}

struct GeomRates {
    center: f64,
    rotation: f64,
    scale: f64,
    opacity: f64,
}

/// Adam states for the splat geometry.
struct GeomOpt {
    center: Adam,
    rotation: Adam,
    scale: Adam,
    opacity: Adam,
}

const LOG_SCALE_RANGE: (f64, f64) = (-9.0, 1.0);
const LOGIT_RANGE: f64 = 12.0;

impl GeomOpt {
    fn new(n: usize) -> Self {
        GeomOpt {
            center: Adam::new(3 * n),
            rotation: Adam::new(3 * n),
            scale: Adam::new(2 * n),
            opacity: Adam::new(n),
        }
    }

    fn apply(&mut self, gs: &mut [Gaussian2D], grad: &SceneGrad, r: &GeomRates, p: &AdamParams) {
        let flat3 = |v: &[Vec3]| v.iter().flat_map(|x| [x.x, x.y, x.z]).collect::<Vec<f64>>();
        if let Some(d) = self.center.delta(&flat3(&grad.center), r.center, p) {
            for (k, g) in gs.iter_mut().enumerate() {
                g.center += Vec3::new(d[3 * k], d[3 * k + 1], d[3 * k + 2]);
            }
        }
        let rot: Vec<Vec3> = gs.iter().enumerate().map(|(k, g)| grad.rotation(g, k)).collect();
        if let Some(d) = self.rotation.delta(&flat3(&rot), r.rotation, p) {
            for (k, g) in gs.iter_mut().enumerate() {
                g.rotate(&Vec3::new(d[3 * k], d[3 * k + 1], d[3 * k + 2]));
            }
        }
        let sg: Vec<f64> = grad.log_scale.iter().flatten().copied().collect();
        if let Some(d) = self.scale.delta(&sg, r.scale, p) {
            for (k, g) in gs.iter_mut().enumerate() {
                for a in 0..2 {
                    g.log_scale[a] = (g.log_scale[a] + d[2 * k + a]).clamp(LOG_SCALE_RANGE.0, LOG_SCALE_RANGE.1);
                }
            }
        }
        if let Some(d) = self.opacity.delta(&grad.opacity_logit, r.opacity, p) {
            for (g, dx) in gs.iter_mut().zip(d) {
                if g.opacity_logit.is_finite() {
                    g.opacity_logit = (g.opacity_logit + dx).clamp(-LOGIT_RANGE, LOGIT_RANGE);
                }
            }
        }
    }
}

fn add_grad(acc: &mut Option<SceneGrad>, g: SceneGrad, s: f64) {
    match acc {
        None => {
            let mut g = g;
            scale_grad(&mut g, s);
            *acc = Some(g);
        }
        Some(a) => {
            for (x, y) in a.center.iter_mut().zip(&g.center) {
                *x += y * s;
            }
            for (x, y) in a.tangent_u.iter_mut().zip(&g.tangent_u) {
                *x += y * s;
            }
            for (x, y) in a.tangent_v.iter_mut().zip(&g.tangent_v) {
                *x += y * s;
            }
            for (x, y) in a.log_scale.iter_mut().zip(&g.log_scale) {
                x[0] += y[0] * s;
                x[1] += y[1] * s;
            }
            for (x, y) in a.opacity_logit.iter_mut().zip(&g.opacity_logit) {
                *x += y * s;
            }
            for (x, y) in a.local.iter_mut().zip(&g.local) {
                *x += y * s;
            }
            for (x, y) in a.global.iter_mut().zip(&g.global) {
                *x += y * s;
            }
        }
    }
}

fn scale_grad(g: &mut SceneGrad, s: f64) {
    g.center.iter_mut().for_each(|x| *x *= s);
    g.tangent_u.iter_mut().for_each(|x| *x *= s);
    g.tangent_v.iter_mut().for_each(|x| *x *= s);
    g.log_scale.iter_mut().for_each(|x| {
        x[0] *= s;
        x[1] *= s
    });
    g.opacity_logit.iter_mut().for_each(|x| *x *= s);
    g.local.iter_mut().for_each(|x| *x *= s);
    g.global.iter_mut().for_each(|x| *x *= s);
}

fn pick_views(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    let mut v = sample(rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

fn check_captures(captures: &CaptureSet) -> Result<()> {
    captures.validate()?;
    if captures.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "at least 3 views are required, got {}",
            captures.len()
        )));
    }
    Ok(())
}

fn stage_rng(seed: u64, stage: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage);
    rng
}

/// Placeholder bases spread over the parameter range, so that the mixture
/// weights of different splats can separate.
pub fn initial_bases(n: usize) -> BasisSet {
    let bases = (0..n)
        .map(|k| {
            let t = if n == 1 { 0.5 } else { k as f64 / (n - 1) as f64 };
            Basis {
                albedo_nir: 0.4 + 0.2 * t,
                roughness: 0.3 + 0.4 * t,
                metallic: 0.05,
            }
        })
        .collect();
    BasisSet::new(bases).expect("valid initial bases")
}

fn masked_rgb(v: &CaptureView) -> Vec<f64> {
    let m = v.mask.data();
    v.rgb
        .data()
        .iter()
        .enumerate()
        .map(|(k, x)| x * m[k / 3])
        .collect()
}

/// Geometry initialization: seeds splats on the mask hull and fits geometry
/// plus per-splat SH radiance to the masked RGB images.
pub fn stage1(captures: &CaptureSet, config: &OptimConfig, log: &mut LossLog) -> Result<Scene> {
    check_captures(captures)?;
    config.validate()?;
    let c = &config.stage1;
    let w = &config.weights;
    let mut rng = stage_rng(config.seed, 1);
    let mut gs = seed_from_masks(captures, c.gaussians, c.scale_factor, c.init_opacity, &mut rng)?;
    let nsh = 3 * sh_coeff_count(DEFAULT_SH_DEGREE);
    // constant SH term matching the mean masked color
    let mut mean = [0.0; 3];
    let mut cnt = 0.0f64;
    for v in &captures.views {
        for p in 0..v.mask.pixel_count() {
            if v.mask.data()[p] > 0.5 {
                for (ch, m) in mean.iter_mut().enumerate() {
                    *m += v.rgb.data()[3 * p + ch];
                }
                cnt += 1.0;
            }
        }
    }
    const SH_C0: f64 = 0.282_094_791_773_878_1;
    for g in &mut gs {
        g.sh = vec![0.0; nsh];
        for ch in 0..3 {
            g.sh[ch] = (mean[ch] / cnt.max(1.0) - 0.5) / SH_C0;
        }
    }
    let mut scene = Scene::new(gs, initial_bases(config.stage2.bases))?;
    let targets: Vec<Vec<f64>> = captures.views.iter().map(masked_rgb).collect();
    let n = scene.len();
    let mut geo = GeomOpt::new(n);
    let mut sh_opt = Adam::new(n * nsh);
    for step in 0..c.steps {
        let views = pick_views(&mut rng, captures.len(), c.views_per_step);
        let shader = ShShader {
            degree: DEFAULT_SH_DEGREE,
            coeffs: scene.gaussians.iter().flat_map(|g| g.sh.iter().copied()).collect(),
        };
        let mut acc = None;
        let mut row = LogRow {
            stage: 1,
            step,
            total: 0.0,
            rec: 0.0,
            geom: 0.0,
            mask: 0.0,
            smooth: 0.0,
            rgb_edge: 0.0,
            psnr: 0.0,
        };
        let (mut sq, mut npx) = (0.0, 0usize);
        let inv = 1.0 / views.len() as f64;
        for &vi in &views {
            let view = &captures.views[vi];
            let mask = view.mask.data();
            let out = rasterize(&scene.gaussians, &view.camera, &shader);
            let (rec, g_rad) = l1_masked(out.radiance.data(), &targets[vi], mask, 3);
            let (lm, g_alpha) = mask_loss(out.alpha.data(), mask);
            let (lg, gg) = depth_normal_loss(&out, mask);
            row.rec += rec * inv;
            row.mask += w.mask * lm * inv;
            row.geom += w.geom * lg * inv;
            accumulate_sq(out.radiance.data(), &targets[vi], mask, 3, &mut sq, &mut npx);
            let rg = RenderGrad {
                radiance: g_rad,
                alpha: g_alpha.iter().zip(&gg.alpha).map(|(a, b)| w.mask * a + w.geom * b).collect(),
                depth: gg.depth.iter().map(|d| w.geom * d).collect(),
                normal: gg.normal.iter().map(|d| w.geom * d).collect(),
            };
            add_grad(&mut acc, backward(&out, &scene.gaussians, &shader, &rg)?, inv);
        }
        row.total = row.rec + row.mask + row.geom;
        row.psnr = psnr_of(sq, npx);
        log.push(row);
        let grad = acc.expect("at least one view");
        let lr = |b: f64| config.lr(b, step, c.steps);
        let rates = GeomRates {
            center: lr(c.lr_center),
            rotation: lr(c.lr_rotation),
            scale: lr(c.lr_scale),
            opacity: lr(c.lr_opacity),
        };
        geo.apply(&mut scene.gaussians, &grad, &rates, &config.adam);
        if let Some(d) = sh_opt.delta(&grad.local, lr(c.lr_sh), &config.adam) {
            for (k, g) in scene.gaussians.iter_mut().enumerate() {
                for (j, s) in g.sh.iter_mut().enumerate() {
                    *s += d[k * nsh + j];
                }
            }
        }
    }
    scene.stage = Stage::Geometry;
    Ok(scene)
}

fn accumulate_sq(render: &[f64], target: &[f64], mask: &[f64], ch: usize, sq: &mut f64, n: &mut usize) {
    for (p, m) in mask.iter().enumerate() {
        if *m > 0.5 {
            for c in 0..ch {
                let d = render[p * ch + c] - target[p * ch + c];
                *sq += d * d;
            }
            *n += ch;
        }
    }
}

/// NIR inverse rendering: fits basis materials, per-splat mixture logits
/// and (with reduced rates) the geometry to the flash-only NIR images.
pub fn stage2(scene: &Scene, captures: &CaptureSet, config: &OptimConfig, log: &mut LossLog) -> Result<Scene> {
    if scene.stage != Stage::Geometry {
        return Err(Error::StageOrder(format!(
            "stage 2 needs a stage-1 scene, got stage {:?}",
            scene.stage.name()
        )));
    }
    check_captures(captures)?;
    config.validate()?;
    for (k, v) in captures.views.iter().enumerate() {
        let lit = v
            .nir_flash_only
            .data()
            .iter()
            .zip(v.mask.data())
            .any(|(x, m)| *m > 0.5 && *x > 0.0);
        if !lit {
            return Err(Error::Missing(format!("view {k}: flash-only NIR image is empty inside the mask")));
        }
    }
    let c = &config.stage2;
    let s1 = &config.stage1;
    let w = &config.weights;
    let mut rng = stage_rng(config.seed, 2);
    let mut scene = scene.clone();
    let nb = c.bases;
    if scene.bases.len() != nb {
        scene.bases = initial_bases(nb);
    }
    let mut raw: Vec<RawBasis> = scene.bases.bases.iter().map(RawBasis::from_basis).collect();
    let mut logits: Vec<Vec<f64>> = scene
        .gaussians
        .iter()
        .map(|g| if g.mixture_logits.len() == nb { g.mixture_logits.clone() } else { vec![0.0; nb] })
        .collect();
    let n = scene.len();
    let mut geo = GeomOpt::new(n);
    let mut mix_opt = Adam::new(n * nb);
    let mut basis_opt = Adam::new(3 * nb);
    for step in 0..c.steps {
        let views = pick_views(&mut rng, captures.len(), c.views_per_step);
        let inv = 1.0 / views.len() as f64;
        let mut acc = None;
        let mut row = LogRow {
            stage: 2,
            step,
            total: 0.0,
            rec: 0.0,
            geom: 0.0,
            mask: 0.0,
            smooth: 0.0,
            rgb_edge: 0.0,
            psnr: 0.0,
        };
        let (mut sq, mut npx) = (0.0, 0usize);
        for &vi in &views {
            let view = &captures.views[vi];
            let mask = view.mask.data();
            let target = view.nir_flash_only.data();
            let shader = NirShader::new(&view.flash, &view.camera, raw.clone(), &logits);
            let out = rasterize(&scene.gaussians, &view.camera, &shader);
            let npix = out.width() * out.height();
            let rad = out.radiance.data();
            let nir: Vec<f64> = (0..npix).map(|p| rad[4 * p]).collect();
            let attrs: Vec<f64> = (0..npix).flat_map(|p| rad[4 * p + 1..4 * p + 4].iter().copied()).collect();
            let (rec, g_rec) = l1_masked(&nir, target, mask, 1);
            let (ls, g_smooth) = edge_aware(&attrs, 3, target, out.width(), out.height(), w.k_s, Some(mask));
            let (lm, g_alpha) = mask_loss(out.alpha.data(), mask);
            let (lg, gg) = depth_normal_loss(&out, mask);
            row.rec += rec * inv;
            row.smooth += w.smooth * ls * inv;
            row.mask += w.mask * lm * inv;
            row.geom += w.geom * lg * inv;
            accumulate_sq(&nir, target, mask, 1, &mut sq, &mut npx);
            let mut g_rad = vec![0.0; 4 * npix];
            for p in 0..npix {
                g_rad[4 * p] = g_rec[p];
                for a in 0..3 {
                    g_rad[4 * p + 1 + a] = w.smooth * g_smooth[3 * p + a];
                }
            }
            let rg = RenderGrad {
                radiance: g_rad,
                alpha: g_alpha.iter().zip(&gg.alpha).map(|(a, b)| w.mask * a + w.geom * b).collect(),
                depth: gg.depth.iter().map(|d| w.geom * d).collect(),
                normal: gg.normal.iter().map(|d| w.geom * d).collect(),
            };
            add_grad(&mut acc, backward(&out, &scene.gaussians, &shader, &rg)?, inv);
        }
        row.total = row.rec + row.smooth + row.mask + row.geom;
        row.psnr = psnr_of(sq, npx);
        log.push(row);
        let grad = acc.expect("at least one view");
        let lr = |b: f64| config.lr(b, step, c.steps);
        let gs = c.geometry_lr_scale;
        let rates = GeomRates {
            center: lr(s1.lr_center) * gs,
            rotation: lr(s1.lr_rotation) * gs,
            scale: lr(s1.lr_scale) * gs,
            opacity: lr(s1.lr_opacity) * gs,
        };
        geo.apply(&mut scene.gaussians, &grad, &rates, &config.adam);
        if let Some(d) = mix_opt.delta(&grad.local, lr(c.lr_mixture), &config.adam) {
            for (k, l) in logits.iter_mut().enumerate() {
                for j in 0..nb {
                    l[j] = (l[j] + d[k * nb + j]).clamp(-LOGIT_RANGE, LOGIT_RANGE);
                }
            }
        }
        if let Some(d) = basis_opt.delta(&grad.global, lr(c.lr_basis), &config.adam) {
            for (j, r) in raw.iter_mut().enumerate() {
                for q in 0..3 {
                    r.0[q] = (r.0[q] + d[3 * j + q]).clamp(-LOGIT_RANGE, LOGIT_RANGE);
                }
            }
        }
    }
    scene.bases = BasisSet::new(raw.iter().map(RawBasis::basis).collect())?;
    for (g, l) in scene.gaussians.iter_mut().zip(logits) {
        g.mixture_logits = l;
    }
    scene.stage = Stage::Nir;
    Ok(scene)
}

/// Freezes each splat's collapsed `(σ, m, ρ_NIR)` for the RGB stage.
pub fn transfer_cross_spectral(scene: &Scene) -> Result<Scene> {
    if scene.stage != Stage::Nir {
        return Err(Error::StageOrder(format!(
            "cross-spectral transfer needs a stage-2 scene, got stage {:?}",
            scene.stage.name()
        )));
    }
    let mut out = scene.clone();
    for g in &mut out.gaussians {
        g.frozen = Some(collapse(&scene.bases, &g.mixture_weights())?);
    }
    out.stage = Stage::Transferred;
    Ok(out)
}

/// Geometry and frozen material at one covered pixel.
#[derive(Debug, Clone)]
pub(crate) struct PixelSurface {
    pub px: usize,
    pub point: ShadingPoint,
    pub roughness: f64,
    pub metallic: f64,
    pub albedo_nir: f64,
    /// `(gaussian, T α / alpha)`: normalized compositing weights.
    pub weights: Vec<(u32, f64)>,
}

/// Surfaces of every pixel with coverage above the normalization floor,
/// restricted to `mask` when given.
pub(crate) fn pixel_surfaces(scene: &Scene, out: &RenderOutput, mask: Option<&[f64]>) -> Vec<PixelSurface> {
    let cam = out.camera();
    let center = cam.center();
    let (w, h) = (out.width(), out.height());
    let mut v = Vec::new();
    for p in 0..w * h {
        let a = out.alpha.data()[p];
        if a <= ALPHA_NORMALIZE_MIN || mask.is_some_and(|m| m[p] <= 0.5) {
            continue;
        }
        let nraw = Vec3::from_column_slice(&out.normal.data()[3 * p..3 * p + 3]);
        if nraw.norm() < 1e-12 {
            continue;
        }
        let dir = cam.pixel_ray(p % w, p / w).direction;
        let t = out.depth.data()[p] / a;
        let weights: Vec<(u32, f64)> = out.weights(p).map(|(k, wt)| (k as u32, wt / a)).collect();
        let (mut r, mut m, mut rn) = (0.0, 0.0, 0.0);
        for &(k, wt) in &weights {
            let f = scene.gaussians[k as usize].frozen.unwrap_or(crate::brdf::Collapsed {
                roughness: 1.0,
                metallic: 0.0,
                albedo_nir: 0.0,
            });
            r += wt * f.roughness;
            m += wt * f.metallic;
            rn += wt * f.albedo_nir;
        }
        v.push(PixelSurface {
            px: p,
            point: ShadingPoint {
                position: center + dir * t,
                normal: nraw.normalize(),
                view: -dir,
            },
            roughness: r,
            metallic: m,
            albedo_nir: rn,
            weights,
        });
    }
    v
}

pub(crate) fn pixel_rng(seed: u64, step: u64, view: u64, px: u64) -> ChaCha8Rng {
    // splitmix64 over the tuple
    let mut z = seed;
    for x in [step, view, px] {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    ChaCha8Rng::seed_from_u64(z)
}

pub(crate) fn shade_albedo(weights: &[(u32, f64)], albedo: &[[f64; 3]]) -> [f64; 3] {
    let mut a = [0.0; 3];
    for &(k, wt) in weights {
        for c in 0..3 {
            a[c] += wt * albedo[k as usize][c];
        }
    }
    a
}

const ENV_LOG_RANGE: (f64, f64) = (-14.0, 6.0);

struct ViewCache {
    surfaces: Vec<PixelSurface>,
    /// Full-grid mask of the cached pixels.
    valid: Vec<f64>,
    /// Frozen NIR albedo map (guide for the edge term).
    nir_map: Vec<f64>,
    width: usize,
    height: usize,
}

/// RGB inverse rendering under environment light: optimizes per-splat RGB
/// albedo and (unless disabled) the environment's log radiance.
pub fn stage3(scene: &Scene, captures: &CaptureSet, config: &OptimConfig, log: &mut LossLog) -> Result<Scene> {
    if scene.stage != Stage::Transferred {
        return Err(Error::StageOrder(format!(
            "stage 3 needs the cross-spectral transfer, got stage {:?}",
            scene.stage.name()
        )));
    }
    check_captures(captures)?;
    config.validate()?;
    let c = &config.stage3;
    let w = &config.weights;
    let geometry_before = scene.geometry_checksum();
    let reflectance_before = scene.reflectance_checksum();
    let mut rng = stage_rng(config.seed, 3);
    let mut scene = scene.clone();
    let mut env = match scene.env.take() {
        Some(e) => e,
        None => EnvironmentMap::constant(c.env_height, c.env_width, [0.5; 3]),
    };
    let ones = ValueShader {
        channels: 1,
        values: vec![1.0; scene.len()],
    };
    let caches: Vec<ViewCache> = captures
        .views
        .iter()
        .map(|v| {
            let out = rasterize(&scene.gaussians, &v.camera, &ones);
            let surfaces = pixel_surfaces(&scene, &out, Some(v.mask.data()));
            let (width, height) = (out.width(), out.height());
            let mut valid = vec![0.0; width * height];
            let mut nir_map = vec![0.0; width * height];
            for s in &surfaces {
                valid[s.px] = 1.0;
                nir_map[s.px] = s.albedo_nir;
            }
            ViewCache {
                surfaces,
                valid,
                nir_map,
                width,
                height,
            }
        })
        .collect();
    let occluders = Occluders::new(&scene.gaussians);
    let n = scene.len();
    let mut logits: Vec<f64> = scene.gaussians.iter().flat_map(|g| g.albedo_logits).collect();
    let mut env_log: Vec<f64> = env
        .radiance()
        .iter()
        .flat_map(|t| t.map(|v| v.max(1e-6).ln().clamp(ENV_LOG_RANGE.0, ENV_LOG_RANGE.1)))
        .collect();
    let mut albedo_opt = Adam::new(3 * n);
    let mut env_opt = Adam::new(env_log.len());
    let mis = MisConfig {
        n_brdf: c.n_brdf,
        n_light: c.n_light,
        indirect: c.indirect,
        record_env_terms: c.optimize_env,
    };
    for step in 0..c.steps {
        let views = pick_views(&mut rng, captures.len(), c.views_per_step);
        let inv_v = 1.0 / views.len() as f64;
        let albedo: Vec<[f64; 3]> = (0..n)
            .map(|k| [0, 1, 2].map(|c| param::sigmoid(logits[3 * k + c])))
            .collect();
        let blockers = |k: usize| albedo[k];
        let mut g_albedo = vec![0.0; 3 * n];
        let mut g_env = vec![0.0; env_log.len()];
        let mut row = LogRow {
            stage: 3,
            step,
            total: 0.0,
            rec: 0.0,
            geom: 0.0,
            mask: 0.0,
            smooth: 0.0,
            rgb_edge: 0.0,
            psnr: 0.0,
        };
        let (mut sq, mut npx) = (0.0, 0usize);
        for &vi in &views {
            let cache = &caches[vi];
            let target = captures.views[vi].rgb.data();
            let results: Vec<_> = cache
                .surfaces
                .par_iter()
                .map(|s| {
                    let a = shade_albedo(&s.weights, &albedo);
                    let brdf = SurfaceBrdf {
                        albedo: [a[0], a[1], a[2], s.albedo_nir],
                        roughness: s.roughness,
                        metallic: s.metallic,
                    };
                    let mut prng = pixel_rng(config.seed, step as u64, vi as u64, s.px as u64);
                    let est = mis_pixel(
                        &s.point,
                        &brdf,
                        &env,
                        Some(&occluders),
                        Some(&blockers),
                        &mis,
                        &mut prng,
                    );
                    (a, est)
                })
                .collect();
            let count = (cache.surfaces.len() * 3).max(1) as f64;
            // per-pixel albedo gradient, before distribution to splats
            let mut g_pix = vec![[0.0; 3]; cache.surfaces.len()];
            let mut map = vec![0.0; 3 * cache.width * cache.height];
            for (j, (s, (a, est))) in cache.surfaces.iter().zip(&results).enumerate() {
                for ch in 0..3 {
                    let d = est.radiance[ch] - target[3 * s.px + ch];
                    row.rec += d.abs() / count * inv_v;
                    sq += d * d;
                    let sg = d.signum() * (d != 0.0) as u8 as f64 / count * inv_v;
                    g_pix[j][ch] += sg * est.diffuse[ch];
                    map[3 * s.px + ch] = a[ch];
                    if c.optimize_env && sg != 0.0 {
                        for (texel, dd) in &est.env_terms {
                            g_env[3 * texel + ch] += sg * dd[ch];
                        }
                    }
                }
                npx += 3;
            }
            if w.rgb_edge > 0.0 {
                let (le, g_edge) = edge_aware(&map, 3, &cache.nir_map, cache.width, cache.height, w.k, Some(&cache.valid));
                row.rgb_edge += w.rgb_edge * le * inv_v;
                for (j, s) in cache.surfaces.iter().enumerate() {
                    for ch in 0..3 {
                        g_pix[j][ch] += w.rgb_edge * inv_v * g_edge[3 * s.px + ch];
                    }
                }
            }
            for (s, g) in cache.surfaces.iter().zip(&g_pix) {
                for &(k, wt) in &s.weights {
                    for ch in 0..3 {
                        g_albedo[3 * k as usize + ch] += g[ch] * wt;
                    }
                }
            }
        }
        row.total = row.rec + row.rgb_edge;
        row.psnr = psnr_of(sq, npx);
        log.push(row);
        for k in 0..n {
            for ch in 0..3 {
                g_albedo[3 * k + ch] *= param::sigmoid_slope(albedo[k][ch]);
            }
        }
        let lr = |b: f64| config.lr(b, step, c.steps);
        if let Some(d) = albedo_opt.delta(&g_albedo, lr(c.lr_albedo), &config.adam) {
            for (l, dx) in logits.iter_mut().zip(d) {
                *l = (*l + dx).clamp(-LOGIT_RANGE, LOGIT_RANGE);
            }
        }
        if c.optimize_env {
            let rad = env.radiance();
            for (t, g) in g_env.chunks_mut(3).enumerate() {
                for ch in 0..3 {
                    g[ch] *= rad[t][ch];
                }
            }
            if let Some(d) = env_opt.delta(&g_env, lr(c.lr_env), &config.adam) {
                for (l, dx) in env_log.iter_mut().zip(d) {
                    *l = (*l + dx).clamp(ENV_LOG_RANGE.0, ENV_LOG_RANGE.1);
                }
                env.set_radiance(env_log.chunks(3).map(|t| [t[0].exp(), t[1].exp(), t[2].exp()]).collect())?;
            }
        }
    }
    for (k, g) in scene.gaussians.iter_mut().enumerate() {
        g.albedo_logits = [logits[3 * k], logits[3 * k + 1], logits[3 * k + 2]];
    }
    scene.env = Some(env);
    scene.stage = Stage::Rgb;
    if scene.geometry_checksum() != geometry_before || scene.reflectance_checksum() != reflectance_before {
        return Err(Error::Degenerate("stage 3 modified frozen parameters".into()));
    }
    Ok(scene)
}

/// Which stages [`run`] executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSet {
    pub geometry: bool,
    pub nir: bool,
    pub rgb: bool,
}

impl StageSet {
    pub const ALL: StageSet = StageSet {
        geometry: true,
        nir: true,
        rgb: true,
    };

    /// Parses a comma list such as `1,2,3` or `2`.
    pub fn parse(s: &str) -> Result<StageSet> {
        let mut set = StageSet {
            geometry: false,
            nir: false,
            rgb: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "1" => set.geometry = true,
                "2" => set.nir = true,
                "3" => set.rgb = true,
                other => return Err(Error::InvalidParameter(format!("unknown stage {other:?}"))),
            }
        }
        if !(set.geometry || set.nir || set.rgb) {
            return Err(Error::InvalidParameter("no stages selected".into()));
        }
        Ok(set)
    }
}

/// Runs the selected stages in order, starting from `scene` when given.
/// `env` seeds (and with `optimize_env = false`, fixes) the stage-3
/// environment.
pub fn run(
    captures: &CaptureSet,
    config: &OptimConfig,
    stages: StageSet,
    start: Option<Scene>,
    env: Option<EnvironmentMap>,
    log: &mut LossLog,
) -> Result<Scene> {
    let mut scene = start;
    if stages.geometry {
        scene = Some(stage1(captures, config, log)?);
    }
    let need = |s: &Option<Scene>| -> Result<Scene> {
        s.clone()
            .ok_or_else(|| Error::StageOrder("no input scene for the requested stages".into()))
    };
    if stages.nir {
        scene = Some(stage2(&need(&scene)?, captures, config, log)?);
    }
    if stages.rgb {
        let mut s = need(&scene)?;
        if s.stage == Stage::Nir {
            s = transfer_cross_spectral(&s)?;
        }
        if env.is_some() {
            s.env = env;
        }
        scene = Some(stage3(&s, captures, config, log)?);
    }
    need(&scene)
}

pub(crate) fn image_from(data: Vec<f64>, w: usize, h: usize, c: usize) -> SpectralImage {
    SpectralImage::from_data(w, h, c, data).expect("finite image")
}

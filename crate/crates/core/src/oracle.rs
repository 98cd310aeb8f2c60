//! Ground-truth renderer over analytic shapes.
//!
//! Independent of the splatting path: exact shape intersection and binary
//! shadow rays, deterministic hemisphere quadrature for environment light,
//! and its own environment lookup. Only the BRDF kernels are shared.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::brdf::{self, SurfaceBrdf, ROUGHNESS_MIN};
use crate::envlight::EnvironmentMap;
use crate::error::{Error, Result};
use crate::io::{flash_subtract, CaptureSet, CaptureView, GroundTruth, GroundTruthView};
use crate::pipeline::FlashModel;
use crate::quadrature::{gauss_legendre, HemisphereRule};
use crate::spectral::{orthonormal_basis, Camera, Channel, Ray, SpectralImage, Vec3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    /// Infinite plane; the solid side is opposite the normal.
    Plane { point: Vec3, normal: Vec3 },
    Box { min: Vec3, max: Vec3 },
}

impl Shape {
    /// Nearest hit with `t > t_min`: distance and outward normal.
    pub fn intersect(&self, ray: &Ray, t_min: f64) -> Option<(f64, Vec3)> {
        match *self {
            Shape::Sphere { center, radius } => {
                let oc = ray.origin - center;
                let b = oc.dot(&ray.direction);
                let c = oc.dot(&oc) - radius * radius;
                let disc = b * b - c;
                if disc < 0.0 {
                    return None;
                }
                let s = disc.sqrt();
                let t = if -b - s > t_min { -b - s } else { -b + s };
                (t > t_min).then(|| (t, (ray.at(t) - center) / radius))
            }
            Shape::Plane { point, normal } => {
                let n = normal.normalize();
                let denom = ray.direction.dot(&n);
                if denom.abs() < 1e-15 {
                    return None;
                }
                let t = (point - ray.origin).dot(&n) / denom;
                (t > t_min).then_some((t, n))
            }
            Shape::Box { min, max } => {
                let mut t0 = f64::NEG_INFINITY;
                let mut t1 = f64::INFINITY;
                let (mut a0, mut a1) = (0, 0);
                for a in 0..3 {
                    let inv = 1.0 / ray.direction[a];
                    let mut ta = (min[a] - ray.origin[a]) * inv;
                    let mut tb = (max[a] - ray.origin[a]) * inv;
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        a0 = a;
                    }
                    if tb < t1 {
                        t1 = tb;
                        a1 = a;
                    }
                }
                if t0 > t1 {
                    return None;
                }
                let (t, axis) = if t0 > t_min { (t0, a0) } else if t1 > t_min { (t1, a1) } else { return None };
                let p = ray.at(t);
                let mut n = Vec3::zeros();
                n[axis] = if (p[axis] - min[axis]).abs() < (p[axis] - max[axis]).abs() { -1.0 } else { 1.0 };
                Some((t, n))
            }
        }
    }

    /// Strictly inside the solid (used by the overlap check).
    pub fn contains(&self, p: &Vec3) -> bool {
        match *self {
            Shape::Sphere { center, radius } => (p - center).norm() < radius * (1.0 - 1e-9),
            Shape::Plane { point, normal } => (p - point).dot(&normal.normalize()) < -1e-9,
            Shape::Box { min, max } => (0..3).all(|a| p[a] > min[a] + 1e-9 && p[a] < max[a] - 1e-9),
        }
    }

    /// A point on the surface from two uniforms (plane: within a unit disc).
    fn surface_point(&self, u: [f64; 2]) -> Vec3 {
        let z = 1.0 - 2.0 * u[0];
        let r = (1.0 - z * z).max(0.0).sqrt();
        let phi = 2.0 * PI * u[1];
        let s = Vec3::new(r * phi.cos(), r * phi.sin(), z);
        match *self {
            Shape::Sphere { center, radius } => center + s * radius,
            Shape::Plane { point, normal } => {
                let (a, b) = orthonormal_basis(&normal.normalize());
                point + a * (u[0] - 0.5) + b * (u[1] - 0.5)
            }
            Shape::Box { min, max } => {
                // project the sphere direction onto the box surface
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let k = (0..3).map(|a| s[a].abs() / h[a]).fold(0.0, f64::max);
                c + s / k
            }
        }
    }
}

/// Material override on one side of a plane: points with `p·normal ≥ offset`
/// use `brdf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaterialSplit {
    pub normal: Vec3,
    pub offset: f64,
    pub brdf: SurfaceBrdf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Primitive {
    pub shape: Shape,
    pub brdf: SurfaceBrdf,
    pub split: Option<MaterialSplit>,
}

impl Primitive {
    pub fn brdf_at(&self, p: &Vec3) -> SurfaceBrdf {
        match self.split {
            Some(s) if p.dot(&s.normal) >= s.offset => s.brdf,
            _ => self.brdf,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyticScene {
    pub primitives: Vec<Primitive>,
    pub env: EnvironmentMap,
    pub flash: FlashModel,
    /// Constant ambient NIR level added to flash-on and flash-off frames.
    pub ambient_nir: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub t: f64,
    pub point: Vec3,
    pub normal: Vec3,
    pub brdf: SurfaceBrdf,
}

/// Values written to NIR frames are snapped to this grid so that
/// flash-on minus flash-off is exact in 32-bit floats.
const NIR_GRID: f64 = 65536.0;

fn snap(v: f64) -> f64 {
    (v * NIR_GRID).round() / NIR_GRID
}

impl AnalyticScene {
    pub fn new(primitives: Vec<Primitive>, env: EnvironmentMap, flash: FlashModel, ambient_nir: f64) -> Result<Self> {
        let s = AnalyticScene {
            primitives,
            env,
            flash,
            ambient_nir,
        };
        s.validate()?;
        Ok(s)
    }

    /// Parameter ranges, plus a sampled check that no primitive surface lies
    /// inside another solid.
    pub fn validate(&self) -> Result<()> {
        for p in &self.primitives {
            p.brdf.validate()?;
            if let Some(s) = p.split {
                s.brdf.validate()?;
            }
        }
        if !(self.ambient_nir >= 0.0) {
            return Err(Error::InvalidParameter("ambient NIR must be nonnegative".into()));
        }
        for (a, pa) in self.primitives.iter().enumerate() {
            for k in 0..400 {
                let u = [((k * 7919) % 400) as f64 / 400.0 + 1e-3, (k as f64 + 0.5) / 400.0];
                let p = pa.shape.surface_point(u);
                for (b, pb) in self.primitives.iter().enumerate() {
                    if a != b && pb.shape.contains(&p) {
                        return Err(Error::InvalidParameter(format!("primitives {a} and {b} overlap")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn trace(&self, ray: &Ray, t_min: f64) -> Option<Hit> {
        let mut best: Option<(f64, Vec3, usize)> = None;
        for (k, p) in self.primitives.iter().enumerate() {
            if let Some((t, n)) = p.shape.intersect(ray, t_min) {
                if best.map_or(true, |b| t < b.0) {
                    best = Some((t, n, k));
                }
            }
        }
        best.map(|(t, n, k)| {
            let point = ray.at(t);
            Hit {
                t,
                point,
                normal: n,
                brdf: self.primitives[k].brdf_at(&point),
            }
        })
    }

    pub fn occluded(&self, origin: &Vec3, dir: &Vec3, t_max: f64) -> bool {
        let ray = Ray {
            origin: *origin,
            direction: *dir,
        };
        self.primitives
            .iter()
            .any(|p| p.shape.intersect(&ray, 1e-9).is_some_and(|(t, _)| t < t_max))
    }
}

/// Bilinear lookup with clamped rows and periodic columns; texel centers at
/// half-integer lat-long coordinates.
pub fn env_lookup(env: &EnvironmentMap, d: &Vec3) -> [f64; 3] {
    let (h, w) = (env.height() as f64, env.width() as f64);
    let theta = d.y.clamp(-1.0, 1.0).acos();
    let phi = d.x.atan2(d.z);
    let y = (theta / PI * h - 0.5).clamp(0.0, h - 1.0);
    let x = (phi + PI) / (2.0 * PI) * w - 0.5;
    let y0 = y.floor();
    let x0 = x.floor();
    let (fy, fx) = (y - y0, x - x0);
    let rows = [y0 as usize, (y0 as usize + 1).min(env.height() - 1)];
    let cols = [
        (x0 as i64).rem_euclid(env.width() as i64) as usize,
        (x0 as i64 + 1).rem_euclid(env.width() as i64) as usize,
    ];
    let mut out = [0.0; 3];
    for (ri, wr) in [(0, 1.0 - fy), (1, fy)] {
        for (ci, wc) in [(0, 1.0 - fx), (1, fx)] {
            let t = env.texel(rows[ri], cols[ci]);
            for c in 0..3 {
                out[c] += wr * wc * t[c];
            }
        }
    }
    out
}

/// Node counts for [`quadrature_radiance`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    /// Gauss–Legendre nodes in `cos θ` for the diffuse term (`2×` in `φ`).
    pub diffuse_theta: usize,
    /// Gauss–Legendre nodes in the half-vector CDF variable for the
    /// specular term (`2×` in `φ`).
    pub specular_theta: usize,
}

impl Default for Quality {
    fn default() -> Self {
        Quality {
            diffuse_theta: 32,
            specular_theta: 32,
        }
    }
}

/// Precomputed rules for one [`Quality`].
pub struct Quadrature {
    diffuse: HemisphereRule,
    spec_nodes: Vec<f64>,
    spec_weights: Vec<f64>,
    spec_phi: usize,
}

impl Quadrature {
    pub fn new(q: Quality) -> Self {
        let (spec_nodes, spec_weights) = gauss_legendre(q.specular_theta, 0.0, 1.0);
        Quadrature {
            diffuse: HemisphereRule::new(q.diffuse_theta, 2 * q.diffuse_theta),
            spec_nodes,
            spec_weights,
            spec_phi: 2 * q.specular_theta,
        }
    }
}

/// Reflected direct environment radiance for all three RGB channels.
///
/// The diffuse term uses Gauss–Legendre in `cos θ` times uniform `φ`. The
/// specular term substitutes the GGX half-vector CDF for `θ_h`, which turns
/// `D(h)(n·h) dω_h` into `du₁ du₂` and leaves the smooth factor
/// `L F G (o·h) / ((n·o)(n·h))` for the same product rule.
pub fn quadrature_rgb(
    scene: &AnalyticScene,
    quad: &Quadrature,
    point: &Vec3,
    normal: &Vec3,
    brdf: &SurfaceBrdf,
    view: &Vec3,
) -> [f64; 3] {
    let n = normal;
    let cos_o = n.dot(view);
    if cos_o <= 0.0 {
        return [0.0; 3];
    }
    let origin = point + n * 1e-7;
    let light = |d: &Vec3| -> [f64; 3] {
        if scene.occluded(&origin, d, f64::INFINITY) {
            [0.0; 3]
        } else {
            env_lookup(&scene.env, d)
        }
    };
    let mut out = [0.0; 3];
    let kd = (1.0 - brdf.metallic) / PI;
    if kd > 0.0 {
        let e = quad.diffuse.integrate3(n, |d| {
            let l = light(d);
            let c = d.dot(n);
            [l[0] * c, l[1] * c, l[2] * c]
        });
        for c in 0..3 {
            out[c] = kd * brdf.albedo[c] * e[c];
        }
    }
    let sigma = brdf.roughness.clamp(ROUGHNESS_MIN, 1.0);
    let alpha = sigma * sigma;
    let a2 = alpha * alpha;
    let (t, b) = orthonormal_basis(n);
    let dphi = 2.0 * PI / quad.spec_phi as f64;
    let mut spec = [0.0; 3];
    for (&u, &wu) in quad.spec_nodes.iter().zip(&quad.spec_weights) {
        let cos2 = (1.0 - u) / (1.0 + (a2 - 1.0) * u);
        let cos_h = cos2.sqrt();
        let sin_h = (1.0 - cos2).max(0.0).sqrt();
        let mut row = [0.0; 3];
        for k in 0..quad.spec_phi {
            let phi = (k as f64 + 0.5) * dphi;
            let h = t * (sin_h * phi.cos()) + b * (sin_h * phi.sin()) + n * cos_h;
            let cos_oh = view.dot(&h);
            if cos_oh <= 0.0 {
                continue;
            }
            let i = h * (2.0 * cos_oh) - view;
            let cos_i = n.dot(&i);
            if cos_i <= 0.0 {
                continue;
            }
            let f = brdf::fresnel(cos_oh, brdf.metallic) * brdf::smith_g(cos_i, cos_o, sigma) * cos_oh
                / (cos_o * cos_h);
            let l = light(&i);
            for c in 0..3 {
                row[c] += f * l[c];
            }
        }
        for c in 0..3 {
            spec[c] += wu * row[c] * dphi / (2.0 * PI);
        }
    }
    for c in 0..3 {
        out[c] += spec[c];
    }
    out
}

/// Single-channel form of [`quadrature_rgb`]; the NIR channel has no
/// environment term and evaluates to zero.
pub fn quadrature_radiance(
    scene: &AnalyticScene,
    point: &Vec3,
    normal: &Vec3,
    brdf: &SurfaceBrdf,
    channel: Channel,
    view: &Vec3,
    quality: Quality,
) -> f64 {
    match channel {
        Channel::Nir => 0.0,
        c => quadrature_rgb(scene, &Quadrature::new(quality), point, normal, brdf, view)[c.index()],
    }
}

/// Flash-only NIR radiance at a hit, with an exact shadow ray.
pub fn flash_radiance(scene: &AnalyticScene, camera: &Camera, hit: &Hit) -> f64 {
    let lp = scene.flash.position(camera);
    let to_l = lp - hit.point;
    let dist2 = to_l.norm_squared();
    let i = to_l / dist2.sqrt();
    let o = (camera.center() - hit.point).normalize();
    let cos_i = hit.normal.dot(&i);
    if cos_i <= 0.0 || hit.normal.dot(&o) <= 0.0 {
        return 0.0;
    }
    if scene.occluded(&(hit.point + hit.normal * 1e-7), &i, dist2.sqrt()) {
        return 0.0;
    }
    scene.flash.intensity / dist2 * brdf::eval_surface(&hit.brdf, Channel::Nir, &i, &o, &hit.normal) * cos_i
}

/// Renders the requested channels. RGB channels use quadrature and show the
/// environment behind the object; NIR is the flash term (when `with_flash`)
/// plus the ambient level, both snapped to a `2⁻¹⁶` grid.
pub fn render_reference(
    scene: &AnalyticScene,
    camera: &Camera,
    channels: &[Channel],
    with_flash: bool,
    quality: Quality,
) -> SpectralImage {
    let quad = Quadrature::new(quality);
    let (w, h) = (camera.width, camera.height);
    let nc = channels.len();
    let need_rgb = channels.iter().any(|c| *c != Channel::Nir);
    let px: Vec<Vec<f64>> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let ray = camera.pixel_ray(p % w, p / w);
            let hit = scene.trace(&ray, 0.0);
            let rgb = if !need_rgb {
                [0.0; 3]
            } else {
                match &hit {
                    Some(hit) => quadrature_rgb(scene, &quad, &hit.point, &hit.normal, &hit.brdf, &-ray.direction),
                    None => env_lookup(&scene.env, &ray.direction),
                }
            };
            channels
                .iter()
                .map(|c| match c {
                    Channel::Nir => {
                        let f = match (&hit, with_flash) {
                            (Some(hit), true) => snap(flash_radiance(scene, camera, hit)),
                            _ => 0.0,
                        };
                        f + snap(scene.ambient_nir)
                    }
                    c => rgb[c.index()],
                })
                .collect()
        })
        .collect();
    let mut img = SpectralImage::from_data(w, h, nc, px.into_iter().flatten().collect()).expect("finite render");
    img.quantize_f32();
    img
}

/// Reference attribute maps, normals and mask for one camera.
pub fn reference_attributes(scene: &AnalyticScene, camera: &Camera) -> GroundTruthView {
    let (w, h) = (camera.width, camera.height);
    let mut rgb = SpectralImage::new(w, h, 3);
    let mut nir = SpectralImage::new(w, h, 1);
    let mut rough = SpectralImage::new(w, h, 1);
    let mut metal = SpectralImage::new(w, h, 1);
    let mut normal = SpectralImage::new(w, h, 3).into_signed();
    let mut mask = SpectralImage::new(w, h, 1);
    for y in 0..h {
        for x in 0..w {
            if let Some(hit) = scene.trace(&camera.pixel_ray(x, y), 0.0) {
                for c in 0..3 {
                    rgb.set(x, y, c, hit.brdf.albedo[c]);
                    normal.set(x, y, c, hit.normal[c]);
                }
                nir.set(x, y, 0, hit.brdf.albedo[3]);
                rough.set(x, y, 0, hit.brdf.roughness);
                metal.set(x, y, 0, hit.brdf.metallic);
                mask.set(x, y, 0, 1.0);
            }
        }
    }
    let mut v = GroundTruthView {
        albedo_rgb: rgb,
        albedo_nir: nir,
        roughness: rough,
        metallic: metal,
        normal,
        mask,
    };
    for img in [&mut v.albedo_rgb, &mut v.albedo_nir, &mut v.roughness, &mut v.metallic, &mut v.normal] {
        img.quantize_f32();
    }
    v
}

/// Cameras evenly spaced in azimuth on a circle around `target`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ring {
    pub views: usize,
    pub distance: f64,
    /// Elevation above the horizontal plane, radians.
    pub elevation: f64,
    pub target: Vec3,
    pub fx: f64,
    pub width: usize,
    pub height: usize,
    /// Azimuth of the first camera, radians.
    pub phase: f64,
}

impl Ring {
    pub fn cameras(&self) -> Result<Vec<Camera>> {
        (0..self.views)
            .map(|k| {
                let az = self.phase + 2.0 * PI * k as f64 / self.views as f64;
                let (se, ce) = self.elevation.sin_cos();
                let eye = self.target + Vec3::new(ce * az.sin(), se, ce * az.cos()) * self.distance;
                Camera::look_at(eye, self.target, Vec3::y(), self.fx, self.fx, self.width, self.height)
            })
            .collect()
    }
}

/// Renders every frame of a synthetic capture set plus ground truth.
pub fn generate_capture_set(scene: &AnalyticScene, ring: &Ring, quality: Quality) -> Result<(CaptureSet, GroundTruth)> {
    if ring.views < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 views, got {}", ring.views)));
    }
    let mut views = Vec::with_capacity(ring.views);
    let mut gt = Vec::with_capacity(ring.views);
    for camera in ring.cameras()? {
        let rgb = render_reference(scene, &camera, &Channel::RGB, false, quality);
        let nir_on = render_reference(scene, &camera, &[Channel::Nir], true, quality);
        let nir_off = render_reference(scene, &camera, &[Channel::Nir], false, quality);
        let nir_flash_only = flash_subtract(&nir_on, &nir_off)?;
        let attrs = reference_attributes(scene, &camera);
        views.push(CaptureView {
            camera,
            rgb,
            nir_on,
            nir_off,
            nir_flash_only,
            mask: attrs.mask.clone(),
            flash: scene.flash,
        });
        gt.push(attrs);
    }
    let set = CaptureSet { views };
    set.validate()?;
    Ok((
        set,
        GroundTruth {
            views: gt,
            env: scene.env.clone(),
        },
    ))
}

/// Built-in environments, sampled at texel centers and rounded to `f32`.
pub fn preset_env(name: &str, height: usize, width: usize) -> Result<EnvironmentMap> {
    type Lobe = (Vec3, f64, [f64; 3]);
    let (sky, ground, lobes): ([f64; 3], [f64; 3], Vec<Lobe>) = match name {
        "studio" => (
            [0.55, 0.6, 0.7],
            [0.25, 0.22, 0.2],
            vec![
                (Vec3::new(0.6, 0.7, 0.4), 6.0, [3.0, 2.8, 2.5]),
                (Vec3::new(-0.7, 0.3, -0.5), 4.0, [1.2, 1.4, 1.8]),
            ],
        ),
        "sunset" => (
            [0.35, 0.3, 0.45],
            [0.15, 0.12, 0.1],
            vec![
                (Vec3::new(-0.8, 0.15, 0.5), 10.0, [4.0, 2.2, 1.0]),
                (Vec3::new(0.3, 0.9, -0.2), 2.0, [0.6, 0.7, 1.0]),
            ],
        ),
        "overcast" => (
            [0.8, 0.82, 0.85],
            [0.3, 0.3, 0.28],
            vec![(Vec3::new(0.0, 1.0, 0.0), 1.5, [0.6, 0.6, 0.6])],
        ),
        "dusk" => (
            [0.2, 0.25, 0.45],
            [0.1, 0.1, 0.12],
            vec![
                (Vec3::new(0.2, 0.4, -0.9), 8.0, [2.0, 1.5, 3.0]),
                (Vec3::new(0.9, 0.2, 0.3), 5.0, [2.5, 1.2, 0.6]),
            ],
        ),
        other => return Err(Error::InvalidParameter(format!("unknown environment preset {other:?}"))),
    };
    let f = |d: &Vec3| -> [f64; 3] {
        let s = 0.5 * (1.0 + d.y);
        let mut v = [0.0; 3];
        for c in 0..3 {
            v[c] = ground[c] + (sky[c] - ground[c]) * s;
        }
        for (a, sharp, col) in &lobes {
            let k = (sharp * (d.dot(&a.normalize()) - 1.0)).exp();
            for c in 0..3 {
                v[c] += col[c] * k;
            }
        }
        v.map(|x| x as f32 as f64)
    };
    let rad = (0..height * width)
        .map(|k| {
            let d = crate::envlight::texel_to_dir((k / width) as f64 + 0.5, (k % width) as f64 + 0.5, height, width);
            f(&d)
        })
        .collect();
    EnvironmentMap::new(height, width, rad)
}

pub const MATERIAL_A: SurfaceBrdf = SurfaceBrdf {
    albedo: [0.7, 0.5, 0.35, 0.8],
    roughness: 0.6,
    metallic: 0.0,
};

pub const MATERIAL_B: SurfaceBrdf = SurfaceBrdf {
    albedo: [0.3, 0.45, 0.6, 0.2],
    roughness: 0.2,
    metallic: 0.0,
};

/// Unit sphere at the origin split by the plane `x = 0`: the `x ≥ 0` half
/// uses [`MATERIAL_A`], the other half [`MATERIAL_B`]. A vertical
/// split lets ring cameras see the highlight on both materials.
pub fn two_material_sphere(env: EnvironmentMap) -> AnalyticScene {
    AnalyticScene::new(
        vec![Primitive {
            shape: Shape::Sphere {
                center: Vec3::zeros(),
                radius: 1.0,
            },
            brdf: MATERIAL_B,
            split: Some(MaterialSplit {
                normal: Vec3::x(),
                offset: 0.0,
                brdf: MATERIAL_A,
            }),
        }],
        env,
        default_flash(),
        0.1,
    )
    .expect("valid preset")
}

pub fn default_flash() -> FlashModel {
    FlashModel {
        offset: Vec3::new(0.1, 0.0, 0.0),
        intensity: 12.0,
    }
}

/// The acceptance trajectory: 20 views at 20° elevation, distance 4.
pub fn default_ring(views: usize, resolution: usize) -> Ring {
    Ring {
        views,
        distance: 4.0,
        elevation: 20f64.to_radians(),
        target: Vec3::zeros(),
        fx: 90.0 * resolution as f64 / 64.0,
        width: resolution,
        height: resolution,
        phase: 0.0,
    }
}

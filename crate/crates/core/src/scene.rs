//! 2D Gaussian surfel scene: primitives, ray–splat intersection, depth
//! ordering, a uniform grid for secondary rays, and binary checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::brdf::{param, BasisSet, Collapsed, MixtureWeights};
use crate::envlight::EnvironmentMap;
use crate::error::{io_err, Error, Result};
use crate::pipeline::FlashModel;
use crate::spectral::{orthonormal_basis, Camera, Ray, Vec3};

/// Contributions with Gaussian influence below this are skipped.
pub const INFLUENCE_CUTOFF: f64 = 1e-4;

/// `u² + v²` at which the influence reaches [`INFLUENCE_CUTOFF`].
pub fn cutoff_radius2() -> f64 {
    -2.0 * INFLUENCE_CUTOFF.ln()
}

pub const DEFAULT_SH_DEGREE: usize = 2;

pub fn sh_coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// One planar Gaussian. Optimized quantities are stored in their
/// unconstrained form (log scales, opacity and albedo logits); accessors
/// return the constrained values.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian2D {
    pub center: Vec3,
    pub tangent_u: Vec3,
    pub tangent_v: Vec3,
    pub log_scale: [f64; 2],
    pub opacity_logit: f64,
    /// Spherical-harmonics radiance, `sh[3 * k + c]` for coefficient `k`,
    /// channel `c`.
    pub sh: Vec<f64>,
    pub mixture_logits: Vec<f64>,
    pub albedo_logits: [f64; 3],
    /// Collapsed `(σ, m, ρ_NIR)` fixed by the cross-spectral transfer.
    pub frozen: Option<Collapsed>,
}

impl Gaussian2D {
    /// Builds a splat from constrained values; `tangent_v` is
    /// re-orthogonalized against `tangent_u`.
    pub fn new(center: Vec3, tangent_u: Vec3, tangent_v: Vec3, scale: [f64; 2], opacity: f64) -> Result<Self> {
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidParameter(format!("scales {scale:?} must be positive")));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::InvalidParameter(format!("opacity {opacity} outside [0,1]")));
        }
        let tu = tangent_u.normalize();
        let tv = tangent_v - tu * tu.dot(&tangent_v);
        if tv.norm() < 1e-9 {
            return Err(Error::Degenerate("tangent axes are parallel".into()));
        }
        let mut g = Gaussian2D {
            center,
            tangent_u: tu,
            tangent_v: tv.normalize(),
            log_scale: [scale[0].ln(), scale[1].ln()],
            opacity_logit: 0.0,
            sh: Vec::new(),
            mixture_logits: Vec::new(),
            albedo_logits: [0.0; 3],
            frozen: None,
        };
        g.set_opacity(opacity);
        Ok(g)
    }

    pub fn scale(&self) -> [f64; 2] {
        [self.log_scale[0].exp(), self.log_scale[1].exp()]
    }

    pub fn opacity(&self) -> f64 {
        if self.opacity_logit == f64::INFINITY {
            1.0
        } else {
            param::sigmoid(self.opacity_logit)
        }
    }

    /// Exact for 0 and 1 (infinite logits).
    pub fn set_opacity(&mut self, o: f64) {
        self.opacity_logit = if o >= 1.0 {
            f64::INFINITY
        } else if o <= 0.0 {
            f64::NEG_INFINITY
        } else {
            (o / (1.0 - o)).ln()
        };
    }

    pub fn normal(&self) -> Vec3 {
        self.tangent_u.cross(&self.tangent_v)
    }

    pub fn albedo_rgb(&self) -> [f64; 3] {
        self.albedo_logits.map(param::sigmoid)
    }

    pub fn set_albedo_rgb(&mut self, a: [f64; 3]) {
        self.albedo_logits = a.map(param::logit);
    }

    pub fn mixture_weights(&self) -> MixtureWeights {
        MixtureWeights::from_logits(&self.mixture_logits)
    }

    /// Rotates the tangent frame by the axis-angle vector `omega` (world
    /// frame) and re-orthonormalizes.
    pub fn rotate(&mut self, omega: &Vec3) {
        let angle = omega.norm();
        if angle < 1e-300 {
            return;
        }
        let rot = nalgebra::Rotation3::new(*omega);
        let tu = (rot * self.tangent_u).normalize();
        let tv = rot * self.tangent_v;
        let tv = (tv - tu * tu.dot(&tv)).normalize();
        self.tangent_u = tu;
        self.tangent_v = tv;
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.normal();
        let ok = (self.tangent_u.norm() - 1.0).abs() <= 1e-6
            && (self.tangent_v.norm() - 1.0).abs() <= 1e-6
            && self.tangent_u.dot(&self.tangent_v).abs() <= 1e-6
            && (n.norm() - 1.0).abs() <= 1e-6;
        if !ok {
            return Err(Error::Degenerate("tangent frame is not orthonormal".into()));
        }
        let o = self.opacity();
        if !(0.0..=1.0).contains(&o) || self.log_scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidParameter("opacity or scale out of range".into()));
        }
        Ok(())
    }

    /// Axis-aligned bound of the disc where the influence exceeds the cutoff.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let r = cutoff_radius2().sqrt();
        let [su, sv] = self.scale();
        let a = self.tangent_u * (su * r);
        let b = self.tangent_v * (sv * r);
        let ext = Vec3::new(
            a.x.hypot(b.x),
            a.y.hypot(b.y),
            a.z.hypot(b.z),
        );
        (self.center - ext, self.center + ext)
    }
}

/// Ray parameter and local splat coordinates (in units of the scales).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatHit {
    pub t: f64,
    pub u: f64,
    pub v: f64,
}

/// Intersects the ray with the splat plane. `None` if the ray is parallel to
/// the plane or the hit lies at `t ≤ 0`.
#[inline]
pub fn intersect(g: &Gaussian2D, ray: &Ray) -> Option<SplatHit> {
    let n = g.normal();
    let denom = ray.direction.dot(&n);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (g.center - ray.origin).dot(&n) / denom;
    if t <= 0.0 {
        return None;
    }
    let delta = ray.at(t) - g.center;
    let [su, sv] = g.scale();
    Some(SplatHit {
        t,
        u: delta.dot(&g.tangent_u) / su,
        v: delta.dot(&g.tangent_v) / sv,
    })
}

/// `exp(-(u² + v²) / 2)`
#[inline]
pub fn influence(u: f64, v: f64) -> f64 {
    (-0.5 * (u * u + v * v)).exp()
}

/// Pipeline progress marker stored with the scene.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Seeded = 0,
    Geometry = 1,
    Nir = 2,
    Transferred = 3,
    Rgb = 4,
}

impl Stage {
    fn from_u8(v: u8) -> Option<Stage> {
        Some(match v {
            0 => Stage::Seeded,
            1 => Stage::Geometry,
            2 => Stage::Nir,
            3 => Stage::Transferred,
            4 => Stage::Rgb,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Seeded => "seeded",
            Stage::Geometry => "geometry",
            Stage::Nir => "nir",
            Stage::Transferred => "transferred",
            Stage::Rgb => "rgb",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub gaussians: Vec<Gaussian2D>,
    pub bases: BasisSet,
    pub env: Option<EnvironmentMap>,
    pub flash: Option<FlashModel>,
    pub sh_degree: usize,
    pub stage: Stage,
}

impl Scene {
    pub fn new(gaussians: Vec<Gaussian2D>, bases: BasisSet) -> Result<Scene> {
        let s = Scene {
            gaussians,
            bases,
            env: None,
            flash: None,
            sh_degree: DEFAULT_SH_DEGREE,
            stage: Stage::Seeded,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.gaussians.is_empty() {
            return Err(Error::InvalidParameter("scene has no Gaussians".into()));
        }
        let nb = self.bases.len();
        for (k, g) in self.gaussians.iter().enumerate() {
            g.validate()
                .map_err(|e| Error::InvalidParameter(format!("gaussian {k}: {e}")))?;
            if !g.mixture_logits.is_empty() && g.mixture_logits.len() != nb {
                return Err(Error::Dimension(format!(
                    "gaussian {k} has {} mixture logits for {nb} bases",
                    g.mixture_logits.len()
                )));
            }
        }
        Ok(())
    }

    pub fn geometry_checksum(&self) -> u64 {
        crate::render::geometry_checksum(&self.gaussians)
    }

    /// FNV-1a over the mixture, basis and frozen reflectance parameters.
    pub fn reflectance_checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for b in &self.bases.bases {
            h.f64(b.albedo_nir);
            h.f64(b.roughness);
            h.f64(b.metallic);
        }
        for g in &self.gaussians {
            g.mixture_logits.iter().for_each(|v| h.f64(*v));
            if let Some(c) = g.frozen {
                h.f64(c.roughness);
                h.f64(c.metallic);
                h.f64(c.albedo_nir);
            }
        }
        h.finish()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.checkpoint_bytes();
        std::fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Scene> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(io_err(format!("reading {}", path.display())))?;
        Scene::from_checkpoint_bytes(&bytes)
    }

    /// Serializes the scene, little-endian; the layout is listed in the README.
    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut w, CHECKPOINT_VERSION);
        w.push(self.stage as u8);
        put_u32(&mut w, self.sh_degree as u32);
        put_u32(&mut w, self.bases.len() as u32);
        put_u32(&mut w, self.gaussians.len() as u32);
        for b in &self.bases.bases {
            put_f64s(&mut w, &[b.albedo_nir, b.roughness, b.metallic]);
        }
        let nsh = 3 * sh_coeff_count(self.sh_degree);
        let nb = self.bases.len();
        for g in &self.gaussians {
            put_f64s(&mut w, g.center.as_slice());
            put_f64s(&mut w, g.tangent_u.as_slice());
            put_f64s(&mut w, g.tangent_v.as_slice());
            put_f64s(&mut w, &g.log_scale);
            put_f64s(&mut w, &[g.opacity_logit]);
            if g.sh.is_empty() {
                w.push(0);
            } else {
                w.push(1);
                let mut sh = g.sh.clone();
                sh.resize(nsh, 0.0);
                put_f64s(&mut w, &sh);
            }
            if g.mixture_logits.is_empty() {
                w.push(0);
            } else {
                w.push(1);
                let mut ml = g.mixture_logits.clone();
                ml.resize(nb, 0.0);
                put_f64s(&mut w, &ml);
            }
            put_f64s(&mut w, &g.albedo_logits);
            match g.frozen {
                Some(c) => {
                    w.push(1);
                    put_f64s(&mut w, &[c.roughness, c.metallic, c.albedo_nir]);
                }
                None => w.push(0),
            }
        }
        match &self.env {
            Some(env) => {
                w.push(1);
                put_u32(&mut w, env.height() as u32);
                put_u32(&mut w, env.width() as u32);
                for px in env.radiance() {
                    put_f64s(&mut w, px);
                }
            }
            None => w.push(0),
        }
        match &self.flash {
            Some(f) => {
                w.push(1);
                put_f64s(&mut w, f.offset.as_slice());
                put_f64s(&mut w, &[f.intensity]);
            }
            None => w.push(0),
        }
        w
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Scene> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let stage = Stage::from_u8(r.u8()?).ok_or_else(|| Error::Checkpoint("bad stage tag".into()))?;
        let sh_degree = r.u32()? as usize;
        let nb = r.u32()? as usize;
        let ng = r.u32()? as usize;
        if sh_degree > 8 {
            return Err(Error::Checkpoint(format!("implausible SH degree {sh_degree}")));
        }
        let mut bases = Vec::with_capacity(nb);
        for _ in 0..nb {
            let v = r.f64s(3)?;
            bases.push(crate::brdf::Basis {
                albedo_nir: v[0],
                roughness: v[1],
                metallic: v[2],
            });
        }
        let nsh = 3 * sh_coeff_count(sh_degree);
        let mut gaussians = Vec::with_capacity(ng.min(1 << 24));
        for _ in 0..ng {
            let c = r.f64s(3)?;
            let tu = r.f64s(3)?;
            let tv = r.f64s(3)?;
            let ls = r.f64s(2)?;
            let op = r.f64s(1)?[0];
            let sh = if r.u8()? == 1 { r.f64s(nsh)? } else { Vec::new() };
            let ml = if r.u8()? == 1 { r.f64s(nb)? } else { Vec::new() };
            let al = r.f64s(3)?;
            let frozen = if r.u8()? == 1 {
                let v = r.f64s(3)?;
                Some(Collapsed {
                    roughness: v[0],
                    metallic: v[1],
                    albedo_nir: v[2],
                })
            } else {
                None
            };
            gaussians.push(Gaussian2D {
                center: Vec3::from_column_slice(&c),
                tangent_u: Vec3::from_column_slice(&tu),
                tangent_v: Vec3::from_column_slice(&tv),
                log_scale: [ls[0], ls[1]],
                opacity_logit: op,
                sh,
                mixture_logits: ml,
                albedo_logits: [al[0], al[1], al[2]],
                frozen,
            });
        }
        let env = if r.u8()? == 1 {
            let h = r.u32()? as usize;
            let w = r.u32()? as usize;
            let vals = r.f64s(h * w * 3)?;
            let rad = vals.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
            Some(EnvironmentMap::new(h, w, rad)?)
        } else {
            None
        };
        let flash = if r.u8()? == 1 {
            let v = r.f64s(4)?;
            Some(FlashModel {
                offset: Vec3::new(v[0], v[1], v[2]),
                intensity: v[3],
            })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let scene = Scene {
            gaussians,
            bases: BasisSet::new(bases)?,
            env,
            flash,
            sh_degree,
            stage,
        };
        scene.validate()?;
        Ok(scene)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RGBNIRCK";
const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.write_all(&v.to_le_bytes()).unwrap();
}

fn put_f64s(w: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        w.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
    fn f64(&mut self, v: f64) {
        for b in v.to_bits().to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}

/// Indices of Gaussians in front of the camera, nearest center first; ties
/// keep index order.
pub fn depth_sort(scene: &Scene, camera: &Camera) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = scene
        .gaussians
        .iter()
        .enumerate()
        .filter_map(|(k, g)| {
            let z = camera.depth(&g.center);
            (z > 0.0).then_some((z, k))
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
    keyed.into_iter().map(|(_, k)| k).collect()
}

/// Real spherical-harmonics basis up to degree 2 (3DGS sign convention).
pub fn sh_basis(degree: usize, d: &Vec3) -> [f64; 9] {
    const C0: f64 = 0.282_094_791_773_878_14;
    const C1: f64 = 0.488_602_511_902_919_9;
    const C2: [f64; 5] = [
        1.092_548_430_592_079_2,
        -1.092_548_430_592_079_2,
        0.315_391_565_252_520_05,
        -1.092_548_430_592_079_2,
        0.546_274_215_296_039_6,
    ];
    let mut b = [0.0; 9];
    b[0] = C0;
    if degree >= 1 {
        b[1] = -C1 * d.y;
        b[2] = C1 * d.z;
        b[3] = -C1 * d.x;
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        b[4] = C2[0] * x * y;
        b[5] = C2[1] * y * z;
        b[6] = C2[2] * (2.0 * z * z - x * x - y * y);
        b[7] = C2[3] * x * z;
        b[8] = C2[4] * (x * x - y * y);
    }
    b
}

/// Seeds `count` splats on a sphere (Fibonacci lattice) with random tangent
/// frames. Scales equal `scale_factor` times the mean lattice spacing.
pub fn seed_sphere(
    center: Vec3,
    radius: f64,
    count: usize,
    scale_factor: f64,
    opacity: f64,
    rng: &mut impl Rng,
) -> Vec<Gaussian2D> {
    let spacing = (4.0 * std::f64::consts::PI * radius * radius / count as f64).sqrt();
    let scale = spacing * scale_factor;
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..count)
        .map(|k| {
            let y = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * k as f64;
            let p = center + Vec3::new(r * phi.cos(), y, r * phi.sin()) * radius;
            let n = random_unit(rng);
            let (a, b) = orthonormal_basis(&n);
            let ang: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let tu = a * ang.cos() + b * ang.sin();
            let tv = n.cross(&tu);
            Gaussian2D::new(p, tu, tv, [scale, scale], opacity).expect("valid seed")
        })
        .collect()
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Uniform grid over splat bounds for secondary (visibility) rays.
#[derive(Debug, Clone)]
pub struct SplatGrid {
    lo: Vec3,
    cell: Vec3,
    dims: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl SplatGrid {
    pub fn build(gaussians: &[Gaussian2D]) -> SplatGrid {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        let bounds: Vec<(Vec3, Vec3)> = gaussians.iter().map(|g| g.bounds()).collect();
        for (a, b) in &bounds {
            lo = lo.inf(a);
            hi = hi.sup(b);
        }
        if gaussians.is_empty() {
            lo = Vec3::zeros();
            hi = Vec3::repeat(1.0);
        }
        let pad = (hi - lo).max() * 1e-6 + 1e-9;
        lo -= Vec3::repeat(pad);
        hi += Vec3::repeat(pad);
        let per_axis = ((gaussians.len() as f64).cbrt() * 1.5).ceil().clamp(1.0, 64.0) as usize;
        let ext = hi - lo;
        let dims = [per_axis, per_axis, per_axis];
        let cell = Vec3::new(
            ext.x / dims[0] as f64,
            ext.y / dims[1] as f64,
            ext.z / dims[2] as f64,
        );
        let mut cells = vec![Vec::new(); dims[0] * dims[1] * dims[2]];
        let index = |p: f64, l: f64, c: f64, d: usize| (((p - l) / c).floor().max(0.0) as usize).min(d - 1);
        let grow = Vec3::repeat(pad);
        for (k, (a, b)) in bounds.iter().enumerate() {
            let (a, b) = (a - grow, b + grow);
            let i0 = [index(a.x, lo.x, cell.x, dims[0]), index(a.y, lo.y, cell.y, dims[1]), index(a.z, lo.z, cell.z, dims[2])];
            let i1 = [index(b.x, lo.x, cell.x, dims[0]), index(b.y, lo.y, cell.y, dims[1]), index(b.z, lo.z, cell.z, dims[2])];
            for z in i0[2]..=i1[2] {
                for y in i0[1]..=i1[1] {
                    for x in i0[0]..=i1[0] {
                        cells[(z * dims[1] + y) * dims[0] + x].push(k as u32);
                    }
                }
            }
        }
        SplatGrid { lo, cell, dims, cells }
    }

    /// Visits every splat hit along the ray with `t > t_min` exactly once, in
    /// cell order (front to back up to ties within a cell). The callback gets
    /// `(index, hit)` and returns `false` to stop.
    pub fn traverse(&self, gaussians: &[Gaussian2D], ray: &Ray, t_min: f64, mut visit: impl FnMut(usize, &SplatHit) -> bool) {
        let hi = self.lo + Vec3::new(
            self.cell.x * self.dims[0] as f64,
            self.cell.y * self.dims[1] as f64,
            self.cell.z * self.dims[2] as f64,
        );
        // slab clip
        let mut t0 = t_min.max(0.0);
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = ray.origin[a];
            let d = ray.direction[a];
            if d.abs() < 1e-300 {
                if o < self.lo[a] || o > hi[a] {
                    return;
                }
            } else {
                let ta = (self.lo[a] - o) / d;
                let tb = (hi[a] - o) / d;
                t0 = t0.max(ta.min(tb));
                t1 = t1.min(ta.max(tb));
            }
        }
        if t0 >= t1 {
            return;
        }
        let p = ray.at(t0);
        let mut idx = [0i64; 3];
        let mut step = [0i64; 3];
        let mut t_next = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let c = (((p[a] - self.lo[a]) / self.cell[a]).floor() as i64).clamp(0, self.dims[a] as i64 - 1);
            idx[a] = c;
            let d = ray.direction[a];
            if d > 0.0 {
                step[a] = 1;
                t_next[a] = (self.lo[a] + (c + 1) as f64 * self.cell[a] - ray.origin[a]) / d;
                t_delta[a] = self.cell[a] / d;
            } else if d < 0.0 {
                step[a] = -1;
                t_next[a] = (self.lo[a] + c as f64 * self.cell[a] - ray.origin[a]) / d;
                t_delta[a] = -self.cell[a] / d;
            }
        }
        let r2 = cutoff_radius2();
        let tol = 1e-9 * (1.0 + t1.min(1e6));
        // hits accepted within `tol` of the previous cell's exit, so a splat
        // on a cell boundary is visited once
        let mut boundary: Vec<u32> = Vec::new();
        let mut next_boundary: Vec<u32> = Vec::new();
        let mut t_enter = t0;
        loop {
            let axis = if t_next[0] <= t_next[1] && t_next[0] <= t_next[2] {
                0
            } else if t_next[1] <= t_next[2] {
                1
            } else {
                2
            };
            let t_exit = t_next[axis].min(t1);
            let cell = (idx[2] as usize * self.dims[1] + idx[1] as usize) * self.dims[0] + idx[0] as usize;
            next_boundary.clear();
            for &k in &self.cells[cell] {
                let g = &gaussians[k as usize];
                if let Some(hit) = intersect(g, ray) {
                    if hit.t > t_min
                        && hit.t >= t_enter - tol
                        && hit.t < t_exit + tol
                        && hit.u * hit.u + hit.v * hit.v <= r2
                        && !(hit.t < t_enter + tol && boundary.contains(&k))
                    {
                        if hit.t >= t_exit - tol {
                            next_boundary.push(k);
                        }
                        if !visit(k as usize, &hit) {
                            return;
                        }
                    }
                }
            }
            std::mem::swap(&mut boundary, &mut next_boundary);
            if t_exit >= t1 {
                return;
            }
            idx[axis] += step[axis];
            if idx[axis] < 0 || idx[axis] >= self.dims[axis] as i64 {
                return;
            }
            t_enter = t_exit;
            t_next[axis] += t_delta[axis];
        }
    }
}

//! Lat-long environment lighting, light importance sampling, Gaussian
//! visibility rays, and the MIS pixel estimator.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::brdf::{self, SurfaceBrdf};
use crate::error::{Error, Result};
use crate::scene::{Gaussian2D, SplatGrid, INFLUENCE_CUTOFF};
use crate::spectral::{Channel, Ray, Vec3};

/// Rec. 709 luminance weights.
pub const LUMINANCE: [f64; 3] = [0.2126, 0.7152, 0.0722];

pub const DEFAULT_ENV_HEIGHT: usize = 16;
pub const DEFAULT_ENV_WIDTH: usize = 32;

pub fn luminance(rgb: &[f64; 3]) -> f64 {
    LUMINANCE[0] * rgb[0] + LUMINANCE[1] * rgb[1] + LUMINANCE[2] * rgb[2]
}

/// Equirectangular mapping. `row = θ/π · H` with `θ = acos(y)`, and
/// `col = (φ + π)/(2π) · W` with `φ = atan2(x, z)`.
pub fn dir_to_texel(d: &Vec3, height: usize, width: usize) -> (f64, f64) {
    let theta = d.y.clamp(-1.0, 1.0).acos();
    let phi = d.x.atan2(d.z);
    let row = theta / PI * height as f64;
    let mut col = (phi + PI) / (2.0 * PI) * width as f64;
    if col >= width as f64 {
        col -= width as f64;
    }
    (row, col)
}

pub fn texel_to_dir(row: f64, col: f64, height: usize, width: usize) -> Vec3 {
    let theta = row / height as f64 * PI;
    let phi = col / width as f64 * 2.0 * PI - PI;
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    Vec3::new(st * sp, ct, st * cp)
}

/// One linear piece `a + bθ` of a row kernel on `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Piece {
    lo: f64,
    hi: f64,
    a: f64,
    b: f64,
}

impl Piece {
    fn through(lo: f64, hi: f64, v_lo: f64, v_hi: f64) -> Piece {
        let b = (v_hi - v_lo) / (hi - lo);
        Piece { lo, hi, a: v_lo - b * lo, b }
    }

    /// Antiderivative of `(a + bθ) sin θ`.
    fn prim(&self, t: f64) -> f64 {
        -(self.a + self.b * t) * t.cos() + self.b * t.sin()
    }

    fn mass(&self) -> f64 {
        (self.prim(self.hi) - self.prim(self.lo)).max(0.0)
    }

    fn density(&self, t: f64) -> f64 {
        (self.a + self.b * t) * t.sin()
    }

    /// θ where the partial mass reaches `target`; safeguarded Newton.
    fn invert(&self, target: f64) -> f64 {
        let base = self.prim(self.lo);
        let (mut lo, mut hi) = (self.lo, self.hi);
        let mut t = 0.5 * (lo + hi);
        for _ in 0..60 {
            let f = self.prim(t) - base - target;
            if f > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let d = self.density(t);
            let mut next = if d > 1e-300 { t - f / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - t).abs() < 1e-15 * (1.0 + t.abs()) || hi - lo < 1e-15 {
                return next;
            }
            t = next;
        }
        t
    }
}

/// The (clamped) bilinear row kernel of row `i` as a function of θ.
fn row_pieces(i: usize, height: usize) -> Vec<Piece> {
    let d = PI / height as f64;
    let c = (i as f64 + 0.5) * d;
    if height == 1 {
        return vec![Piece::through(0.0, PI, 1.0, 1.0)];
    }
    let mut out = Vec::with_capacity(2);
    if i == 0 {
        out.push(Piece::through(0.0, c, 1.0, 1.0));
    } else {
        out.push(Piece::through(c - d, c, 0.0, 1.0));
    }
    if i == height - 1 {
        out.push(Piece::through(c, PI, 1.0, 1.0));
    } else {
        out.push(Piece::through(c, c + d, 1.0, 0.0));
    }
    out
}

/// Sampling table for the density proportional to the luminance of the
/// bilinearly interpolated map. The interpolant is a nonnegative sum of
/// separable row/column kernels, so it is sampled exactly as a mixture.
#[derive(Debug, Clone, PartialEq)]
struct SamplingTable {
    /// Cumulative component masses, `H·W` entries, last = `total`.
    cdf: Vec<f64>,
    total: f64,
    rows: Vec<Vec<Piece>>,
    row_mass: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentMap {
    height: usize,
    width: usize,
    radiance: Vec<[f64; 3]>,
    table: SamplingTable,
}

impl Serialize for EnvironmentMap {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.height, self.width, &self.radiance).serialize(s)
    }
}

impl<'de> Deserialize<'de> for EnvironmentMap {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (h, w, r) = <(usize, usize, Vec<[f64; 3]>)>::deserialize(d)?;
        EnvironmentMap::new(h, w, r).map_err(serde::de::Error::custom)
    }
}

impl EnvironmentMap {
    /// `radiance` is row-major, row 0 at the +y pole.
    pub fn new(height: usize, width: usize, radiance: Vec<[f64; 3]>) -> Result<Self> {
        if height == 0 || width == 0 || radiance.len() != height * width {
            return Err(Error::Dimension(format!(
                "environment {height}x{width} with {} texels",
                radiance.len()
            )));
        }
        if radiance.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidParameter("environment radiance must be finite and nonnegative".into()));
        }
        let table = SamplingTable::build(height, width, &radiance);
        Ok(EnvironmentMap {
            height,
            width,
            radiance,
            table,
        })
    }

    pub fn constant(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self::new(height, width, vec![rgb; height * width]).expect("valid constant map")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.radiance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radiance.is_empty()
    }

    pub fn radiance(&self) -> &[[f64; 3]] {
        &self.radiance
    }

    pub fn texel(&self, row: usize, col: usize) -> [f64; 3] {
        self.radiance[row * self.width + col]
    }

    /// Replaces the radiance and rebuilds the sampling table.
    pub fn set_radiance(&mut self, radiance: Vec<[f64; 3]>) -> Result<()> {
        *self = Self::new(self.height, self.width, radiance)?;
        Ok(())
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.radiance.iter().map(|p| p.map(|v| v * k)).collect(),
        )
    }

    pub fn total_luminance(&self) -> f64 {
        self.table.total
    }

    pub fn mean_radiance(&self) -> [f64; 3] {
        // solid-angle weighted, using the same row kernels as sampling
        let mut acc = [0.0; 3];
        for i in 0..self.height {
            let w = self.table.row_mass[i] * 2.0 * PI / self.width as f64;
            for j in 0..self.width {
                let t = self.texel(i, j);
                for c in 0..3 {
                    acc[c] += w * t[c];
                }
            }
        }
        acc.map(|v| v / (4.0 * PI))
    }

    /// The four bilinear taps `(texel index, weight)`; weights sum to one.
    pub fn bilinear_taps(&self, d: &Vec3) -> [(usize, f64); 4] {
        let (row, col) = dir_to_texel(d, self.height, self.width);
        let rr = row - 0.5;
        let (r0, r1, fr) = if rr <= 0.0 {
            (0, 0, 0.0)
        } else if rr >= (self.height - 1) as f64 {
            (self.height - 1, self.height - 1, 0.0)
        } else {
            let r0 = rr.floor() as usize;
            (r0, (r0 + 1).min(self.height - 1), rr - r0 as f64)
        };
        let cc = col - 0.5;
        let c0f = cc.floor();
        let fc = cc - c0f;
        let w = self.width as i64;
        let c0 = (c0f as i64).rem_euclid(w) as usize;
        let c1 = (c0f as i64 + 1).rem_euclid(w) as usize;
        let idx = |r: usize, c: usize| r * self.width + c;
        [
            (idx(r0, c0), (1.0 - fr) * (1.0 - fc)),
            (idx(r0, c1), (1.0 - fr) * fc),
            (idx(r1, c0), fr * (1.0 - fc)),
            (idx(r1, c1), fr * fc),
        ]
    }

    pub fn eval(&self, d: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (k, w) in self.bilinear_taps(d) {
            let t = self.radiance[k];
            for c in 0..3 {
                out[c] += w * t[c];
            }
        }
        out
    }

    /// Bilinear lookup of one RGB channel. NIR has no environment term and
    /// evaluates to zero.
    pub fn eval_channel(&self, d: &Vec3, channel: Channel) -> f64 {
        match channel {
            Channel::Nir => 0.0,
            c => self.eval(d)[c.index()],
        }
    }

    /// Solid-angle density of [`Self::sample`].
    pub fn pdf(&self, d: &Vec3) -> f64 {
        if self.table.total <= 0.0 {
            return 0.0;
        }
        luminance(&self.eval(d)) / self.table.total
    }

    /// Draws a direction with density proportional to the luminance of the
    /// interpolated map. Returns the direction and its solid-angle pdf.
    pub fn sample(&self, u: [f64; 2]) -> Result<(Vec3, f64)> {
        let t = &self.table;
        if t.total <= 0.0 {
            return Err(Error::NoLightEnergy);
        }
        let target = u[0] * t.total;
        let k = t.cdf.partition_point(|&c| c <= target).min(t.cdf.len() - 1);
        let prev = if k == 0 { 0.0 } else { t.cdf[k - 1] };
        let mass = t.cdf[k] - prev;
        let mut r = if mass > 0.0 { ((target - prev) / mass).clamp(0.0, 1.0) } else { 0.5 };
        let (row, col) = (k / self.width, k % self.width);

        let pieces = &t.rows[row];
        let masses: Vec<f64> = pieces.iter().map(Piece::mass).collect();
        let total: f64 = masses.iter().sum();
        let mut acc = r * total;
        let mut theta = pieces[pieces.len() - 1].hi;
        for (p, m) in pieces.iter().zip(&masses) {
            if acc <= *m || std::ptr::eq(p, pieces.last().unwrap()) {
                theta = p.invert(acc.min(*m));
                break;
            }
            acc -= m;
        }
        // periodic tent centered on the column
        r = u[1];
        let x = if r < 0.5 { (2.0 * r).sqrt() - 1.0 } else { 1.0 - (2.0 * (1.0 - r)).sqrt() };
        let mut c = col as f64 + 0.5 + x;
        c = c.rem_euclid(self.width as f64);
        let d = texel_to_dir(theta / PI * self.height as f64, c, self.height, self.width);
        let pdf = self.pdf(&d);
        if !(pdf > 0.0) {
            // only reachable through rounding at a kernel edge
            return Err(Error::Degenerate("light sample landed on a zero-density direction".into()));
        }
        Ok((d, pdf))
    }

    /// Probability that a sample falls inside texel `(row, col)`'s solid
    /// angle, computed by quadrature of the density (diagnostics and tests).
    pub fn texel_probability(&self, row: usize, col: usize, nodes: usize) -> f64 {
        // the density has kinks at texel centers, so integrate each quarter
        let dth = PI / self.height as f64;
        let dph = 2.0 * PI / self.width as f64;
        let mut acc = 0.0;
        for (r0, r1) in [(0.0, 0.5), (0.5, 1.0)] {
            let (tn, tw) = crate::quadrature::gauss_legendre(nodes, row as f64 + r0, row as f64 + r1);
            for (c0, c1) in [(0.0, 0.5), (0.5, 1.0)] {
                let (pn, pw) = crate::quadrature::gauss_legendre(nodes, col as f64 + c0, col as f64 + c1);
                for (r, wr) in tn.iter().zip(&tw) {
                    let s = (r * dth).sin();
                    for (c, wc) in pn.iter().zip(&pw) {
                        let d = texel_to_dir(*r, *c, self.height, self.width);
                        acc += wr * wc * self.pdf(&d) * s;
                    }
                }
            }
        }
        acc * dth * dph
    }
}

impl SamplingTable {
    fn build(height: usize, width: usize, radiance: &[[f64; 3]]) -> Self {
        let rows: Vec<Vec<Piece>> = (0..height).map(|i| row_pieces(i, height)).collect();
        let row_mass: Vec<f64> = rows.iter().map(|p| p.iter().map(Piece::mass).sum()).collect();
        let col_mass = 2.0 * PI / width as f64;
        let mut cdf = Vec::with_capacity(height * width);
        let mut acc = 0.0;
        for i in 0..height {
            for j in 0..width {
                acc += luminance(&radiance[i * width + j]) * row_mass[i] * col_mass;
                cdf.push(acc);
            }
        }
        SamplingTable {
            cdf,
            total: acc,
            rows,
            row_mass,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Brdf,
    Light,
}

/// `N_s p_s / (N_b p_b + N_l p_l)`.
pub fn balance_weight(which: Strategy, n_b: usize, n_l: usize, p_b: f64, p_l: f64) -> Result<f64> {
    let denom = n_b as f64 * p_b + n_l as f64 * p_l;
    if !(denom > 0.0) {
        return Err(Error::ZeroDensity);
    }
    Ok(match which {
        Strategy::Brdf => n_b as f64 * p_b / denom,
        Strategy::Light => n_l as f64 * p_l / denom,
    })
}

/// Offset applied along the normal before tracing secondary rays.
pub const RAY_EPSILON: f64 = 1e-3;

/// Hits on a splat closer than this many of its largest scales are treated
/// as the shading surface itself. A reconstructed surface is a stack of
/// overlapping splats whose composited depth lies inside the stack, so a
/// fixed normal offset alone leaves most secondary rays self-occluded.
pub const SELF_SHADOW_SCALES: f64 = 3.0;

/// Gaussian ray tracer for secondary rays; transmittance uses the same
/// intersection and opacity semantics as the rasterizer.
#[derive(Debug, Clone)]
pub struct Occluders<'a> {
    gaussians: &'a [Gaussian2D],
    grid: SplatGrid,
    self_scales: f64,
}

impl<'a> Occluders<'a> {
    pub fn new(gaussians: &'a [Gaussian2D]) -> Self {
        Occluders {
            gaussians,
            grid: SplatGrid::build(gaussians),
            self_scales: SELF_SHADOW_SCALES,
        }
    }

    /// Overrides the self-shadow guard; 0 counts every hit.
    pub fn with_self_scales(mut self, scales: f64) -> Self {
        self.self_scales = scales.max(0.0);
        self
    }

    pub fn gaussians(&self) -> &'a [Gaussian2D] {
        self.gaussians
    }

    /// Transmittance along the ray, stopping once it drops below the
    /// rasterizer's termination threshold.
    pub fn transmittance(&self, origin: &Vec3, direction: &Vec3) -> f64 {
        let mut t = 1.0;
        self.trace(origin, direction, |_, _, alpha| {
            t *= 1.0 - alpha;
            t >= 1e-4
        });
        t
    }

    /// Visits `(index, ray t, alpha)` for every Gaussian crossed.
    pub fn trace(&self, origin: &Vec3, direction: &Vec3, mut visit: impl FnMut(usize, f64, f64) -> bool) {
        let ray = Ray {
            origin: *origin,
            direction: *direction,
        };
        self.grid.traverse(self.gaussians, &ray, 0.0, |k, hit| {
            let g = crate::scene::influence(hit.u, hit.v);
            if g < INFLUENCE_CUTOFF {
                return true;
            }
            let s = self.gaussians[k].scale();
            if hit.t < self.self_scales * s[0].max(s[1]) {
                return true;
            }
            let alpha = self.gaussians[k].opacity() * g;
            visit(k, hit.t, alpha)
        });
    }
}

/// `visibility(scene, origin, direction)`: transmittance in `[0, 1]`.
pub fn visibility(occluders: &Occluders<'_>, origin: &Vec3, direction: &Vec3) -> f64 {
    occluders.transmittance(origin, direction)
}

/// Single-bounce indirect approximation: the first blockers along a
/// secondary ray reflect the mean environment with their diffuse NIR-stage
/// albedo proxy. Off by default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum IndirectMode {
    #[default]
    Off,
    SingleBounce,
}

/// Per-Gaussian diffuse albedo used by the single-bounce indirect mode.
pub trait BlockerAlbedo {
    fn blocker_albedo(&self, gaussian: usize) -> [f64; 3];
}

impl<F: Fn(usize) -> [f64; 3]> BlockerAlbedo for F {
    fn blocker_albedo(&self, gaussian: usize) -> [f64; 3] {
        self(gaussian)
    }
}

/// Surface sample handed to [`mis_pixel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadingPoint {
    pub position: Vec3,
    pub normal: Vec3,
    /// Unit direction toward the viewer.
    pub view: Vec3,
}

#[derive(Debug, Clone, Copy)]
pub struct MisConfig {
    pub n_brdf: usize,
    pub n_light: usize,
    pub indirect: IndirectMode,
    /// Record per-texel derivatives of the estimate.
    pub record_env_terms: bool,
}

impl Default for MisConfig {
    fn default() -> Self {
        MisConfig {
            n_brdf: 8,
            n_light: 8,
            indirect: IndirectMode::Off,
            record_env_terms: false,
        }
    }
}

/// Estimate and its derivatives. The estimate is affine in each RGB albedo:
/// `radiance[c] = diffuse[c] · ρ^c + specular[c]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MisEstimate {
    pub radiance: [f64; 3],
    pub diffuse: [f64; 3],
    pub specular: [f64; 3],
    /// `(texel, ∂radiance/∂texel radiance per channel)`, only when requested.
    pub env_terms: Vec<(usize, [f64; 3])>,
}

/// `n` points in the unit square, one per row and per column stratum.
fn latin_hypercube(n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let mut cols: Vec<usize> = (0..n).collect();
    cols.shuffle(rng);
    let inv = 1.0 / n as f64;
    cols.into_iter()
        .enumerate()
        .map(|(r, c)| [(r as f64 + rng.gen::<f64>()) * inv, (c as f64 + rng.gen::<f64>()) * inv])
        .collect()
}

/// MIS estimate of reflected environment radiance at a shading point. Falls
/// back to BRDF sampling when the map carries no energy.
pub fn mis_pixel(
    point: &ShadingPoint,
    brdf: &SurfaceBrdf,
    env: &EnvironmentMap,
    occluders: Option<&Occluders<'_>>,
    blockers: Option<&dyn BlockerAlbedo>,
    config: &MisConfig,
    rng: &mut impl Rng,
) -> MisEstimate {
    let mut est = MisEstimate::default();
    let n = point.normal;
    let o = point.view;
    let cos_o = n.dot(&o);
    if cos_o <= 0.0 {
        return est;
    }
    let n_b = config.n_brdf;
    let n_l = if env.total_luminance() > 0.0 { config.n_light } else { 0 };
    let (sigma, m) = (brdf.roughness, brdf.metallic);
    let origin = point.position + n * RAY_EPSILON;
    let diffuse_slope = (1.0 - m) / PI;
    let mean_env = if config.indirect == IndirectMode::SingleBounce {
        env.mean_radiance()
    } else {
        [0.0; 3]
    };

    let contribute = |i: Vec3, p_b: f64, p_l: f64, est: &mut MisEstimate| {
        let cos_i = n.dot(&i);
        if cos_i <= 0.0 {
            return;
        }
        let denom = n_b as f64 * p_b + n_l as f64 * p_l;
        if !(denom > 0.0) {
            return;
        }
        let (vis, bounce) = match occluders {
            None => (1.0, [0.0; 3]),
            Some(occ) => {
                if config.indirect == IndirectMode::SingleBounce {
                    let mut t = 1.0;
                    let mut b = [0.0; 3];
                    occ.trace(&origin, &i, |k, _, alpha| {
                        let a = blockers.map(|f| f.blocker_albedo(k)).unwrap_or([0.0; 3]);
                        for c in 0..3 {
                            b[c] += t * alpha * a[c] * mean_env[c];
                        }
                        t *= 1.0 - alpha;
                        t >= 1e-4
                    });
                    (t, b)
                } else {
                    (occ.transmittance(&origin, &i), [0.0; 3])
                }
            }
        };
        let taps = env.bilinear_taps(&i);
        let mut l_env = [0.0; 3];
        for (k, w) in taps {
            let t = env.radiance[k];
            for c in 0..3 {
                l_env[c] += w * t[c];
            }
        }
        let cos_io = i.dot(&o);
        // specular part is the lobe with zero albedo
        let spec = brdf::lobe(0.0, sigma, m, cos_i, cos_o, cos_io);
        let scale = cos_i / denom;
        for c in 0..3 {
            let l = vis * l_env[c] + bounce[c];
            est.diffuse[c] += l * diffuse_slope * scale;
            est.specular[c] += l * spec * scale;
        }
        if config.record_env_terms && vis > 0.0 {
            for (k, w) in taps {
                if w > 0.0 {
                    let mut d = [0.0; 3];
                    for c in 0..3 {
                        let f = diffuse_slope * brdf.albedo[c] + spec;
                        d[c] = vis * w * f * scale;
                    }
                    est.env_terms.push((k, d));
                }
            }
        }
    };

    for u in latin_hypercube(n_b, rng) {
        if let Some((i, p_b)) = brdf::sample_direction(&o, &n, sigma, m, u) {
            let p_l = if n_l > 0 { env.pdf(&i) } else { 0.0 };
            contribute(i, p_b, p_l, &mut est);
        }
    }
    for u in latin_hypercube(n_l, rng) {
        if let Ok((i, p_l)) = env.sample(u) {
            let p_b = if n_b > 0 { brdf::pdf_direction(&o, &n, sigma, m, &i) } else { 0.0 };
            contribute(i, p_b, p_l, &mut est);
        }
    }
    for c in 0..3 {
        est.radiance[c] = est.diffuse[c] * brdf.albedo[c] + est.specular[c];
    }
    est
}

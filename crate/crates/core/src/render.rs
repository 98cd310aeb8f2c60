//! Differentiable ray-cast compositing of 2D Gaussian splats.
//!
//! Every pixel casts one ray, intersects the splats binned to its tile in
//! center-depth order and composites `Σ T_i α_i f_i`, where `f_i` holds the
//! shader outputs followed by the hit distance `t` and the camera-facing
//! normal. The reverse pass walks each contributor list back to front with
//! suffix composites, so it never divides by `1 - α`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scene::{cutoff_radius2, influence, intersect, Gaussian2D};
use crate::spectral::{Camera, SpectralImage, Vec3};

/// Compositing stops once transmittance falls below this.
pub const TRANSMITTANCE_MIN: f64 = 1e-4;

/// Screen tile edge used for binning splats.
pub const TILE: usize = 8;

/// Pixel rows per reduction chunk in the reverse pass. Fixed so the
/// summation order does not depend on the thread count.
const CHUNK_ROWS: usize = 4;

/// Alpha below which normalized maps are left at zero.
pub const ALPHA_NORMALIZE_MIN: f64 = 1e-3;

/// Geometry of one ray–splat intersection handed to a shader.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShadeInput {
    pub point: Vec3,
    /// Splat normal flipped to face the camera.
    pub normal: Vec3,
    /// Unit ray direction (camera to point).
    pub ray_dir: Vec3,
}

/// Reverse-pass sink for one shader evaluation.
pub struct ShadeGrad<'a> {
    /// Per-Gaussian shader parameters of the shaded splat.
    pub local: &'a mut [f64],
    /// Parameters shared by all splats.
    pub global: &'a mut [f64],
    pub point: Vec3,
    pub normal: Vec3,
}

/// Per-splat radiance (or attribute) function.
pub trait Shader: Sync {
    fn channels(&self) -> usize;

    fn local_params(&self) -> usize {
        0
    }

    fn global_params(&self) -> usize {
        0
    }

    fn shade(&self, gaussian: usize, input: &ShadeInput, out: &mut [f64]);

    /// Accumulates `g_out · ∂shade/∂(params, point, normal)` into `grad`.
    fn shade_backward(&self, _gaussian: usize, _input: &ShadeInput, _g_out: &[f64], _grad: &mut ShadeGrad<'_>) {}
}

/// Fixed per-splat values, independent of the hit. Its local parameters are
/// the values themselves.
pub struct ValueShader {
    pub channels: usize,
    pub values: Vec<f64>,
}

impl Shader for ValueShader {
    fn channels(&self) -> usize {
        self.channels
    }
    fn local_params(&self) -> usize {
        self.channels
    }
    fn shade(&self, k: usize, _: &ShadeInput, out: &mut [f64]) {
        out.copy_from_slice(&self.values[k * self.channels..(k + 1) * self.channels]);
    }
    fn shade_backward(&self, _: usize, _: &ShadeInput, g_out: &[f64], grad: &mut ShadeGrad<'_>) {
        for (l, g) in grad.local.iter_mut().zip(g_out) {
            *l += g;
        }
    }
}

/// One retained intersection.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Contribution {
    gaussian: u32,
    /// Transmittance in front of this splat.
    trans: f64,
    alpha: f64,
    t: f64,
    u: f64,
    v: f64,
    /// +1 or -1: sign applied to the splat normal to face the camera.
    flip: f64,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    width: usize,
    height: usize,
    channels: usize,
    /// Composited shader outputs, `channels` per pixel.
    pub radiance: SpectralImage,
    /// `Σ T_i α_i`
    pub alpha: SpectralImage,
    /// `Σ T_i α_i t_i` (not normalized)
    pub depth: SpectralImage,
    /// `Σ T_i α_i n_i` (not normalized)
    pub normal: SpectralImage,
    contributions: Vec<Contribution>,
    /// Composited features per contribution: shader outputs, `t`, normal.
    features: Vec<f64>,
    offsets: Vec<u32>,
    checksum: u64,
    camera: Camera,
}

impl RenderOutput {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn camera(&self) -> &Camera {
        &self.camera
    }

    /// Final transmittance `1 - alpha` per pixel, computed from the product.
    pub fn final_transmittance(&self, px: usize) -> f64 {
        let (a, b) = (self.offsets[px] as usize, self.offsets[px + 1] as usize);
        match self.contributions[a..b].last() {
            Some(c) => c.trans * (1.0 - c.alpha),
            None => 1.0,
        }
    }

    /// `(gaussian, T_i α_i)` for every contributor of pixel `px`.
    pub fn weights(&self, px: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[px] as usize, self.offsets[px + 1] as usize);
        self.contributions[a..b]
            .iter()
            .map(|c| (c.gaussian as usize, c.trans * c.alpha))
    }

    /// `(gaussian, splat normal sign toward the camera)` per contributor.
    pub fn flips(&self, px: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.offsets[px] as usize, self.offsets[px + 1] as usize);
        self.contributions[a..b].iter().map(|c| (c.gaussian as usize, c.flip))
    }

    pub fn contributor_count(&self) -> usize {
        self.contributions.len()
    }

    /// Depth normalized by alpha (zero where alpha ≤ 1e-3).
    pub fn depth_map(&self) -> SpectralImage {
        let mut out = SpectralImage::new(self.width, self.height, 1);
        for (k, d) in out.data_mut().iter_mut().enumerate() {
            let a = self.alpha.data()[k];
            if a > ALPHA_NORMALIZE_MIN {
                *d = self.depth.data()[k] / a;
            }
        }
        out
    }

    /// Unit normals where alpha > 1e-3, zero elsewhere.
    pub fn normal_map(&self) -> SpectralImage {
        let mut out = SpectralImage::new(self.width, self.height, 3).into_signed();
        for k in 0..self.width * self.height {
            let a = self.alpha.data()[k];
            let n = Vec3::from_column_slice(&self.normal.data()[3 * k..3 * k + 3]);
            if a > ALPHA_NORMALIZE_MIN && n.norm() > 0.0 {
                let n = n.normalize();
                out.data_mut()[3 * k..3 * k + 3].copy_from_slice(n.as_slice());
            }
        }
        out
    }

    /// Radiance composite normalized by alpha (used for attribute maps).
    pub fn normalized_radiance(&self) -> SpectralImage {
        let c = self.channels;
        let mut out = SpectralImage::new(self.width, self.height, c);
        for k in 0..self.width * self.height {
            let a = self.alpha.data()[k];
            if a > ALPHA_NORMALIZE_MIN {
                for j in 0..c {
                    out.data_mut()[k * c + j] = self.radiance.data()[k * c + j] / a;
                }
            }
        }
        out
    }
}

/// Loss gradients with respect to the raw composites of a [`RenderOutput`].
#[derive(Debug, Clone)]
pub struct RenderGrad {
    pub radiance: Vec<f64>,
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
}

impl RenderGrad {
    pub fn zeros(out: &RenderOutput) -> Self {
        let n = out.width * out.height;
        RenderGrad {
            radiance: vec![0.0; n * out.channels],
            alpha: vec![0.0; n],
            depth: vec![0.0; n],
            normal: vec![0.0; 3 * n],
        }
    }
}

/// Gradients for the scene and shader parameters; geometric entries are
/// with respect to world-space fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrad {
    pub center: Vec<Vec3>,
    pub tangent_u: Vec<Vec3>,
    pub tangent_v: Vec<Vec3>,
    pub log_scale: Vec<[f64; 2]>,
    pub opacity_logit: Vec<f64>,
    /// Shader locals, `local_params` per splat.
    pub local: Vec<f64>,
    pub global: Vec<f64>,
}

impl SceneGrad {
    /// Gradient with respect to a world-frame axis-angle rotation of the
    /// tangent frame of splat `k`, at zero rotation.
    pub fn rotation(&self, g: &Gaussian2D, k: usize) -> Vec3 {
        g.tangent_u.cross(&self.tangent_u[k]) + g.tangent_v.cross(&self.tangent_v[k])
    }

    pub fn is_zero(&self) -> bool {
        let z3 = |v: &Vec<Vec3>| v.iter().all(|x| x.iter().all(|c| *c == 0.0));
        z3(&self.center)
            && z3(&self.tangent_u)
            && z3(&self.tangent_v)
            && self.log_scale.iter().flatten().all(|v| *v == 0.0)
            && self.opacity_logit.iter().all(|v| *v == 0.0)
            && self.local.iter().all(|v| *v == 0.0)
            && self.global.iter().all(|v| *v == 0.0)
    }
}

/// FNV-1a over the geometric fields of every splat.
pub fn geometry_checksum(gaussians: &[Gaussian2D]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for g in gaussians {
        for v in g.center.iter().chain(g.tangent_u.iter()).chain(g.tangent_v.iter()) {
            eat(*v);
        }
        eat(g.log_scale[0]);
        eat(g.log_scale[1]);
        eat(g.opacity_logit);
    }
    h
}

/// Splat indices per tile, nearest center first.
fn bin_tiles(gaussians: &[Gaussian2D], camera: &Camera) -> (usize, Vec<Vec<u32>>) {
    let tx = camera.width.div_ceil(TILE);
    let ty = camera.height.div_ceil(TILE);
    let mut order: Vec<(f64, usize)> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(k, g)| {
            let z = camera.depth(&g.center);
            (z > 0.0).then_some((z, k))
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut tiles = vec![Vec::new(); tx * ty];
    for (_, k) in order {
        let g = &gaussians[k];
        let (lo, hi) = g.bounds();
        let mut x0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y0 = f64::INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        let mut behind = false;
        for c in 0..8 {
            let p = Vec3::new(
                if c & 1 == 0 { lo.x } else { hi.x },
                if c & 2 == 0 { lo.y } else { hi.y },
                if c & 4 == 0 { lo.z } else { hi.z },
            );
            match camera.project(&p) {
                Some((px, z)) if z > 1e-9 => {
                    x0 = x0.min(px.x);
                    x1 = x1.max(px.x);
                    y0 = y0.min(px.y);
                    y1 = y1.max(px.y);
                }
                _ => behind = true,
            }
        }
        let (ix0, ix1, iy0, iy1) = if behind {
            (0, tx - 1, 0, ty - 1)
        } else {
            if x1 < -0.5 || y1 < -0.5 || x0 > camera.width as f64 - 0.5 || y0 > camera.height as f64 - 0.5 {
                continue;
            }
            let clampx = |v: f64| ((v.max(0.0) as usize) / TILE).min(tx - 1);
            let clampy = |v: f64| ((v.max(0.0) as usize) / TILE).min(ty - 1);
            (clampx(x0.floor()), clampx(x1.ceil()), clampy(y0.floor()), clampy(y1.ceil()))
        };
        for y in iy0..=iy1 {
            for x in ix0..=ix1 {
                tiles[y * tx + x].push(k as u32);
            }
        }
    }
    (tx, tiles)
}

/// Forward pass. `shader` supplies the per-splat values being composited.
pub fn rasterize(gaussians: &[Gaussian2D], camera: &Camera, shader: &dyn Shader) -> RenderOutput {
    let (w, h) = (camera.width, camera.height);
    let k = shader.channels();
    let nf = k + 4;
    let (tx, tiles) = bin_tiles(gaussians, camera);
    let r2max = cutoff_radius2();

    struct Px {
        contribs: Vec<Contribution>,
        feats: Vec<f64>,
        rad: Vec<f64>,
        alpha: f64,
        depth: f64,
        normal: Vec3,
    }

    let pixels: Vec<Px> = (0..w * h)
        .into_par_iter()
        .map(|p| {
            let (x, y) = (p % w, p / w);
            let ray = camera.pixel_ray(x, y);
            let mut px = Px {
                contribs: Vec::new(),
                feats: Vec::new(),
                rad: vec![0.0; k],
                alpha: 0.0,
                depth: 0.0,
                normal: Vec3::zeros(),
            };
            let mut trans = 1.0;
            let mut f = vec![0.0; k];
            for &gi in &tiles[(y / TILE) * tx + x / TILE] {
                let g = &gaussians[gi as usize];
                let Some(hit) = intersect(g, &ray) else { continue };
                if hit.u * hit.u + hit.v * hit.v > r2max {
                    continue;
                }
                let alpha = g.opacity() * influence(hit.u, hit.v);
                if alpha <= 0.0 {
                    continue;
                }
                let n = g.normal();
                let flip = if n.dot(&ray.direction) > 0.0 { -1.0 } else { 1.0 };
                let normal = n * flip;
                let input = ShadeInput {
                    point: ray.at(hit.t),
                    normal,
                    ray_dir: ray.direction,
                };
                shader.shade(gi as usize, &input, &mut f);
                let wgt = trans * alpha;
                for c in 0..k {
                    px.rad[c] += wgt * f[c];
                }
                px.alpha += wgt;
                px.depth += wgt * hit.t;
                px.normal += normal * wgt;
                px.contribs.push(Contribution {
                    gaussian: gi,
                    trans,
                    alpha,
                    t: hit.t,
                    u: hit.u,
                    v: hit.v,
                    flip,
                });
                px.feats.extend_from_slice(&f);
                px.feats.push(hit.t);
                px.feats.extend_from_slice(normal.as_slice());
                trans *= 1.0 - alpha;
                if trans < TRANSMITTANCE_MIN {
                    break;
                }
            }
            px
        })
        .collect();

    let mut radiance = vec![0.0; w * h * k];
    let mut alpha = vec![0.0; w * h];
    let mut depth = vec![0.0; w * h];
    let mut normal = vec![0.0; w * h * 3];
    let total: usize = pixels.iter().map(|p| p.contribs.len()).sum();
    let mut contributions = Vec::with_capacity(total);
    let mut features = Vec::with_capacity(total * nf);
    let mut offsets = Vec::with_capacity(w * h + 1);
    offsets.push(0u32);
    for (p, px) in pixels.into_iter().enumerate() {
        radiance[p * k..(p + 1) * k].copy_from_slice(&px.rad);
        alpha[p] = px.alpha;
        depth[p] = px.depth;
        normal[3 * p..3 * p + 3].copy_from_slice(px.normal.as_slice());
        contributions.extend(px.contribs);
        features.extend(px.feats);
        offsets.push(contributions.len() as u32);
    }
    let img = |c: usize, d: Vec<f64>| SpectralImage::from_data(w, h, c, d);
    RenderOutput {
        width: w,
        height: h,
        channels: k,
        radiance: img(k, radiance).expect("finite radiance").into_signed(),
        alpha: img(1, alpha).expect("finite alpha"),
        depth: img(1, depth).expect("finite depth"),
        normal: img(3, normal).expect("finite normals").into_signed(),
        contributions,
        features,
        offsets,
        checksum: geometry_checksum(gaussians),
        camera: camera.clone(),
    }
}

const GEOM: usize = 12;

/// Reverse pass for `grad` (on the raw composites). Fails if the splat
/// geometry changed since `output` was produced.
pub fn backward(
    output: &RenderOutput,
    gaussians: &[Gaussian2D],
    shader: &dyn Shader,
    grad: &RenderGrad,
) -> Result<SceneGrad> {
    if geometry_checksum(gaussians) != output.checksum {
        return Err(Error::StaleRender);
    }
    let (w, h) = (output.width, output.height);
    let k = output.channels;
    if shader.channels() != k {
        return Err(Error::Dimension(format!(
            "shader has {} channels, render has {k}",
            shader.channels()
        )));
    }
    let n = w * h;
    if grad.radiance.len() != n * k || grad.alpha.len() != n || grad.depth.len() != n || grad.normal.len() != 3 * n {
        return Err(Error::Dimension("loss gradient does not match render size".into()));
    }
    let nf = k + 4;
    let pl = shader.local_params();
    let pg = shader.global_params();
    let stride = GEOM + pl;
    let ng = gaussians.len();
    let chunks = h.div_ceil(CHUNK_ROWS);
    let camera = &output.camera;

    let partials: Vec<Vec<f64>> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut buf = vec![0.0; ng * stride + pg];
            let mut g_f = vec![0.0; nf];
            let mut c_after = vec![0.0; nf];
            let mut g_shade = vec![0.0; k];
            let (local_all, global) = buf.split_at_mut(ng * stride);
            for y in chunk * CHUNK_ROWS..((chunk + 1) * CHUNK_ROWS).min(h) {
                for x in 0..w {
                    let p = y * w + x;
                    let (a, b) = (output.offsets[p] as usize, output.offsets[p + 1] as usize);
                    if a == b {
                        continue;
                    }
                    g_f[..k].copy_from_slice(&grad.radiance[p * k..(p + 1) * k]);
                    g_f[k] = grad.depth[p];
                    g_f[k + 1..].copy_from_slice(&grad.normal[3 * p..3 * p + 3]);
                    let g_a = grad.alpha[p];
                    if g_a == 0.0 && g_f.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let ray = camera.pixel_ray(x, y);
                    c_after.iter_mut().for_each(|v| *v = 0.0);
                    let mut a_after = 0.0;
                    for ci in (a..b).rev() {
                        let c = &output.contributions[ci];
                        let f = &output.features[ci * nf..(ci + 1) * nf];
                        let gi = c.gaussian as usize;
                        let g = &gaussians[gi];
                        // compositing
                        let mut dl_da = (1.0 - a_after) * g_a;
                        for j in 0..nf {
                            dl_da += (f[j] - c_after[j]) * g_f[j];
                        }
                        dl_da *= c.trans;
                        let wgt = c.trans * c.alpha;
                        for j in 0..nf {
                            c_after[j] = c.alpha * f[j] + (1.0 - c.alpha) * c_after[j];
                        }
                        a_after = c.alpha + (1.0 - c.alpha) * a_after;

                        let slot = &mut local_all[gi * stride..(gi + 1) * stride];
                        let (geo, loc) = slot.split_at_mut(GEOM);
                        let normal = g.normal() * c.flip;
                        let input = ShadeInput {
                            point: ray.at(c.t),
                            normal,
                            ray_dir: ray.direction,
                        };
                        for j in 0..k {
                            g_shade[j] = wgt * g_f[j];
                        }
                        let mut sg = ShadeGrad {
                            local: loc,
                            global,
                            point: Vec3::zeros(),
                            normal: Vec3::zeros(),
                        };
                        if g_shade.iter().any(|v| *v != 0.0) {
                            shader.shade_backward(gi, &input, &g_shade, &mut sg);
                        }
                        let mut g_t = wgt * g_f[k] + sg.point.dot(&ray.direction);
                        let g_nf = Vec3::new(g_f[k + 1], g_f[k + 2], g_f[k + 3]) * wgt + sg.normal;
                        // α = o·G(u, v)
                        let o = g.opacity();
                        let gauss = influence(c.u, c.v);
                        geo[11] += dl_da * gauss * o * (1.0 - o);
                        let dl_dg = dl_da * o;
                        let g_u = -dl_dg * gauss * c.u;
                        let g_v = -dl_dg * gauss * c.v;
                        // intersection chain
                        let [su, sv] = g.scale();
                        let nrm = g.normal();
                        let denom = ray.direction.dot(&nrm);
                        let delta = ray.at(c.t) - g.center;
                        let g_delta = g.tangent_u * (g_u / su) + g.tangent_v * (g_v / sv);
                        let g_tu = delta * (g_u / su);
                        let g_tv = delta * (g_v / sv);
                        geo[9] += -g_u * c.u;
                        geo[10] += -g_v * c.v;
                        g_t += g_delta.dot(&ray.direction);
                        let g_mu = -g_delta + nrm * (g_t / denom);
                        let g_n = delta * (-g_t / denom) + g_nf * c.flip;
                        let g_tu = g_tu + g.tangent_v.cross(&g_n);
                        let g_tv = g_tv + g_n.cross(&g.tangent_u);
                        for a in 0..3 {
                            geo[a] += g_mu[a];
                            geo[3 + a] += g_tu[a];
                            geo[6 + a] += g_tv[a];
                        }
                    }
                }
            }
            buf
        })
        .collect();

    let mut total = vec![0.0; ng * stride + pg];
    for part in &partials {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    let mut out = SceneGrad {
        center: Vec::with_capacity(ng),
        tangent_u: Vec::with_capacity(ng),
        tangent_v: Vec::with_capacity(ng),
        log_scale: Vec::with_capacity(ng),
        opacity_logit: Vec::with_capacity(ng),
        local: Vec::with_capacity(ng * pl),
        global: total[ng * stride..].to_vec(),
    };
    for gi in 0..ng {
        let s = &total[gi * stride..(gi + 1) * stride];
        out.center.push(Vec3::new(s[0], s[1], s[2]));
        out.tangent_u.push(Vec3::new(s[3], s[4], s[5]));
        out.tangent_v.push(Vec3::new(s[6], s[7], s[8]));
        out.log_scale.push([s[9], s[10]]);
        out.opacity_logit.push(s[11]);
        out.local.extend_from_slice(&s[GEOM..]);
    }
    Ok(out)
}

//! Loss terms and their gradients. Every function returns the value and
//! the gradient with respect to its image inputs.

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::render::RenderOutput;
use crate::spectral::{SpectralImage, Vec3};

/// Pixels with less coverage are left out of the depth–normal term.
pub const GEOM_MIN_ALPHA: f64 = 0.5;

/// Mean absolute difference over masked pixels and all channels.
pub fn l1_masked(render: &[f64], target: &[f64], mask: &[f64], channels: usize) -> (f64, Vec<f64>) {
    let count = mask.iter().filter(|m| **m > 0.5).count() * channels;
    let mut grad = vec![0.0; render.len()];
    if count == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for (p, m) in mask.iter().enumerate() {
        if *m <= 0.5 {
            continue;
        }
        for c in 0..channels {
            let k = p * channels + c;
            let d = render[k] - target[k];
            sum += d.abs();
            grad[k] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    (sum * inv, grad)
}

/// `mean((alpha - mask)²)` over every pixel.
pub fn mask_loss(alpha: &[f64], mask: &[f64]) -> (f64, Vec<f64>) {
    let n = alpha.len() as f64;
    let mut sum = 0.0;
    let grad = alpha
        .iter()
        .zip(mask)
        .map(|(a, m)| {
            let d = a - m;
            sum += d * d;
            2.0 * d / n
        })
        .collect();
    (sum / n, grad)
}

/// Gradients of the depth–normal term on the raw composites.
#[derive(Debug, Clone)]
pub struct GeomGrad {
    pub alpha: Vec<f64>,
    pub depth: Vec<f64>,
    pub normal: Vec<f64>,
}

fn cross<T: Real>(a: &[T; 3], b: &[T; 3]) -> [T; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot<T: Real>(a: &[T; 3], b: &[T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Depth–normal consistency `1 − n · n_depth`, averaged over masked pixels
/// whose right and lower neighbours are also masked and covered. `n_depth`
/// comes from the unprojected depth map by forward differences.
pub fn depth_normal_loss(out: &RenderOutput, mask: &[f64]) -> (f64, GeomGrad) {
    let (w, h) = (out.width(), out.height());
    let cam = out.camera();
    let center = cam.center();
    let alpha = out.alpha.data();
    let depth = out.depth.data();
    let normal = out.normal.data();
    let mut g = GeomGrad {
        alpha: vec![0.0; w * h],
        depth: vec![0.0; w * h],
        normal: vec![0.0; 3 * w * h],
    };
    let ok = |p: usize| mask[p] > 0.5 && alpha[p] > GEOM_MIN_ALPHA;
    let mut valid = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let p = y * w + x;
            if ok(p) && ok(p + 1) && ok(p + w) {
                valid.push((x, y));
            }
        }
    }
    if valid.is_empty() {
        return (0.0, g);
    }
    let inv = 1.0 / valid.len() as f64;
    let mut sum = 0.0;
    type D = Dual<6>;
    for (x, y) in valid {
        let px = [y * w + x, y * w + x + 1, (y + 1) * w + x];
        let dirs = [
            cam.pixel_ray(x, y).direction,
            cam.pixel_ray(x + 1, y).direction,
            cam.pixel_ray(x, y + 1).direction,
        ];
        let t: Vec<f64> = px.iter().map(|&p| depth[p] / alpha[p]).collect();
        let pt = |j: usize| -> [D; 3] {
            let tj = D::var(t[j], j);
            let o: Vec3 = center;
            [tj * dirs[j].x + o.x, tj * dirs[j].y + o.y, tj * dirs[j].z + o.z]
        };
        let (p0, p1, p2) = (pt(0), pt(1), pt(2));
        let e1 = [p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]];
        let e2 = [p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]];
        let nd = cross(&e2, &e1);
        let nn = dot(&nd, &nd).sqrt();
        if nn.val() < 1e-12 {
            continue;
        }
        let n0 = &normal[3 * px[0]..3 * px[0] + 3];
        let nr = [D::var(n0[0], 3), D::var(n0[1], 4), D::var(n0[2], 5)];
        let nrn = dot(&nr, &nr).sqrt();
        if nrn.val() < 1e-12 {
            continue;
        }
        let l = -(dot(&nr, &nd) / (nrn * nn)) + 1.0;
        sum += l.val();
        for j in 0..3 {
            let gt = l.d[j] * inv;
            g.depth[px[j]] += gt / alpha[px[j]];
            g.alpha[px[j]] -= gt * t[j] / alpha[px[j]];
            g.normal[3 * px[0] + j] += l.d[3 + j] * inv;
        }
    }
    (sum * inv, g)
}

/// Edge-aware smoothness: mean over pixels and channels of
/// `exp(−k |∇guide|) |∇values|`, with forward differences and
/// `|∇f| = |∂x f| + |∂y f|`. The last row and column are excluded, as is
/// any pixel whose differences touch a pixel outside `mask`.
pub fn edge_aware(
    values: &[f64],
    channels: usize,
    guide: &[f64],
    width: usize,
    height: usize,
    k: f64,
    mask: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; values.len()];
    let inside = |p: usize| mask.map_or(true, |m| m[p] > 0.5);
    let mut cells = Vec::new();
    for y in 0..height.saturating_sub(1) {
        for x in 0..width.saturating_sub(1) {
            let p = y * width + x;
            if inside(p) && inside(p + 1) && inside(p + width) {
                cells.push(p);
            }
        }
    }
    if cells.is_empty() || channels == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / (cells.len() * channels) as f64;
    let mut sum = 0.0;
    let sgn = |d: f64| if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
    for p in cells {
        let (r, d) = (p + 1, p + width);
        let wgt = (-k * ((guide[r] - guide[p]).abs() + (guide[d] - guide[p]).abs())).exp();
        for c in 0..channels {
            let v = |q: usize| values[q * channels + c];
            let dx = v(r) - v(p);
            let dy = v(d) - v(p);
            sum += wgt * (dx.abs() + dy.abs());
            let (sx, sy) = (sgn(dx) * wgt * inv, sgn(dy) * wgt * inv);
            grad[r * channels + c] += sx;
            grad[d * channels + c] += sy;
            grad[p * channels + c] -= sx + sy;
        }
    }
    (sum * inv, grad)
}

/// RGB-albedo edge penalty guided by the NIR albedo map.
pub fn rgb_edge_loss(rho_rgb: &SpectralImage, rho_nir: &SpectralImage, k: f64) -> Result<f64> {
    if !rho_rgb.same_resolution(rho_nir) || rho_nir.channels() != 1 {
        return Err(Error::Dimension("RGB and NIR albedo maps must share resolution; NIR has one channel".into()));
    }
    Ok(edge_aware(
        rho_rgb.data(),
        rho_rgb.channels(),
        rho_nir.data(),
        rho_rgb.width(),
        rho_rgb.height(),
        k,
        None,
    )
    .0)
}

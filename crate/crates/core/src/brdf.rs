//! Four-channel Disney-style microfacet BRDF.
//!
//! Every channel shares the GGX specular lobe (roughness `σ`, metallic `m`)
//! and carries its own diffuse albedo `ρ^c`:
//!
//! ```text
//! f^c(i, o) = (1 - m) ρ^c / π + D(h; σ) F(o, h; m) G(i, o; σ) / (4 (n·i)(n·o))
//! ```
//!
//! with `α = σ²`, Smith–Schlick-GGX `G` (`k = α / 2`) and achromatic Schlick
//! Fresnel `F0 = 0.04 + 0.96 m`. The kernel only depends on the three
//! cosines `n·i`, `n·o` and `i·o`, which keeps reverse-mode chain rules for
//! geometry short.

use std::f64::consts::{FRAC_1_PI, PI};

use serde::{Deserialize, Serialize};

use crate::dual::{Dual, Real};
use crate::error::{Error, Result};
use crate::spectral::{orthonormal_basis, Channel, Vec3};

/// Roughness floor; keeps the GGX peak and its gradients bounded.
pub const ROUGHNESS_MIN: f64 = 0.04;

const DIELECTRIC_F0: f64 = 0.04;

#[inline]
fn ggx_d_t<T: Real>(cos_h: T, roughness: T) -> T {
    let cos_h = cos_h.clamp_to(0.0, 1.0);
    let alpha = roughness.clamp_to(ROUGHNESS_MIN, 1.0).powi(2);
    let a2 = alpha * alpha;
    let denom = cos_h * cos_h * (a2 - 1.0) + 1.0;
    a2 / (denom * denom * PI)
}

#[inline]
fn smith_g1_t<T: Real>(c: T, k: T) -> T {
    c / (c * (-k + 1.0) + k)
}

#[inline]
fn smith_g_t<T: Real>(cos_i: T, cos_o: T, roughness: T) -> T {
    if cos_i.val() <= 0.0 || cos_o.val() <= 0.0 {
        return T::cst(0.0);
    }
    let alpha = roughness.clamp_to(ROUGHNESS_MIN, 1.0).powi(2);
    let k = alpha * 0.5;
    smith_g1_t(cos_i.clamp_to(0.0, 1.0), k) * smith_g1_t(cos_o.clamp_to(0.0, 1.0), k)
}

#[inline]
fn fresnel_t<T: Real>(cos_oh: T, metallic: T) -> T {
    let m = metallic.clamp_to(0.0, 1.0);
    let f0 = m * (1.0 - DIELECTRIC_F0) + DIELECTRIC_F0;
    let x = -cos_oh.clamp_to(0.0, 1.0) + 1.0;
    f0 + (-f0 + 1.0) * x.powi(5)
}

/// GGX normal distribution `D(h; σ)` with the Disney remap `α = σ²`.
pub fn ggx_d(cos_h: f64, roughness: f64) -> f64 {
    ggx_d_t(cos_h, roughness)
}

/// Separable Smith–Schlick-GGX masking-shadowing; zero for back-facing sides.
pub fn smith_g(cos_i: f64, cos_o: f64, roughness: f64) -> f64 {
    smith_g_t(cos_i, cos_o, roughness)
}

/// Schlick Fresnel with achromatic `F0 = 0.04 + 0.96 m`.
pub fn fresnel(cos_oh: f64, metallic: f64) -> f64 {
    fresnel_t(cos_oh, metallic)
}

/// BRDF kernel from cosines: `cos_i = n·i`, `cos_o = n·o`, `cos_io = i·o`.
#[inline]
pub fn lobe<T: Real>(albedo: T, roughness: T, metallic: T, cos_i: T, cos_o: T, cos_io: T) -> T {
    if cos_i.val() <= 0.0 || cos_o.val() <= 0.0 {
        return T::cst(0.0);
    }
    let m = metallic.clamp_to(0.0, 1.0);
    let diffuse = (-m + 1.0) * albedo.clamp_to(0.0, 1.0) * FRAC_1_PI;
    let len2 = cos_io * 2.0 + 2.0;
    if len2.val() <= 1e-18 {
        return diffuse;
    }
    let len = len2.sqrt();
    let cos_h = (cos_i + cos_o) / len;
    let cos_oh = (cos_io + 1.0) / len;
    let d = ggx_d_t(cos_h, roughness);
    let f = fresnel_t(cos_oh, m);
    let g = smith_g_t(cos_i, cos_o, roughness);
    diffuse + d * f * g / (cos_i * cos_o * 4.0)
}

/// Value and partials of [`lobe`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LobeGrad {
    pub value: f64,
    pub d_albedo: f64,
    pub d_roughness: f64,
    pub d_metallic: f64,
    pub d_cos_i: f64,
    pub d_cos_o: f64,
    pub d_cos_io: f64,
}

pub fn lobe_grad(albedo: f64, roughness: f64, metallic: f64, cos_i: f64, cos_o: f64, cos_io: f64) -> LobeGrad {
    type D6 = Dual<6>;
    let r = lobe(
        D6::var(albedo, 0),
        D6::var(roughness, 1),
        D6::var(metallic, 2),
        D6::var(cos_i, 3),
        D6::var(cos_o, 4),
        D6::var(cos_io, 5),
    );
    LobeGrad {
        value: r.v,
        d_albedo: r.d[0],
        d_roughness: r.d[1],
        d_metallic: r.d[2],
        d_cos_i: r.d[3],
        d_cos_o: r.d[4],
        d_cos_io: r.d[5],
    }
}

/// Per-channel diffuse albedo with shared roughness and metallic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceBrdf {
    /// `[R, G, B, NIR]`
    pub albedo: [f64; 4],
    pub roughness: f64,
    pub metallic: f64,
}

impl SurfaceBrdf {
    pub fn new(albedo: [f64; 4], roughness: f64, metallic: f64) -> Result<Self> {
        let b = SurfaceBrdf {
            albedo,
            roughness,
            metallic,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.albedo.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::InvalidParameter(format!("albedo {:?} outside [0,1]", self.albedo)));
        }
        if !(ROUGHNESS_MIN..=1.0).contains(&self.roughness) {
            return Err(Error::InvalidParameter(format!(
                "roughness {} outside [{ROUGHNESS_MIN},1]",
                self.roughness
            )));
        }
        if !(0.0..=1.0).contains(&self.metallic) {
            return Err(Error::InvalidParameter(format!("metallic {} outside [0,1]", self.metallic)));
        }
        Ok(())
    }

    pub fn eval(&self, channel: Channel, i: &Vec3, o: &Vec3, n: &Vec3) -> f64 {
        eval_surface(self, channel, i, o, n)
    }
}

pub fn eval_surface(brdf: &SurfaceBrdf, channel: Channel, i: &Vec3, o: &Vec3, n: &Vec3) -> f64 {
    lobe(
        brdf.albedo[channel.index()],
        brdf.roughness,
        brdf.metallic,
        n.dot(i),
        n.dot(o),
        i.dot(o),
    )
}

/// One NIR basis material.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub albedo_nir: f64,
    pub roughness: f64,
    pub metallic: f64,
}

impl Basis {
    pub fn eval(&self, i: &Vec3, o: &Vec3, n: &Vec3) -> f64 {
        lobe(self.albedo_nir, self.roughness, self.metallic, n.dot(i), n.dot(o), i.dot(o))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub bases: Vec<Basis>,
}

impl BasisSet {
    pub fn new(bases: Vec<Basis>) -> Result<Self> {
        if bases.is_empty() {
            return Err(Error::InvalidParameter("basis set needs at least one basis".into()));
        }
        for b in &bases {
            SurfaceBrdf::new([b.albedo_nir; 4], b.roughness, b.metallic)?;
        }
        Ok(BasisSet { bases })
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }
}

/// Per-Gaussian weights on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureWeights(Vec<f64>);

impl MixtureWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return Err(Error::InvalidParameter(format!("weights {w:?} not nonnegative")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidParameter(format!("weights sum to {s}, not 1")));
        }
        Ok(MixtureWeights(w))
    }

    pub fn from_logits(logits: &[f64]) -> Self {
        MixtureWeights(param::softmax(logits))
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut w = vec![0.0; n];
        w[k] = 1.0;
        MixtureWeights(w)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn check_mixture(bases: &BasisSet, w: &MixtureWeights) -> Result<()> {
    if bases.len() != w.len() {
        return Err(Error::Dimension(format!(
            "{} mixture weights for {} bases",
            w.len(),
            bases.len()
        )));
    }
    Ok(())
}

/// `Σ_k w_k f_k(i, o)` over the NIR bases.
pub fn eval_mixture(bases: &BasisSet, w: &MixtureWeights, i: &Vec3, o: &Vec3, n: &Vec3) -> Result<f64> {
    check_mixture(bases, w)?;
    Ok(bases
        .bases
        .iter()
        .zip(w.as_slice())
        .map(|(b, &wk)| wk * b.eval(i, o, n))
        .sum())
}

/// Per-Gaussian material after collapsing the mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Collapsed {
    pub roughness: f64,
    pub metallic: f64,
    pub albedo_nir: f64,
}

/// Weighted averages of the basis parameters.
pub fn collapse(bases: &BasisSet, w: &MixtureWeights) -> Result<Collapsed> {
    check_mixture(bases, w)?;
    let mut c = Collapsed {
        roughness: 0.0,
        metallic: 0.0,
        albedo_nir: 0.0,
    };
    for (b, &wk) in bases.bases.iter().zip(w.as_slice()) {
        c.roughness += wk * b.roughness;
        c.metallic += wk * b.metallic;
        c.albedo_nir += wk * b.albedo_nir;
    }
    Ok(c)
}

/// Probability of drawing from the cosine lobe rather than the GGX lobe.
pub fn diffuse_probability(metallic: f64) -> f64 {
    if metallic >= 1.0 {
        0.0
    } else {
        ((1.0 - metallic) * 0.5).clamp(0.1, 0.9)
    }
}

/// Cosine-hemisphere density `cos θ / π`.
pub fn cosine_pdf(cos_i: f64) -> f64 {
    if cos_i > 0.0 {
        cos_i * FRAC_1_PI
    } else {
        0.0
    }
}

/// Density of reflected directions when `h ∝ D(h)(n·h)`.
pub fn ggx_reflection_pdf(o: &Vec3, n: &Vec3, roughness: f64, i: &Vec3) -> f64 {
    let hv = i + o;
    let len = hv.norm();
    if len < 1e-12 {
        return 0.0;
    }
    let h = hv / len;
    let cos_h = h.dot(n);
    let cos_oh = o.dot(&h);
    if cos_h <= 0.0 || cos_oh <= 0.0 {
        return 0.0;
    }
    ggx_d(cos_h, roughness) * cos_h / (4.0 * cos_oh)
}

/// Solid-angle density of [`sample_direction`] (horizon-clipped mass is lost,
/// not renormalized).
pub fn pdf_direction(o: &Vec3, n: &Vec3, roughness: f64, metallic: f64, i: &Vec3) -> f64 {
    let cos_i = n.dot(i);
    if cos_i <= 0.0 {
        return 0.0;
    }
    let pd = diffuse_probability(metallic);
    let mut pdf = pd * cosine_pdf(cos_i);
    if pd < 1.0 {
        pdf += (1.0 - pd) * ggx_reflection_pdf(o, n, roughness, i);
    }
    pdf
}

fn to_world(n: &Vec3, local: Vec3) -> Vec3 {
    let (t, b) = orthonormal_basis(n);
    t * local.x + b * local.y + n * local.z
}

/// Cosine-weighted hemisphere direction around `n`.
pub fn sample_cosine(n: &Vec3, u: [f64; 2]) -> Vec3 {
    let r = u[0].sqrt();
    let phi = 2.0 * PI * u[1];
    let z = (1.0 - u[0]).max(0.0).sqrt();
    to_world(n, Vec3::new(r * phi.cos(), r * phi.sin(), z))
}

/// GGX half vector with density `D(h)(n·h)`.
pub fn sample_ggx_half(n: &Vec3, roughness: f64, u: [f64; 2]) -> Vec3 {
    let alpha = roughness.clamp(ROUGHNESS_MIN, 1.0).powi(2);
    let a2 = alpha * alpha;
    let cos2 = ((1.0 - u[0]) / (1.0 + (a2 - 1.0) * u[0])).clamp(0.0, 1.0);
    let cos_t = cos2.sqrt();
    let sin_t = (1.0 - cos2).sqrt();
    let phi = 2.0 * PI * u[1];
    to_world(n, Vec3::new(sin_t * phi.cos(), sin_t * phi.sin(), cos_t))
}

/// Draws an incident direction from the cosine/GGX mixture. `u[0]` selects
/// the lobe and is then rescaled. Returns `None` when the reflected GGX
/// direction falls below the horizon; the caller counts that draw as a zero
/// contribution, which keeps the estimator unbiased under [`pdf_direction`].
pub fn sample_direction(o: &Vec3, n: &Vec3, roughness: f64, metallic: f64, u: [f64; 2]) -> Option<(Vec3, f64)> {
    let pd = diffuse_probability(metallic);
    let i = if u[0] < pd {
        let u0 = (u[0] / pd).min(1.0 - f64::EPSILON);
        sample_cosine(n, [u0, u[1]])
    } else {
        let u0 = ((u[0] - pd) / (1.0 - pd)).clamp(0.0, 1.0 - f64::EPSILON);
        let h = sample_ggx_half(n, roughness, [u0, u[1]]);
        let cos_oh = o.dot(&h);
        if cos_oh <= 0.0 {
            return None;
        }
        h * (2.0 * cos_oh) - o
    };
    if n.dot(&i) <= 0.0 {
        return None;
    }
    let i = i.normalize();
    let pdf = pdf_direction(o, n, roughness, metallic, &i);
    (pdf > 0.0).then_some((i, pdf))
}

/// Optimizer-facing reparameterizations onto the valid parameter ranges.
pub mod param {
    use super::ROUGHNESS_MIN;

    pub fn sigmoid(x: f64) -> f64 {
        if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        }
    }

    /// Inverse of [`sigmoid`], clamped away from the open ends.
    pub fn logit(p: f64) -> f64 {
        let p = p.clamp(1e-9, 1.0 - 1e-9);
        (p / (1.0 - p)).ln()
    }

    /// `dσ/dx` at the squashed value `s = sigmoid(x)`.
    pub fn sigmoid_slope(s: f64) -> f64 {
        s * (1.0 - s)
    }

    pub fn roughness_from_raw(x: f64) -> f64 {
        ROUGHNESS_MIN + (1.0 - ROUGHNESS_MIN) * sigmoid(x)
    }

    pub fn raw_from_roughness(r: f64) -> f64 {
        logit((r - ROUGHNESS_MIN) / (1.0 - ROUGHNESS_MIN))
    }

    pub fn roughness_slope(x: f64) -> f64 {
        (1.0 - ROUGHNESS_MIN) * sigmoid_slope(sigmoid(x))
    }

    pub fn softmax(logits: &[f64]) -> Vec<f64> {
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let s: f64 = e.iter().sum();
        e.into_iter().map(|v| v / s).collect()
    }

    /// Pulls `∂L/∂w` back through the softmax, accumulating into `out`.
    pub fn softmax_backward(w: &[f64], grad_w: &[f64], out: &mut [f64]) {
        let dot: f64 = w.iter().zip(grad_w).map(|(a, b)| a * b).sum();
        for ((o, &wk), &gk) in out.iter_mut().zip(w).zip(grad_w) {
            *o += wk * (gk - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{gauss_legendre, HemisphereRule};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dir_from_angles(theta: f64, phi: f64) -> Vec3 {
        Vec3::new(theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos())
    }

    fn random_hemi(rng: &mut impl Rng) -> Vec3 {
        let z: f64 = rng.gen_range(0.02..1.0);
        let phi: f64 = rng.gen_range(0.0..2.0 * PI);
        let s = (1.0 - z * z).sqrt();
        Vec3::new(s * phi.cos(), s * phi.sin(), z)
    }

    #[test]
    fn ggx_d_values() {
        assert!((ggx_d(1.0, 1.0) - FRAC_1_PI).abs() < 1e-12);
        // normal incidence with σ = 0.5: 1 / (π α²), α = 0.25
        assert!((ggx_d(1.0, 0.5) - 1.0 / (PI * 0.0625)).abs() < 1e-9);
        assert!((ggx_d(1.0, 0.5) - 5.0930).abs() < 1e-4);
        // grazing half vector: α² / π
        assert!((ggx_d(0.0, 0.5) - 0.0625 / PI).abs() < 1e-12);
    }

    #[test]
    fn ggx_d_is_normalized() {
        // ∫ D(h) (n·h) dω_h = 2π ∫_0^1 D(c) c dc
        let (x, w) = gauss_legendre(1000, 0.0, 1.0);
        for sigma in [0.1, 0.5, 1.0] {
            let total: f64 = x
                .iter()
                .zip(&w)
                .map(|(&c, &wc)| wc * ggx_d(c, sigma) * c)
                .sum::<f64>()
                * 2.0
                * PI;
            assert!((total - 1.0).abs() < 0.01, "σ={sigma}: {total}");
        }
    }

    #[test]
    fn smith_g_values() {
        for s in [0.04, 0.3, 1.0] {
            assert!((smith_g(1.0, 1.0, s) - 1.0).abs() < 1e-12);
        }
        assert!((smith_g(0.5, 0.5, 1.0) - 4.0 / 9.0).abs() < 1e-12);
        assert_eq!(smith_g(0.0, 0.5, 0.5), 0.0);
        assert_eq!(smith_g(0.5, -0.1, 0.5), 0.0);
    }

    #[test]
    fn smith_g_nonincreasing_in_roughness() {
        for &(ci, co) in &[(0.9, 0.2), (0.5, 0.5), (0.1, 0.7), (0.05, 0.05)] {
            let mut prev = f64::INFINITY;
            for k in 0..=200 {
                let s = ROUGHNESS_MIN + (1.0 - ROUGHNESS_MIN) * k as f64 / 200.0;
                let g = smith_g(ci, co, s);
                assert!(g <= prev + 1e-15);
                prev = g;
            }
        }
    }

    #[test]
    fn fresnel_values() {
        assert!((fresnel(1.0, 0.0) - 0.04).abs() < 1e-15);
        assert_eq!(fresnel(0.0, 0.0), 1.0);
        assert_eq!(fresnel(0.0, 0.7), 1.0);
        assert!((fresnel(1.0, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lambertian_and_metal_limits() {
        // m = 0 with the roughest lobe seen from the side: subtract the
        // specular part term by term to isolate the diffuse term.
        let n = Vec3::z();
        let i = dir_from_angles(0.3, 0.0);
        let o = dir_from_angles(0.8, 2.0);
        let white = SurfaceBrdf::new([1.0; 4], 1.0, 0.0).unwrap();
        let black = SurfaceBrdf::new([0.0; 4], 1.0, 0.0).unwrap();
        let diffuse = white.eval(Channel::R, &i, &o, &n) - black.eval(Channel::R, &i, &o, &n);
        assert!((diffuse - FRAC_1_PI).abs() < 1e-12);
        // metal: albedo has no effect
        let a = SurfaceBrdf::new([0.9; 4], 0.5, 1.0).unwrap();
        let b = SurfaceBrdf::new([0.1; 4], 0.5, 1.0).unwrap();
        assert_eq!(a.eval(Channel::G, &i, &o, &n), b.eval(Channel::G, &i, &o, &n));
        // back-facing
        assert_eq!(a.eval(Channel::G, &-i, &o, &n), 0.0);
        assert_eq!(a.eval(Channel::G, &i, &-o, &n), 0.0);
    }

    #[test]
    fn white_furnace_bound() {
        let n = Vec3::z();
        let o = dir_from_angles(PI / 4.0, 0.3);
        let rule = HemisphereRule::new(400, 800);
        for si in 0..5 {
            let sigma = ROUGHNESS_MIN + (1.0 - ROUGHNESS_MIN) * si as f64 / 4.0;
            for mi in 0..5 {
                let m = mi as f64 / 4.0;
                let b = SurfaceBrdf::new([1.0; 4], sigma, m).unwrap();
                let e = rule.integrate(&n, |i| b.eval(Channel::R, i, &o, &n) * i.z);
                assert!(e <= 1.05, "σ={sigma} m={m}: {e}");
                assert!(e > 0.0);
            }
        }
    }

    #[test]
    fn reciprocity_and_nonnegativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = Vec3::z();
        for _ in 0..2000 {
            let i = random_hemi(&mut rng);
            let o = random_hemi(&mut rng);
            let b = SurfaceBrdf::new(
                [rng.gen(), rng.gen(), rng.gen(), rng.gen()],
                rng.gen_range(ROUGHNESS_MIN..1.0),
                rng.gen(),
            )
            .unwrap();
            for c in Channel::ALL {
                let f1 = b.eval(c, &i, &o, &n);
                let f2 = b.eval(c, &o, &i, &n);
                assert!(f1 >= 0.0 && f1.is_finite());
                assert!((f1 - f2).abs() <= 1e-9 * f1.max(1.0), "{f1} vs {f2}");
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = 1e-4;
        let mut checked = 0;
        while checked < 100 {
            let ci: f64 = rng.gen_range(0.1..1.0);
            let co: f64 = rng.gen_range(0.1..1.0);
            // a valid i·o for the two elevations
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let (si, so) = ((1.0 - ci * ci).sqrt(), (1.0 - co * co).sqrt());
            let cio = ci * co + si * so * phi.cos();
            let rho: f64 = rng.gen_range(0.05..0.95);
            let sig: f64 = rng.gen_range(0.1..0.95);
            let m: f64 = rng.gen_range(0.05..0.95);
            let g = lobe_grad(rho, sig, m, ci, co, cio);
            let f = |r: f64, s: f64, mm: f64| lobe(r, s, mm, ci, co, cio);
            let fd = [
                (f(rho + h, sig, m) - f(rho - h, sig, m)) / (2.0 * h),
                (f(rho, sig + h, m) - f(rho, sig - h, m)) / (2.0 * h),
                (f(rho, sig, m + h) - f(rho, sig, m - h)) / (2.0 * h),
            ];
            let an = [g.d_albedo, g.d_roughness, g.d_metallic];
            for (a, d) in an.iter().zip(fd) {
                let rel = (a - d).abs() / d.abs().max(1e-3 * g.value.max(1e-3));
                assert!(rel <= 1e-3, "analytic {a} vs fd {d}");
            }
            assert!((g.value - f(rho, sig, m)).abs() <= 1e-12 * g.value.abs().max(1.0));
            checked += 1;
        }
    }

    #[test]
    fn mixture_is_linear() {
        let n = Vec3::z();
        let i = dir_from_angles(0.4, 0.1);
        let o = dir_from_angles(0.6, 2.5);
        let bases = BasisSet::new(vec![
            Basis { albedo_nir: 0.3, roughness: 0.4, metallic: 0.1 },
            Basis { albedo_nir: 0.7, roughness: 0.8, metallic: 0.0 },
        ])
        .unwrap();
        let f0 = bases.bases[0].eval(&i, &o, &n);
        let f1 = bases.bases[1].eval(&i, &o, &n);
        let one = BasisSet::new(vec![bases.bases[0]]).unwrap();
        let w1 = MixtureWeights::new(vec![1.0]).unwrap();
        assert_eq!(eval_mixture(&one, &w1, &i, &o, &n).unwrap(), f0);
        let half = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        let got = eval_mixture(&bases, &half, &i, &o, &n).unwrap();
        assert!((got - 0.5 * (f0 + f1)).abs() < 1e-15);
        assert!(eval_mixture(&bases, &w1, &i, &o, &n).is_err());
    }

    #[test]
    fn mixture_matches_explicit_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = Vec3::z();
        for _ in 0..200 {
            let bases = BasisSet::new(
                (0..4)
                    .map(|_| Basis {
                        albedo_nir: rng.gen(),
                        roughness: rng.gen_range(ROUGHNESS_MIN..1.0),
                        metallic: rng.gen(),
                    })
                    .collect(),
            )
            .unwrap();
            let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w = MixtureWeights::from_logits(&logits);
            let (i, o) = (random_hemi(&mut rng), random_hemi(&mut rng));
            let mut expected = 0.0;
            for k in 0..4 {
                let b = &bases.bases[k];
                let s = SurfaceBrdf::new([b.albedo_nir; 4], b.roughness, b.metallic).unwrap();
                expected += w.as_slice()[k] * s.eval(Channel::Nir, &i, &o, &n);
            }
            let got = eval_mixture(&bases, &w, &i, &o, &n).unwrap();
            assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn collapse_examples() {
        let bases = BasisSet::new(vec![
            Basis { albedo_nir: 0.2, roughness: 0.1, metallic: 0.0 },
            Basis { albedo_nir: 0.8, roughness: 0.5, metallic: 1.0 },
        ])
        .unwrap();
        let c = collapse(&bases, &MixtureWeights::new(vec![0.25, 0.75]).unwrap()).unwrap();
        assert!((c.roughness - 0.4).abs() < 1e-12);
        assert!((c.metallic - 0.75).abs() < 1e-12);
        assert!((c.albedo_nir - 0.65).abs() < 1e-12);
        let one = collapse(&bases, &MixtureWeights::one_hot(2, 1)).unwrap();
        assert_eq!(
            (one.roughness, one.metallic, one.albedo_nir),
            (0.5, 1.0, 0.8)
        );
    }

    #[test]
    fn collapse_stays_in_convex_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let nb = rng.gen_range(1..9);
            let bases = BasisSet::new(
                (0..nb)
                    .map(|_| Basis {
                        albedo_nir: rng.gen(),
                        roughness: rng.gen_range(ROUGHNESS_MIN..1.0),
                        metallic: rng.gen(),
                    })
                    .collect(),
            )
            .unwrap();
            let logits: Vec<f64> = (0..nb).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let c = collapse(&bases, &MixtureWeights::from_logits(&logits)).unwrap();
            let hull = |f: fn(&Basis) -> f64| {
                let v: Vec<f64> = bases.bases.iter().map(f).collect();
                (
                    v.iter().copied().fold(f64::INFINITY, f64::min),
                    v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                )
            };
            for (val, (lo, hi)) in [
                (c.roughness, hull(|b| b.roughness)),
                (c.metallic, hull(|b| b.metallic)),
                (c.albedo_nir, hull(|b| b.albedo_nir)),
            ] {
                assert!(val >= lo - 1e-12 && val <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn sampled_pdf_is_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = Vec3::new(0.1, 0.2, 0.9).normalize();
        let mut got = 0;
        for _ in 0..10_000 {
            let mut o = random_hemi(&mut rng);
            o = to_world(&n, o);
            let sigma = rng.gen_range(ROUGHNESS_MIN..1.0);
            let m = rng.gen();
            if let Some((i, pdf)) = sample_direction(&o, &n, sigma, m, [rng.gen(), rng.gen()]) {
                assert!(n.dot(&i) > 0.0);
                assert!((pdf - pdf_direction(&o, &n, sigma, m, &i)).abs() <= 1e-6 * pdf.max(1.0));
                got += 1;
            }
        }
        assert!(got > 8000);
    }

    #[test]
    fn near_mirror_metal_concentrates_at_mirror() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = Vec3::z();
        let o = dir_from_angles(PI / 4.0, 0.0);
        let mirror = n * (2.0 * n.dot(&o)) - o;
        let mut sum = 0.0;
        let mut cnt = 0;
        for _ in 0..10_000 {
            if let Some((i, _)) = sample_direction(&o, &n, ROUGHNESS_MIN, 1.0, [rng.gen(), rng.gen()]) {
                sum += i.dot(&mirror).clamp(-1.0, 1.0).acos();
                cnt += 1;
            }
        }
        let mean_deg = (sum / cnt as f64).to_degrees();
        assert!(mean_deg < 5.0, "{mean_deg}");
    }

    #[test]
    fn cosine_lobe_pdf() {
        assert!((cosine_pdf(0.3) - 0.3 / PI).abs() < 1e-15);
        assert_eq!(cosine_pdf(-0.1), 0.0);
        // combined density decomposes into the two lobes
        let n = Vec3::z();
        let o = dir_from_angles(0.5, 0.0);
        let i = dir_from_angles(0.9, 1.0);
        let pd = diffuse_probability(0.0);
        assert_eq!(pd, 0.5);
        let expect = pd * i.z / PI + (1.0 - pd) * ggx_reflection_pdf(&o, &n, 0.5, &i);
        assert!((pdf_direction(&o, &n, 0.5, 0.0, &i) - expect).abs() < 1e-15);
        assert_eq!(pdf_direction(&o, &n, 0.5, 0.0, &-i), 0.0);
    }

    /// χ² goodness of fit; critical value for p = 0.01 via Wilson–Hilferty.
    fn chi2_critical_01(dof: f64) -> f64 {
        let z = 2.326_347_874;
        let a = 2.0 / (9.0 * dof);
        dof * (1.0 - a + z * a.sqrt()).powi(3)
    }

    fn histogram_check(sample: impl Fn([f64; 2]) -> Option<Vec3>, pdf: impl Fn(&Vec3) -> f64, n: &Vec3) {
        let bins = 20;
        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let mut counts = vec![0usize; bins];
        for _ in 0..draws {
            if let Some(i) = sample([rng.gen(), rng.gen()]) {
                let c = n.dot(&i).clamp(0.0, 1.0 - 1e-12);
                counts[(c * bins as f64) as usize] += 1;
            }
        }
        // expected bin masses by quadrature of the density in (cos θ, φ)
        let (x, w) = gauss_legendre(64, 0.0, 1.0);
        let phis = 256;
        let (t, b) = orthonormal_basis(n);
        let mut chi2 = 0.0;
        let mut dof = 0.0;
        for k in 0..bins {
            let lo = k as f64 / bins as f64;
            let hi = (k + 1) as f64 / bins as f64;
            let mut mass = 0.0;
            for (&xc, &wc) in x.iter().zip(&w) {
                let c = lo + (hi - lo) * xc;
                let s = (1.0 - c * c).sqrt();
                let mut ring = 0.0;
                for j in 0..phis {
                    let phi = 2.0 * PI * (j as f64 + 0.5) / phis as f64;
                    let d = t * (s * phi.cos()) + b * (s * phi.sin()) + n * c;
                    ring += pdf(&d);
                }
                mass += wc * (hi - lo) * ring * 2.0 * PI / phis as f64;
            }
            let e = mass * draws as f64;
            if e > 5.0 {
                chi2 += (counts[k] as f64 - e).powi(2) / e;
                dof += 1.0;
            }
        }
        assert!(chi2 < chi2_critical_01(dof - 1.0), "χ²={chi2} dof={dof}");
    }

    #[test]
    fn cosine_lobe_histogram() {
        let n = Vec3::z();
        histogram_check(|u| Some(sample_cosine(&n, u)), |d| cosine_pdf(d.z), &n);
    }

    #[test]
    fn mixture_sampler_histogram_matches_pdf() {
        let n = Vec3::z();
        let o = dir_from_angles(0.6, 0.2);
        for (sigma, m) in [(0.5, 0.0), (0.3, 0.5), (0.8, 1.0)] {
            histogram_check(
                |u| sample_direction(&o, &n, sigma, m, u).map(|s| s.0),
                |d| pdf_direction(&o, &n, sigma, m, d),
                &n,
            );
        }
    }

    #[test]
    fn pdf_mass_equals_acceptance_rate() {
        // Draws below the horizon are rejected, so the pdf integrates to the
        // fraction of accepted samples rather than to one.
        let n = Vec3::z();
        let rule = HemisphereRule::new(300, 600);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for theta_o in [0.0, 0.4, 1.0] {
            let o = dir_from_angles(theta_o, 0.7);
            for sigma in [0.3, 0.75, 1.0] {
                for m in [0.0, 0.5, 1.0] {
                    let mass = rule.integrate(&n, |i| pdf_direction(&o, &n, sigma, m, i));
                    let draws = 100_000;
                    let accepted = (0..draws)
                        .filter(|_| sample_direction(&o, &n, sigma, m, [rng.gen(), rng.gen()]).is_some())
                        .count() as f64
                        / draws as f64;
                    assert!(mass <= 1.0001, "θo={theta_o} σ={sigma} m={m}: {mass}");
                    assert!((mass - accepted).abs() < 0.006, "θo={theta_o} σ={sigma} m={m}: {mass} vs {accepted}");
                }
            }
        }
    }

    #[test]
    fn pdf_is_continuous() {
        let n = Vec3::z();
        let o = dir_from_angles(0.5, 0.0);
        for (sigma, m) in [(0.2, 0.0), (0.6, 0.7)] {
            for k in 0..200 {
                let th = 0.01 + 1.5 * k as f64 / 200.0;
                let i = dir_from_angles(th, 0.9);
                let p = pdf_direction(&o, &n, sigma, m, &i);
                let mut prev = f64::INFINITY;
                for delta in [1e-3, 1e-5, 1e-7] {
                    let j = dir_from_angles(th + delta, 0.9);
                    let diff = (pdf_direction(&o, &n, sigma, m, &j) - p).abs();
                    assert!(diff <= prev + 1e-12);
                    prev = diff;
                }
                assert!(prev < 1e-3 * p.max(1.0));
            }
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let logits = [0.3, -1.2, 2.0, 0.1];
        let g = [0.5, -0.3, 0.2, 1.0];
        let loss = |l: &[f64]| -> f64 { param::softmax(l).iter().zip(&g).map(|(a, b)| a * b).sum() };
        let mut out = [0.0; 4];
        param::softmax_backward(&param::softmax(&logits), &g, &mut out);
        for k in 0..4 {
            let mut lp = logits;
            let mut lm = logits;
            lp[k] += 1e-6;
            lm[k] -= 1e-6;
            let fd = (loss(&lp) - loss(&lm)) / 2e-6;
            assert!((fd - out[k]).abs() < 1e-8);
        }
        assert!((param::roughness_from_raw(param::raw_from_roughness(0.37)) - 0.37).abs() < 1e-12);
    }
}

//! Per-splat shaders for the three stages.

use crate::brdf::{lobe, lobe_grad, param, Basis};
use crate::error::{Error, Result};
use crate::render::{ShadeGrad, ShadeInput, Shader};
use crate::scene::{sh_basis, sh_coeff_count};
use crate::spectral::{Camera, Vec3};

use super::FlashModel;

/// View-dependent RGB from spherical harmonics of the ray direction, offset
/// by 0.5 and clamped at zero.
pub struct ShShader {
    pub degree: usize,
    /// `3 · (degree + 1)²` coefficients per splat.
    pub coeffs: Vec<f64>,
}

impl ShShader {
    fn stride(&self) -> usize {
        3 * sh_coeff_count(self.degree)
    }
}

impl Shader for ShShader {
    fn channels(&self) -> usize {
        3
    }

    fn local_params(&self) -> usize {
        self.stride()
    }

    fn shade(&self, k: usize, input: &ShadeInput, out: &mut [f64]) {
        let basis = sh_basis(self.degree, &input.ray_dir);
        let c = &self.coeffs[k * self.stride()..(k + 1) * self.stride()];
        for ch in 0..3 {
            let mut v = 0.5;
            for (j, b) in basis.iter().take(sh_coeff_count(self.degree)).enumerate() {
                v += c[3 * j + ch] * b;
            }
            out[ch] = v.max(0.0);
        }
    }

    fn shade_backward(&self, k: usize, input: &ShadeInput, g_out: &[f64], grad: &mut ShadeGrad<'_>) {
        let basis = sh_basis(self.degree, &input.ray_dir);
        let nc = sh_coeff_count(self.degree);
        let c = &self.coeffs[k * self.stride()..(k + 1) * self.stride()];
        for ch in 0..3 {
            let mut v = 0.5;
            for j in 0..nc {
                v += c[3 * j + ch] * basis[j];
            }
            if v <= 0.0 {
                continue;
            }
            for j in 0..nc {
                grad.local[3 * j + ch] += g_out[ch] * basis[j];
            }
        }
    }
}

/// Flash-lit NIR radiance of a mixture of basis materials at one point.
///
/// Fails when the point coincides with the flash.
pub fn nir_shading(
    position: &Vec3,
    normal: &Vec3,
    bases: &[Basis],
    weights: &[f64],
    flash: &FlashModel,
    camera: &Camera,
) -> Result<f64> {
    if bases.len() != weights.len() {
        return Err(Error::Dimension(format!("{} weights for {} bases", weights.len(), bases.len())));
    }
    let lp = flash.position(camera);
    let a = lp - position;
    let r2 = a.norm_squared();
    if r2 < 1e-18 {
        return Err(Error::Degenerate("shading point at the flash position".into()));
    }
    let i = a / r2.sqrt();
    let o = (camera.center() - position).normalize();
    Ok(nir_value(&i, &o, normal, flash.intensity / r2, bases, weights))
}

fn nir_value(i: &Vec3, o: &Vec3, n: &Vec3, irradiance: f64, bases: &[Basis], w: &[f64]) -> f64 {
    let ci = n.dot(i);
    if ci <= 0.0 {
        return 0.0;
    }
    let (co, cio) = (n.dot(o), i.dot(o));
    let f: f64 = bases
        .iter()
        .zip(w)
        .map(|(b, wk)| wk * lobe(b.albedo_nir, b.roughness, b.metallic, ci, co, cio))
        .sum();
    irradiance * ci * f
}

/// Raw (unconstrained) basis parameters: albedo logit, roughness raw value,
/// metallic logit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawBasis(pub [f64; 3]);

impl RawBasis {
    pub fn from_basis(b: &Basis) -> Self {
        RawBasis([
            param::logit(b.albedo_nir),
            param::raw_from_roughness(b.roughness),
            param::logit(b.metallic),
        ])
    }

    pub fn basis(&self) -> Basis {
        Basis {
            albedo_nir: param::sigmoid(self.0[0]),
            roughness: param::roughness_from_raw(self.0[1]),
            metallic: param::sigmoid(self.0[2]),
        }
    }

    /// `∂(ρ, σ, m)/∂raw`, elementwise.
    pub fn slopes(&self) -> [f64; 3] {
        let b = self.basis();
        [
            param::sigmoid_slope(b.albedo_nir),
            param::roughness_slope(self.0[1]),
            param::sigmoid_slope(b.metallic),
        ]
    }
}

/// Stage-2 shader. Outputs `[R, σ̄, m̄, ρ̄_NIR]`: the flash radiance and the
/// mixture-averaged basis parameters. Locals are the mixture logits,
/// globals the raw basis parameters.
pub struct NirShader {
    pub flash_position: Vec3,
    pub intensity: f64,
    pub raw: Vec<RawBasis>,
    bases: Vec<Basis>,
    slopes: Vec<[f64; 3]>,
    /// Softmaxed weights, `raw.len()` per splat.
    weights: Vec<f64>,
}

impl NirShader {
    pub fn new(flash: &FlashModel, camera: &Camera, raw: Vec<RawBasis>, logits: &[Vec<f64>]) -> Self {
        let weights = logits.iter().flat_map(|l| param::softmax(l)).collect();
        NirShader {
            flash_position: flash.position(camera),
            intensity: flash.intensity,
            bases: raw.iter().map(RawBasis::basis).collect(),
            slopes: raw.iter().map(RawBasis::slopes).collect(),
            raw,
            weights,
        }
    }

    fn w(&self, k: usize) -> &[f64] {
        let n = self.raw.len();
        &self.weights[k * n..(k + 1) * n]
    }
}

impl Shader for NirShader {
    fn channels(&self) -> usize {
        4
    }

    fn local_params(&self) -> usize {
        self.raw.len()
    }

    fn global_params(&self) -> usize {
        3 * self.raw.len()
    }

    fn shade(&self, k: usize, input: &ShadeInput, out: &mut [f64]) {
        let w = self.w(k);
        let a = self.flash_position - input.point;
        let r2 = a.norm_squared();
        out[0] = if r2 > 1e-18 {
            nir_value(&(a / r2.sqrt()), &-input.ray_dir, &input.normal, self.intensity / r2, &self.bases, w)
        } else {
            0.0
        };
        out[1] = 0.0;
        out[2] = 0.0;
        out[3] = 0.0;
        for (b, wk) in self.bases.iter().zip(w) {
            out[1] += wk * b.roughness;
            out[2] += wk * b.metallic;
            out[3] += wk * b.albedo_nir;
        }
    }

    fn shade_backward(&self, k: usize, input: &ShadeInput, g_out: &[f64], grad: &mut ShadeGrad<'_>) {
        let nb = self.raw.len();
        let w = self.w(k);
        let mut g_w = vec![0.0; nb];
        let mut g_b = vec![[0.0; 3]; nb];
        for (j, b) in self.bases.iter().enumerate() {
            g_w[j] += g_out[1] * b.roughness + g_out[2] * b.metallic + g_out[3] * b.albedo_nir;
            g_b[j][0] += g_out[3] * w[j];
            g_b[j][1] += g_out[1] * w[j];
            g_b[j][2] += g_out[2] * w[j];
        }
        let n = input.normal;
        let o = -input.ray_dir;
        let a = self.flash_position - input.point;
        let r2 = a.norm_squared();
        if g_out[0] != 0.0 && r2 > 1e-18 {
            let r = r2.sqrt();
            let i = a / r;
            let ci = n.dot(&i);
            if ci > 0.0 {
                let (co, cio) = (n.dot(&o), i.dot(&o));
                let kk = self.intensity / r2;
                let g = g_out[0];
                let (mut f, mut f_ci, mut f_co, mut f_cio) = (0.0, 0.0, 0.0, 0.0);
                for (j, b) in self.bases.iter().enumerate() {
                    let lg = lobe_grad(b.albedo_nir, b.roughness, b.metallic, ci, co, cio);
                    f += w[j] * lg.value;
                    f_ci += w[j] * lg.d_cos_i;
                    f_co += w[j] * lg.d_cos_o;
                    f_cio += w[j] * lg.d_cos_io;
                    let s = g * kk * ci;
                    g_w[j] += s * lg.value;
                    g_b[j][0] += s * w[j] * lg.d_albedo;
                    g_b[j][1] += s * w[j] * lg.d_roughness;
                    g_b[j][2] += s * w[j] * lg.d_metallic;
                }
                let g_ci = g * kk * (f + ci * f_ci);
                let g_co = g * kk * ci * f_co;
                let g_cio = g * kk * ci * f_cio;
                grad.point += -(n - i * ci) * (g_ci / r) - (o - i * cio) * (g_cio / r) + i * (g * ci * f * 2.0 * self.intensity / (r2 * r));
                grad.normal += i * g_ci + o * g_co;
            }
        }
        param::softmax_backward(w, &g_w, grad.local);
        for j in 0..nb {
            for q in 0..3 {
                grad.global[3 * j + q] += g_b[j][q] * self.slopes[j][q];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> Camera {
        Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), -Vec3::y(), 8.0, 8.0, 8, 8).unwrap()
    }

    #[test]
    fn nir_shading_examples() {
        let camera = cam();
        // flash at the camera center; point 1 unit away along the axis
        let flash = FlashModel::new(Vec3::zeros(), 2.0).unwrap();
        let p = Vec3::new(0.0, 0.0, -2.0);
        let lambert = [Basis { albedo_nir: 1.0, roughness: 1.0, metallic: 0.0 }];
        // normal tilted 60° from the flash direction
        let n = Vec3::new(3f64.sqrt() / 2.0, 0.0, -0.5);
        let v = nir_shading(&p, &n, &lambert, &[1.0], &flash, &camera).unwrap();
        let diffuse_only = 2.0 / std::f64::consts::PI * 0.5;
        let spec = 2.0 * 0.5 * lobe(0.0, 1.0, 0.0, 0.5, 0.5, 1.0);
        assert!((v - diffuse_only - spec).abs() < 1e-12);
        assert!((diffuse_only - 0.31831).abs() < 1e-5);
        assert_eq!(nir_shading(&p, &-n, &lambert, &[1.0], &flash, &camera).unwrap(), 0.0);
        let far = Vec3::new(0.0, 0.0, -1.0);
        let m = Vec3::new(0.0, 0.0, -1.0);
        let r1 = nir_shading(&p, &m, &lambert, &[1.0], &flash, &camera).unwrap();
        let r2 = nir_shading(&far, &m, &lambert, &[1.0], &flash, &camera).unwrap();
        assert!((r2 / r1 - 0.25).abs() < 1e-12);
        assert!(nir_shading(&camera.center(), &m, &lambert, &[1.0], &flash, &camera).is_err());
    }

    #[test]
    fn nir_shader_gradients_match_differences() {
        let camera = cam();
        let flash = FlashModel::new(Vec3::new(0.2, -0.1, 0.0), 5.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = vec![
            RawBasis::from_basis(&Basis { albedo_nir: 0.7, roughness: 0.5, metallic: 0.2 }),
            RawBasis::from_basis(&Basis { albedo_nir: 0.3, roughness: 0.3, metallic: 0.6 }),
        ];
        let logits = vec![vec![0.3, -0.4]];
        let g_out = [1.0, 0.3, -0.2, 0.5];
        let eval = |raw: &[RawBasis], logits: &[f64], p: Vec3, n: Vec3, dir: Vec3| {
            let s = NirShader::new(&flash, &camera, raw.to_vec(), &[logits.to_vec()]);
            let mut out = [0.0; 4];
            s.shade(0, &ShadeInput { point: p, normal: n, ray_dir: dir }, &mut out);
            out.iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>()
        };
        for _ in 0..20 {
            let p = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.3..0.3));
            let dir = (p - camera.center()).normalize();
            let n = (-dir + Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0)).normalize();
            let s = NirShader::new(&flash, &camera, raw.clone(), &logits);
            let (mut local, mut global) = (vec![0.0; 2], vec![0.0; 6]);
            let mut g = ShadeGrad { local: &mut local, global: &mut global, point: Vec3::zeros(), normal: Vec3::zeros() };
            s.shade_backward(0, &ShadeInput { point: p, normal: n, ray_dir: dir }, &g_out, &mut g);
            let (gp, gn) = (g.point, g.normal);
            let h = 1e-6;
            let check = |fd: f64, an: f64| assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} vs {an}");
            for a in 0..3 {
                let mut e = Vec3::zeros();
                e[a] = h;
                check((eval(&raw, &logits[0], p + e, n, dir) - eval(&raw, &logits[0], p - e, n, dir)) / (2.0 * h), gp[a]);
                check((eval(&raw, &logits[0], p, n + e, dir) - eval(&raw, &logits[0], p, n - e, dir)) / (2.0 * h), gn[a]);
            }
            for j in 0..2 {
                let mut a = logits[0].clone();
                a[j] += h;
                let mut b = logits[0].clone();
                b[j] -= h;
                check((eval(&raw, &a, p, n, dir) - eval(&raw, &b, p, n, dir)) / (2.0 * h), local[j]);
                for q in 0..3 {
                    let mut ra = raw.clone();
                    ra[j].0[q] += h;
                    let mut rb = raw.clone();
                    rb[j].0[q] -= h;
                    check((eval(&ra, &logits[0], p, n, dir) - eval(&rb, &logits[0], p, n, dir)) / (2.0 * h), global[3 * j + q]);
                }
            }
        }
    }

    #[test]
    fn sh_shader_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let coeffs: Vec<f64> = (0..27).map(|_| rng.gen_range(-0.3..0.3)).collect();
        let s = ShShader { degree: 2, coeffs: coeffs.clone() };
        let input = ShadeInput { point: Vec3::zeros(), normal: Vec3::z(), ray_dir: Vec3::new(0.3, -0.2, 0.9).normalize() };
        let g_out = [1.0, -0.5, 0.25];
        let mut local = vec![0.0; 27];
        let mut global = vec![];
        let mut g = ShadeGrad { local: &mut local, global: &mut global, point: Vec3::zeros(), normal: Vec3::zeros() };
        s.shade_backward(0, &input, &g_out, &mut g);
        let f = |c: &[f64]| {
            let mut out = [0.0; 3];
            ShShader { degree: 2, coeffs: c.to_vec() }.shade(0, &input, &mut out);
            out.iter().zip(&g_out).map(|(a, b)| a * b).sum::<f64>()
        };
        for k in 0..27 {
            let mut a = coeffs.clone();
            a[k] += 1e-6;
            let mut b = coeffs.clone();
            b[k] -= 1e-6;
            assert!(((f(&a) - f(&b)) / 2e-6 - local[k]).abs() < 1e-8);
        }
    }
}

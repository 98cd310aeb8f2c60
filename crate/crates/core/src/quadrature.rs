//! Deterministic product quadrature over the hemisphere: Gauss–Legendre in
//! `cos θ` times the uniform (trapezoidal, periodic) rule in `φ`.

use crate::spectral::{orthonormal_basis, Vec3};

/// Gauss–Legendre nodes and weights on `[a, b]`.
pub fn gauss_legendre(n: usize, a: f64, b: f64) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let half = 0.5 * (b - a);
    let mid = 0.5 * (b + a);
    let m = n.div_ceil(2);
    for i in 0..m {
        // Tricomi initial guess, then Newton on P_n.
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        let wi = 2.0 / ((1.0 - z * z) * dp * dp);
        x[i] = mid - half * z;
        x[n - 1 - i] = mid + half * z;
        w[i] = half * wi;
        w[n - 1 - i] = half * wi;
    }
    (x, w)
}

/// Hemisphere rule around `normal` with `n_theta` Gauss–Legendre nodes in
/// `cos θ ∈ [0, 1]` and `n_phi` uniform azimuths. Yields `(direction, weight)`
/// with weights summing to `2π`.
pub struct HemisphereRule {
    cos_nodes: Vec<f64>,
    cos_weights: Vec<f64>,
    n_phi: usize,
}

impl HemisphereRule {
    pub fn new(n_theta: usize, n_phi: usize) -> Self {
        let (cos_nodes, cos_weights) = gauss_legendre(n_theta, 0.0, 1.0);
        Self {
            cos_nodes,
            cos_weights,
            n_phi,
        }
    }

    /// Rule with roughly `nodes` total points, `n_phi = 2 n_theta`.
    pub fn with_nodes(nodes: usize) -> Self {
        let n_theta = ((nodes as f64 / 2.0).sqrt().round() as usize).max(1);
        Self::new(n_theta, 2 * n_theta)
    }

    pub fn len(&self) -> usize {
        self.cos_nodes.len() * self.n_phi
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn integrate(&self, normal: &Vec3, mut f: impl FnMut(&Vec3) -> f64) -> f64 {
        let (t, b) = orthonormal_basis(normal);
        let dphi = 2.0 * std::f64::consts::PI / self.n_phi as f64;
        let trig: Vec<(f64, f64)> = (0..self.n_phi)
            .map(|k| ((k as f64 + 0.5) * dphi).sin_cos())
            .collect();
        let mut sum = 0.0;
        for (&c, &wc) in self.cos_nodes.iter().zip(&self.cos_weights) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            let mut row = 0.0;
            for &(sp, cp) in &trig {
                let d = t * (s * cp) + b * (s * sp) + normal * c;
                row += f(&d);
            }
            sum += wc * row * dphi;
        }
        sum
    }

    /// Vector-valued form of [`HemisphereRule::integrate`].
    pub fn integrate3(&self, normal: &Vec3, mut f: impl FnMut(&Vec3) -> [f64; 3]) -> [f64; 3] {
        let (t, b) = orthonormal_basis(normal);
        let dphi = 2.0 * std::f64::consts::PI / self.n_phi as f64;
        let mut sum = [0.0; 3];
        for (&c, &wc) in self.cos_nodes.iter().zip(&self.cos_weights) {
            let s = (1.0 - c * c).max(0.0).sqrt();
            let mut row = [0.0; 3];
            for k in 0..self.n_phi {
                let (sp, cp) = ((k as f64 + 0.5) * dphi).sin_cos();
                let v = f(&(t * (s * cp) + b * (s * sp) + normal * c));
                for j in 0..3 {
                    row[j] += v[j];
                }
            }
            for j in 0..3 {
                sum[j] += wc * row[j] * dphi;
            }
        }
        sum
    }
}

//! Shared value types: spectral channels, linear-radiance images, pinhole
//! cameras, rays and point lights.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Vec2 = Vector2<f64>;
pub type Mat3 = Matrix3<f64>;

/// One of the four reflectance channels. NIR is last so that
/// `channel.index()` addresses `[R, G, B, NIR]` arrays directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    R,
    G,
    B,
    Nir,
}

impl Channel {
    pub const ALL: [Channel; 4] = [Channel::R, Channel::G, Channel::B, Channel::Nir];
    pub const RGB: [Channel; 3] = [Channel::R, Channel::G, Channel::B];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Channel> {
        Channel::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Channel::R => "R",
            Channel::G => "G",
            Channel::B => "B",
            Channel::Nir => "NIR",
        }
    }

    pub fn parse(s: &str) -> Option<Channel> {
        match s.trim().to_ascii_uppercase().as_str() {
            "R" | "RED" | "0" => Some(Channel::R),
            "G" | "GREEN" | "1" => Some(Channel::G),
            "B" | "BLUE" | "2" => Some(Channel::B),
            "NIR" | "N" | "3" => Some(Channel::Nir),
            _ => None,
        }
    }
}

/// Row-major, channel-interleaved image of linear values.
///
/// Radiance images are nonnegative; difference and gradient buffers set
/// `signed` and may hold negative values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralImage {
    width: usize,
    height: usize,
    channels: usize,
    signed: bool,
    data: Vec<f64>,
}

impl SpectralImage {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            signed: false,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        let mut img = Self::new(width, height, channels);
        img.data.fill(value);
        img
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Dimension(format!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite pixel value {v}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            signed: data.iter().any(|&v| v < 0.0),
            data,
        })
    }

    /// Marks the image as a signed (difference or gradient) buffer.
    pub fn into_signed(mut self) -> Self {
        self.signed = true;
        self
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn is_signed(&self) -> bool {
        self.signed
    }
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &SpectralImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn same_resolution(&self, other: &SpectralImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    fn check_shape(&self, other: &SpectralImage) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    pub fn add(&self, other: &SpectralImage) -> Result<SpectralImage> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(SpectralImage {
            data,
            signed: self.signed || other.signed,
            ..*self
        })
    }

    pub fn sub(&self, other: &SpectralImage) -> Result<SpectralImage> {
        self.check_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(SpectralImage {
            data,
            signed: true,
            ..*self
        })
    }

    pub fn scale(&self, s: f64) -> SpectralImage {
        SpectralImage {
            data: self.data.iter().map(|v| v * s).collect(),
            signed: self.signed || s < 0.0,
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> SpectralImage {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        let signed = data.iter().any(|&v| v < 0.0);
        SpectralImage {
            data,
            signed,
            ..*self
        }
    }

    /// Copies one channel out as a single-channel image.
    pub fn channel(&self, c: usize) -> SpectralImage {
        let data = self.data.iter().skip(c).step_by(self.channels).copied().collect();
        SpectralImage {
            width: self.width,
            height: self.height,
            channels: 1,
            signed: self.signed,
            data,
        }
    }

    /// Rounds every value to the nearest `f32`, so the in-memory image equals
    /// what a PFM round trip produces.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Rigid world-to-camera transform plus pinhole intrinsics. Camera space
/// looks down +z with +x right and +y down, so pixel rows grow downward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        rotation: Mat3,
        translation: Vec3,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let cam = Camera {
            fx,
            fy,
            cx,
            cy,
            rotation,
            translation,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let r = &self.rotation;
        let orth = (r * r.transpose() - Mat3::identity()).abs().max();
        let det = r.determinant();
        if orth > 1e-6 || (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(format!(
                "rotation is not orthonormal with det +1 (|RRt-I|={orth:.3e}, det={det:.6})"
            )));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, with `up` pointing toward the top
    /// of the image.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Camera> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidCamera("up vector parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(
            fx,
            fy,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            rotation,
            translation,
            width,
            height,
        )
    }

    pub fn identity(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Camera {
        Camera {
            fx,
            fy,
            cx,
            cy,
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
            width,
            height,
        }
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn depth(&self, p: &Vec3) -> f64 {
        self.rotation.row(2).transpose().dot(p) + self.translation.z
    }

    /// Pinhole projection; `None` for points at or behind the camera plane.
    pub fn project(&self, p: &Vec3) -> Option<(Vec2, f64)> {
        let q = self.to_camera(p);
        if q.z <= 0.0 {
            return None;
        }
        Some((
            Vec2::new(self.fx * q.x / q.z + self.cx, self.fy * q.y / q.z + self.cy),
            q.z,
        ))
    }

    pub fn ray_through(&self, pixel: Vec2) -> Ray {
        let d = Vec3::new(
            (pixel.x - self.cx) / self.fx,
            (pixel.y - self.cy) / self.fy,
            1.0,
        );
        Ray::new(self.center(), self.rotation.transpose() * d)
    }

    /// Ray through the center of integer pixel `(x, y)`.
    pub fn pixel_ray(&self, x: usize, y: usize) -> Ray {
        self.ray_through(Vec2::new(x as f64, y as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Ray {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointLight {
    pub position: Vec3,
    pub intensity: f64,
}

impl PointLight {
    pub fn new(position: Vec3, intensity: f64) -> Result<PointLight> {
        if !(intensity > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "point light intensity must be positive, got {intensity}"
            )));
        }
        Ok(PointLight {
            position,
            intensity,
        })
    }
}

/// Orthonormal frame `(t, b)` completing unit normal `n` (Duff et al. 2017).
pub fn orthonormal_basis(n: &Vec3) -> (Vec3, Vec3) {
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    (
        Vec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x),
        Vec3::new(b, sign + n.y * n.y * a, -n.y),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn cam_identity(f: f64, c: f64) -> Camera {
        Camera::identity(f, f, c, c, 100, 100)
    }

    #[test]
    fn project_optical_axis() {
        let (px, z) = cam_identity(1.0, 0.0).project(&Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!((px.x, px.y, z), (0.0, 0.0, 1.0));
    }

    #[test]
    fn project_formula() {
        let (px, z) = cam_identity(100.0, 50.0).project(&Vec3::new(0.1, 0.0, 1.0)).unwrap();
        assert!(close(px.x, 60.0, 1e-12) && close(px.y, 50.0, 1e-12));
        assert_eq!(z, 1.0);
    }

    #[test]
    fn project_behind_camera() {
        assert!(cam_identity(1.0, 0.0).project(&Vec3::new(0.0, 0.0, -1.0)).is_none());
    }

    #[test]
    fn ray_through_principal_point() {
        let r = cam_identity(1.0, 0.0).ray_through(Vec2::new(0.0, 0.0));
        assert!((r.direction - Vec3::z()).norm() < 1e-15);
        let cam = Camera::identity(321.0, 123.0, 17.5, 40.25, 64, 64);
        let r = cam.ray_through(Vec2::new(cam.cx, cam.cy));
        assert!((r.direction - Vec3::z()).norm() < 1e-15);
    }

    #[test]
    fn look_at_rows_are_orthonormal() {
        let cam = Camera::look_at(
            Vec3::new(3.0, 1.0, -2.0),
            Vec3::zeros(),
            Vec3::y(),
            80.0,
            80.0,
            64,
            48,
        )
        .unwrap();
        cam.validate().unwrap();
        let (px, _) = cam.project(&Vec3::zeros()).unwrap();
        assert!(close(px.x, cam.cx, 1e-9) && close(px.y, cam.cy, 1e-9));
        // world up projects toward the top of the image
        let (up, _) = cam.project(&Vec3::new(0.0, 0.5, 0.0)).unwrap();
        assert!(up.y < cam.cy);
    }

    #[test]
    fn rejects_non_orthonormal_rotation() {
        let mut r = Mat3::identity();
        r[(0, 0)] = 1.01;
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, r, Vec3::zeros(), 4, 4).is_err());
        let flip = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, flip, Vec3::zeros(), 4, 4).is_err());
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0, Mat3::identity(), Vec3::zeros(), 4, 4).is_err());
    }

    #[test]
    fn image_arithmetic_preserves_shape() {
        let a = SpectralImage::filled(3, 2, 3, 1.5);
        let b = SpectralImage::filled(3, 2, 3, 0.5);
        let d = a.sub(&b).unwrap();
        assert!(d.is_signed() && d.same_shape(&a) && d.data().iter().all(|&v| v == 1.0));
        let s = a.add(&b).unwrap().scale(2.0);
        assert!(s.same_shape(&a) && s.is_finite() && s.data().iter().all(|&v| v == 4.0));
        assert!(a.add(&SpectralImage::new(3, 2, 1)).is_err());
        assert!(SpectralImage::from_data(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn onb_is_orthonormal() {
        for n in [Vec3::z(), -Vec3::z(), Vec3::new(0.3, -0.4, 0.5).normalize()] {
            let (t, b) = orthonormal_basis(&n);
            assert!(t.dot(&b).abs() < 1e-12 && t.dot(&n).abs() < 1e-12);
            assert!((t.norm() - 1.0).abs() < 1e-12 && (b.norm() - 1.0).abs() < 1e-12);
            assert!((t.cross(&b) - n).norm() < 1e-12);
        }
    }

    fn random_pose(ax: f64, ay: f64, az: f64, t: [f64; 3]) -> (Mat3, Vec3) {
        let r = nalgebra::Rotation3::from_euler_angles(ax, ay, az).into_inner();
        (r, Vec3::new(t[0], t[1], t[2]))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn project_ray_through_round_trip(
            ax in -3.1f64..3.1, ay in -1.5f64..1.5, az in -3.1f64..3.1,
            tx in -5.0f64..5.0, ty in -5.0f64..5.0, tz in -5.0f64..5.0,
            f in 20.0f64..400.0, px in 0.0f64..64.0, py in 0.0f64..48.0,
            depth in 0.1f64..50.0,
        ) {
            let (r, t) = random_pose(ax, ay, az, [tx, ty, tz]);
            let cam = Camera::new(f, f * 1.1, 31.5, 23.5, r, t, 64, 48).unwrap();
            let ray = cam.ray_through(Vec2::new(px, py));
            prop_assert!((ray.direction.norm() - 1.0).abs() < 1e-6);
            let (back, _) = cam.project(&ray.at(depth)).unwrap();
            prop_assert!((back - Vec2::new(px, py)).norm() < 1e-4);
        }
    }
}

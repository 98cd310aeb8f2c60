//! Capture sets on disk, PFM float images, JSON side files and PNG previews.
//!
//! Layout of a capture set directory:
//!
//! ```text
//! poses.json                 {"views": [{"rotation": [9, row-major], "translation": [3],
//!                                        "fx", "fy", "cx", "cy", "width", "height"}, ...]}
//! flash.json                 {"offset": [3, camera frame], "intensity": f}
//! view_0000/rgb.pfm          3 channels, linear HDR
//! view_0000/nir_on.pfm       1 channel
//! view_0000/nir_off.pfm      1 channel
//! view_0000/mask.pfm         1 channel, values in {0, 1}
//! ground_truth/              optional, written by the synthetic generator
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::envlight::EnvironmentMap;
use crate::error::{io_err, Error, Result};
use crate::pipeline::FlashModel;
use crate::spectral::{Camera, Mat3, SpectralImage, Vec3};

/// One captured viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureView {
    pub camera: Camera,
    pub rgb: SpectralImage,
    pub nir_on: SpectralImage,
    pub nir_off: SpectralImage,
    /// `max(nir_on - nir_off, 0)`
    pub nir_flash_only: SpectralImage,
    pub mask: SpectralImage,
    pub flash: FlashModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaptureSet {
    pub views: Vec<CaptureView>,
}

impl CaptureSet {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (k, v) in self.views.iter().enumerate() {
            problems.extend(view_problems(k, v));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidCaptureSet(problems))
        }
    }
}

fn view_problems(k: usize, v: &CaptureView) -> Vec<String> {
    let mut out = Vec::new();
    if let Err(e) = v.camera.validate() {
        out.push(format!("view {k}: {e}"));
    }
    let (w, h) = (v.camera.width, v.camera.height);
    for (name, img, ch) in [
        ("rgb", &v.rgb, 3),
        ("nir_on", &v.nir_on, 1),
        ("nir_off", &v.nir_off, 1),
        ("nir_flash_only", &v.nir_flash_only, 1),
        ("mask", &v.mask, 1),
    ] {
        if img.width() != w || img.height() != h || img.channels() != ch {
            out.push(format!(
                "view {k}: {name} is {}x{}x{}, expected {w}x{h}x{ch}",
                img.width(),
                img.height(),
                img.channels()
            ));
        }
    }
    if v.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
        out.push(format!("view {k}: mask not binary"));
    }
    if !(v.flash.intensity > 0.0) {
        out.push(format!("view {k}: flash intensity must be positive"));
    }
    out
}

/// `max(on - off, 0)` per pixel.
pub fn flash_subtract(nir_on: &SpectralImage, nir_off: &SpectralImage) -> Result<SpectralImage> {
    if !nir_on.same_shape(nir_off) {
        return Err(Error::Dimension(format!(
            "flash-on {}x{} vs flash-off {}x{}",
            nir_on.width(),
            nir_on.height(),
            nir_off.width(),
            nir_off.height()
        )));
    }
    let data = nir_on
        .data()
        .iter()
        .zip(nir_off.data())
        .map(|(a, b)| (a - b).max(0.0))
        .collect();
    SpectralImage::from_data(nir_on.width(), nir_on.height(), nir_on.channels(), data)
}

/// Zeroes pixels outside the (single-channel) mask.
pub fn apply_mask(image: &SpectralImage, mask: &SpectralImage) -> Result<SpectralImage> {
    if !image.same_resolution(mask) || mask.channels() != 1 {
        return Err(Error::Dimension("mask does not match image".into()));
    }
    let c = image.channels();
    let mut out = image.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        *v *= mask.data()[k / c];
    }
    Ok(out)
}

fn pfm_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Pfm {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes a little-endian PFM (1 or 3 channels), bottom row first.
pub fn save_pfm(path: &Path, image: &SpectralImage) -> Result<()> {
    let bytes = encode_pfm(image, true).map_err(|r| pfm_err(path, r))?;
    fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

/// Encodes a PFM in either byte order.
pub fn encode_pfm(image: &SpectralImage, little_endian: bool) -> std::result::Result<Vec<u8>, String> {
    let tag = match image.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(format!("PFM holds 1 or 3 channels, image has {c}")),
    };
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let scale = if little_endian { "-1.0" } else { "1.0" };
    let mut out = format!("{tag}\n{w} {h}\n{scale}\n").into_bytes();
    out.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for v in &image.data()[y * w * c..(y + 1) * w * c] {
            let f = *v as f32;
            out.write_all(&if little_endian { f.to_le_bytes() } else { f.to_be_bytes() })
                .unwrap();
        }
    }
    Ok(out)
}

pub fn load_pfm(path: &Path) -> Result<SpectralImage> {
    let bytes = fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    decode_pfm(&bytes).map_err(|r| pfm_err(path, r))
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<SpectralImage, String> {
    // three whitespace-separated header tokens after the tag, then exactly
    // one whitespace byte before the payload
    let mut pos = 0;
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| "non-ASCII header")?);
    }
    if pos >= bytes.len() {
        return Err("missing payload".into());
    }
    pos += 1;
    let channels = match tokens[0] {
        "Pf" => 1,
        "PF" => 3,
        t => return Err(format!("unknown tag {t:?}")),
    };
    let w: usize = tokens[1].parse().map_err(|_| format!("bad width {:?}", tokens[1]))?;
    let h: usize = tokens[2].parse().map_err(|_| format!("bad height {:?}", tokens[2]))?;
    let scale: f64 = tokens[3].parse().map_err(|_| format!("bad scale {:?}", tokens[3]))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format!("bad scale {scale}"));
    }
    let little = scale < 0.0;
    let n = w * h * channels;
    let payload = &bytes[pos..];
    if payload.len() < n * 4 {
        return Err(format!("payload has {} bytes, expected {}", payload.len(), n * 4));
    }
    let mut data = vec![0.0; n];
    let row = w * channels;
    for (k, chunk) in payload[..n * 4].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (file_row, col) = (k / row, k % row);
        data[(h - 1 - file_row) * row + col] = v as f64;
    }
    SpectralImage::from_data(w, h, channels, data).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PoseRecord {
    rotation: [f64; 9],
    translation: [f64; 3],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct PosesFile {
    views: Vec<PoseRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FlashFile {
    offset: [f64; 3],
    intensity: f64,
}

impl From<&Camera> for PoseRecord {
    fn from(c: &Camera) -> Self {
        let r = &c.rotation;
        PoseRecord {
            rotation: [
                r[(0, 0)], r[(0, 1)], r[(0, 2)],
                r[(1, 0)], r[(1, 1)], r[(1, 2)],
                r[(2, 0)], r[(2, 1)], r[(2, 2)],
            ],
            translation: [c.translation.x, c.translation.y, c.translation.z],
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
        }
    }
}

impl PoseRecord {
    fn camera(&self) -> Result<Camera> {
        Camera::new(
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            Mat3::from_row_slice(&self.rotation),
            Vec3::from_column_slice(&self.translation),
            self.width,
            self.height,
        )
    }
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(io_err(format!("writing {}", path.display())))
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(format!("creating {}", path.display())))
}

pub fn view_dir(root: &Path, k: usize) -> PathBuf {
    root.join(format!("view_{k:04}"))
}

/// Writes the capture-set layout. All views must share one flash model.
pub fn save_capture_set(root: &Path, set: &CaptureSet) -> Result<()> {
    set.validate()?;
    let flash = set
        .views
        .first()
        .map(|v| v.flash)
        .ok_or_else(|| Error::Missing("capture set has no views".into()))?;
    if set.views.iter().any(|v| v.flash != flash) {
        return Err(Error::InvalidParameter("views use different flash models".into()));
    }
    ensure_dir(root)?;
    let poses = PosesFile {
        views: set.views.iter().map(|v| PoseRecord::from(&v.camera)).collect(),
    };
    save_json(&root.join("poses.json"), &poses)?;
    save_json(
        &root.join("flash.json"),
        &FlashFile {
            offset: [flash.offset.x, flash.offset.y, flash.offset.z],
            intensity: flash.intensity,
        },
    )?;
    for (k, v) in set.views.iter().enumerate() {
        let dir = view_dir(root, k);
        ensure_dir(&dir)?;
        save_pfm(&dir.join("rgb.pfm"), &v.rgb)?;
        save_pfm(&dir.join("nir_on.pfm"), &v.nir_on)?;
        save_pfm(&dir.join("nir_off.pfm"), &v.nir_off)?;
        save_pfm(&dir.join("mask.pfm"), &v.mask)?;
    }
    Ok(())
}

/// Loads and validates a capture set; problems are reported per view.
pub fn load_capture_set(root: &Path) -> Result<CaptureSet> {
    let poses: PosesFile = load_json(&root.join("poses.json"))?;
    let flash: FlashFile = load_json(&root.join("flash.json"))?;
    let flash = FlashModel::new(Vec3::from_column_slice(&flash.offset), flash.intensity)?;
    let mut problems = Vec::new();
    let mut views = Vec::new();
    for (k, pose) in poses.views.iter().enumerate() {
        let dir = view_dir(root, k);
        let camera = match pose.camera() {
            Ok(c) => Some(c),
            Err(e) => {
                problems.push(format!("view {k}: {e}"));
                None
            }
        };
        let mut load = |name: &str| {
            let p = dir.join(name);
            if !p.exists() {
                problems.push(format!("view {k}: missing {name}"));
                return None;
            }
            match load_pfm(&p) {
                Ok(img) => Some(img),
                Err(e) => {
                    problems.push(format!("view {k}: {e}"));
                    None
                }
            }
        };
        let rgb = load("rgb.pfm");
        let nir_on = load("nir_on.pfm");
        let nir_off = load("nir_off.pfm");
        let mask = load("mask.pfm");
        let (Some(camera), Some(rgb), Some(nir_on), Some(nir_off), Some(mask)) = (camera, rgb, nir_on, nir_off, mask)
        else {
            continue;
        };
        let nir_flash_only = match flash_subtract(&nir_on, &nir_off) {
            Ok(f) => f,
            Err(e) => {
                problems.push(format!("view {k}: {e}"));
                continue;
            }
        };
        let view = CaptureView {
            camera,
            rgb,
            nir_on,
            nir_off,
            nir_flash_only,
            mask,
            flash,
        };
        problems.extend(view_problems(k, &view));
        views.push(view);
    }
    if poses.views.is_empty() {
        problems.push("poses.json lists no views".into());
    }
    if !problems.is_empty() {
        return Err(Error::InvalidCaptureSet(problems));
    }
    Ok(CaptureSet { views })
}

/// Per-view reference maps written by the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthView {
    pub albedo_rgb: SpectralImage,
    pub albedo_nir: SpectralImage,
    pub roughness: SpectralImage,
    pub metallic: SpectralImage,
    /// Unit world-space normals, zero outside the mask.
    pub normal: SpectralImage,
    pub mask: SpectralImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub views: Vec<GroundTruthView>,
    pub env: EnvironmentMap,
}

pub fn env_to_image(env: &EnvironmentMap) -> SpectralImage {
    let data = env.radiance().iter().flatten().copied().collect();
    SpectralImage::from_data(env.width(), env.height(), 3, data).expect("finite radiance")
}

pub fn env_from_image(img: &SpectralImage) -> Result<EnvironmentMap> {
    if img.channels() != 3 {
        return Err(Error::Dimension("environment image must have 3 channels".into()));
    }
    let rad = img.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    EnvironmentMap::new(img.height(), img.width(), rad)
}

pub fn save_env(path: &Path, env: &EnvironmentMap) -> Result<()> {
    save_pfm(path, &env_to_image(env))
}

pub fn load_env(path: &Path) -> Result<EnvironmentMap> {
    env_from_image(&load_pfm(path)?)
}

pub fn save_ground_truth(dir: &Path, gt: &GroundTruth) -> Result<()> {
    ensure_dir(dir)?;
    save_env(&dir.join("env.pfm"), &gt.env)?;
    for (k, v) in gt.views.iter().enumerate() {
        let d = view_dir(dir, k);
        ensure_dir(&d)?;
        save_pfm(&d.join("albedo_rgb.pfm"), &v.albedo_rgb)?;
        save_pfm(&d.join("albedo_nir.pfm"), &v.albedo_nir)?;
        save_pfm(&d.join("roughness.pfm"), &v.roughness)?;
        save_pfm(&d.join("metallic.pfm"), &v.metallic)?;
        save_pfm(&d.join("normal.pfm"), &v.normal)?;
        save_pfm(&d.join("mask.pfm"), &v.mask)?;
    }
    Ok(())
}

pub fn load_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let env = load_env(&dir.join("env.pfm"))?;
    let mut views = Vec::new();
    for k in 0.. {
        let d = view_dir(dir, k);
        if !d.is_dir() {
            break;
        }
        views.push(GroundTruthView {
            albedo_rgb: load_pfm(&d.join("albedo_rgb.pfm"))?,
            albedo_nir: load_pfm(&d.join("albedo_nir.pfm"))?,
            roughness: load_pfm(&d.join("roughness.pfm"))?,
            metallic: load_pfm(&d.join("metallic.pfm"))?,
            normal: load_pfm(&d.join("normal.pfm"))?,
            mask: load_pfm(&d.join("mask.pfm"))?,
        });
    }
    Ok(GroundTruth { views, env })
}

/// 8-bit preview: `clamp(exposure · v)^(1/2.2)`. Lossy by design.
pub fn save_png_preview(path: &Path, image: &SpectralImage, exposure: f64) -> Result<()> {
    let (w, h) = (image.width() as u32, image.height() as u32);
    let to8 = |v: f64| ((exposure * v).clamp(0.0, 1.0).powf(1.0 / 2.2) * 255.0).round() as u8;
    match image.channels() {
        1 => {
            let buf = image.data().iter().map(|&v| to8(v)).collect();
            image::GrayImage::from_raw(w, h, buf).expect("size").save(path)?;
        }
        3 => {
            let buf = image.data().iter().map(|&v| to8(v)).collect();
            image::RgbImage::from_raw(w, h, buf).expect("size").save(path)?;
        }
        c => return Err(Error::Dimension(format!("preview needs 1 or 3 channels, got {c}"))),
    }
    Ok(())
}

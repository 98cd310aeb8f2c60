//! Reconstructs a small oracle capture, then relights it under a held-out
//! environment and under point lights.
//! `cargo run --release --example relight [out_dir]`

use std::path::PathBuf;

use rgbnir::io::save_png_preview;
use rgbnir::metrics::psnr;
use rgbnir::oracle::{default_ring, generate_capture_set, preset_env, render_reference, two_material_sphere, Quality};
use rgbnir::pipeline::{relight, run, LossLog, OptimConfig, RelightConfig, StageSet};
use rgbnir::spectral::{Channel, PointLight, Vec3};

fn main() -> rgbnir::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "relight_out".into()));
    std::fs::create_dir_all(&out).map_err(|source| rgbnir::Error::Io { context: "output directory".into(), source })?;
    let (captures, gt) = generate_capture_set(
        &two_material_sphere(preset_env("studio", 16, 32)?),
        &default_ring(12, 48),
        Quality::default(),
    )?;
    let mut config = OptimConfig::default();
    config.stage1.steps = 150;
    config.stage2.steps = 150;
    config.stage3.steps = 100;
    config.stage3.optimize_env = false;
    let scene = run(&captures, &config, StageSet::parse("1,2,3")?, None, Some(gt.env.clone()), &mut LossLog::default())?;

    let dusk = preset_env("dusk", 16, 32)?;
    let truth = two_material_sphere(dusk.clone());
    let mut ring = default_ring(12, 48);
    ring.phase = 0.5 * std::f64::consts::TAU / 12.0;
    let cam = &ring.cameras()?[0];
    let cfg = RelightConfig { background: false, ..Default::default() };
    let relit = relight(&scene, Some(&dusk), &[], cam, &cfg)?;
    let reference = render_reference(&truth, cam, &Channel::RGB, false, Quality::default());
    let mask = rgbnir::oracle::reference_attributes(&truth, cam).mask;
    let peak = (0..mask.pixel_count())
        .filter(|&p| mask.data()[p] > 0.5)
        .flat_map(|p| reference.pixel(p % cam.width, p / cam.width).to_vec())
        .fold(0.0, f64::max);
    println!("held-out view under dusk: {:.2} dB", psnr(&relit, &reference, peak, Some(&mask))?);
    save_png_preview(&out.join("dusk_relit.png"), &relit, 1.0)?;
    save_png_preview(&out.join("dusk_reference.png"), &reference, 1.0)?;

    let lights = [PointLight::new(Vec3::new(2.0, 2.0, 2.0), 20.0)?, PointLight::new(Vec3::new(-3.0, 0.5, 1.0), 8.0)?];
    let points = relight(&scene, None, &lights, cam, &cfg)?;
    save_png_preview(&out.join("point_lights.png"), &points, 1.0)?;
    println!("images written to {}", out.display());
    Ok(())
}

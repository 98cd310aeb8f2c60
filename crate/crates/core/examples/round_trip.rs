//! Synthesizes the two-material sphere, reconstructs it, and reports
//! attribute metrics. `cargo run --release --example round_trip [env]`

use std::time::Instant;

use rgbnir::oracle::{default_ring, generate_capture_set, preset_env, two_material_sphere, Quality};
use rgbnir::pipeline::{evaluate, stage1, stage2, stage3, transfer_cross_spectral, LossLog, OptimConfig};

fn main() -> rgbnir::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RGBNIR_LOG", "info")).init();
    let env_name = std::env::args().nth(1).unwrap_or_else(|| "studio".into());
    let t0 = Instant::now();
    let env = preset_env(&env_name, 16, 32)?;
    let scene = two_material_sphere(env.clone());
    let (captures, gt) = generate_capture_set(&scene, &default_ring(20, 64), Quality::default())?;
    println!("synthesized {} views in {:.1}s", captures.len(), t0.elapsed().as_secs_f64());

    let config = OptimConfig::default();
    let mut log = LossLog::default();
    let t = Instant::now();
    let s1 = stage1(&captures, &config, &mut log)?;
    let last = log.rows.last().unwrap();
    println!("stage 1: {:.1}s, psnr {:.2}", t.elapsed().as_secs_f64(), last.psnr);
    let t = Instant::now();
    let s2 = stage2(&s1, &captures, &config, &mut log)?;
    let last = log.rows.last().unwrap();
    println!("stage 2: {:.1}s, nir psnr {:.2}", t.elapsed().as_secs_f64(), last.psnr);
    println!("bases: {:?}", s2.bases.bases);
    let s2t = transfer_cross_spectral(&s2)?;

    let mut frozen = s2t.clone();
    frozen.env = Some(env);
    let mut cfg = config;
    cfg.stage3.optimize_env = false;
    let t = Instant::now();
    let s3 = stage3(&frozen, &captures, &cfg, &mut log)?;
    println!("stage 3 (env frozen): {:.1}s", t.elapsed().as_secs_f64());
    println!("{:#?}", evaluate(&s3, &captures, &gt)?);

    let t = Instant::now();
    let s3j = stage3(&s2t, &captures, &config, &mut log)?;
    println!("stage 3 (env joint): {:.1}s", t.elapsed().as_secs_f64());
    println!("{:#?}", evaluate(&s3j, &captures, &gt)?);
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}

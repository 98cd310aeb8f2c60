//! Rasterizes a splat sphere, writes preview images and checks one
//! reverse-pass gradient against a finite difference.
//! `cargo run --release --example splat_render [out_dir]`

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbnir::io::save_png_preview;
use rgbnir::render::{backward, rasterize, RenderGrad, ValueShader};
use rgbnir::scene::seed_sphere;
use rgbnir::spectral::{Camera, Vec3};

fn main() -> rgbnir::Result<()> {
    let out_dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "splat_render_out".into()));
    std::fs::create_dir_all(&out_dir).map_err(|source| rgbnir::Error::Io { context: "output directory".into(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let splats = seed_sphere(Vec3::zeros(), 1.0, 3000, 1.5, 0.9, &mut rng);
    let cam = Camera::look_at(Vec3::new(0.0, 1.0, 3.5), Vec3::zeros(), Vec3::y(), 120.0, 120.0, 128, 128)?;
    // color each splat by its height
    let values: Vec<f64> = splats
        .iter()
        .flat_map(|g| {
            let t = 0.5 * (g.center.y + 1.0);
            [t, 0.3, 1.0 - t]
        })
        .collect();
    let shader = ValueShader { channels: 3, values };
    let out = rasterize(&splats, &cam, &shader);
    println!("{} contributions over {} pixels", out.contributor_count(), 128 * 128);
    save_png_preview(&out_dir.join("radiance.png"), &out.radiance, 1.0)?;
    save_png_preview(&out_dir.join("alpha.png"), &out.alpha, 1.0)?;
    save_png_preview(&out_dir.join("normal.png"), &out.normal_map().map(|v| 0.5 * (v + 1.0)), 1.0)?;

    // d(sum of red)/d(center.x) of one visible splat
    let k = (0..splats.len()).find(|&k| cam.depth(&splats[k].center) < 3.0).expect("a front splat");
    let mut grad = RenderGrad::zeros(&out);
    for p in 0..128 * 128 {
        grad.radiance[3 * p] = 1.0;
    }
    let g = backward(&out, &splats, &shader, &grad)?;
    let red = |dx: f64| {
        let mut s = splats.clone();
        s[k].center.x += dx;
        let o = rasterize(&s, &cam, &shader);
        o.radiance.data().iter().step_by(3).sum::<f64>()
    };
    let h = 1e-5;
    println!("splat {k}: analytic {:.6}, finite difference {:.6}", g.center[k].x, (red(h) - red(-h)) / (2.0 * h));
    println!("previews written to {}", out_dir.display());
    Ok(())
}

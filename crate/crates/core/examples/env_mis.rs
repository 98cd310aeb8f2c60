//! Compares the MIS estimator with hemisphere quadrature and with each
//! sampling strategy on its own. `cargo run --release --example env_mis`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rgbnir::brdf::{lobe, SurfaceBrdf};
use rgbnir::envlight::{mis_pixel, MisConfig, ShadingPoint};
use rgbnir::oracle::preset_env;
use rgbnir::quadrature::HemisphereRule;
use rgbnir::spectral::Vec3;

fn main() -> rgbnir::Result<()> {
    let env = preset_env("studio", 16, 32)?;
    let n = Vec3::new(0.2, 1.0, 0.3).normalize();
    let o = Vec3::new(0.0, 0.6, 1.0).normalize();
    let point = ShadingPoint { position: Vec3::zeros(), normal: n, view: o };
    let rule = HemisphereRule::with_nodes(1_000_000);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &(sigma, m) in &[(0.8, 0.0), (0.3, 0.5), (0.08, 1.0)] {
        let brdf = SurfaceBrdf::new([0.5, 0.5, 0.5, 0.5], sigma, m)?;
        let exact = rule.integrate(&n, |i| lobe(0.5, sigma, m, n.dot(i), n.dot(&o), i.dot(&o)) * n.dot(i) * env.eval(i)[1]);
        println!("sigma {sigma}, metallic {m}: quadrature {exact:.5}");
        for (label, n_brdf, n_light) in [("mis", 8, 8), ("brdf only", 8, 0), ("light only", 0, 8)] {
            let cfg = MisConfig { n_brdf, n_light, ..Default::default() };
            let runs = 20_000;
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..runs {
                let v = mis_pixel(&point, &brdf, &env, None, None, &cfg, &mut rng).radiance[1];
                s += v;
                s2 += v * v;
            }
            let mean = s / runs as f64;
            println!("  {label:>10}: mean {mean:.5}, per-pixel variance {:.3e}", s2 / runs as f64 - mean * mean);
        }
    }
    Ok(())
}

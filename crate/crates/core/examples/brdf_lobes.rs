//! Evaluates the shared reflectance lobe across roughness and metallic,
//! reports directional albedo and checks the importance sampler against its
//! own density. `cargo run --release --example brdf_lobes`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rgbnir::brdf::{lobe, pdf_direction, sample_direction};
use rgbnir::quadrature::HemisphereRule;
use rgbnir::spectral::Vec3;

fn main() {
    let n = Vec3::z();
    let o = Vec3::new(0.5, 0.0, 0.866).normalize();
    let rule = HemisphereRule::with_nodes(200_000);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>6} {:>6} {:>10} {:>10} {:>12}", "sigma", "metal", "albedo", "sampled", "pdf mass");
    for &sigma in &[0.1, 0.3, 0.6, 1.0] {
        for &m in &[0.0, 0.5, 1.0] {
            // directional albedo of a white lobe
            let f = |i: &Vec3| lobe(1.0, sigma, m, n.dot(i), n.dot(&o), i.dot(&o)) * n.dot(i);
            let exact = rule.integrate(&n, f);
            let mass = rule.integrate(&n, |i| pdf_direction(&o, &n, sigma, m, i));
            let draws = 100_000;
            let mut acc = 0.0;
            for _ in 0..draws {
                if let Some((i, p)) = sample_direction(&o, &n, sigma, m, [rng.gen(), rng.gen()]) {
                    acc += f(&i) / p;
                }
            }
            println!("{sigma:6.2} {m:6.2} {exact:10.4} {:10.4} {mass:12.4}", acc / draws as f64);
        }
    }
}

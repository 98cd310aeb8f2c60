//! Acceptance criteria. Prints one PASS/FAIL line per criterion and always
//! exits successfully; the verdicts are the output.
//!
//! `cargo test --release --test acceptance`

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgbnir::brdf::{self, collapse, lobe, lobe_grad, Basis, BasisSet, MixtureWeights, SurfaceBrdf};
use rgbnir::envlight::{balance_weight, mis_pixel, EnvironmentMap, MisConfig, ShadingPoint, Strategy};
use rgbnir::fit::{fit, fit_independent, independent_total_rms, BrdfTable, FitConfig};
use rgbnir::io::{self, CaptureSet, GroundTruth};
use rgbnir::metrics::{psnr, rmse};
use rgbnir::oracle::{
    default_ring, generate_capture_set, preset_env, reference_attributes, render_reference, two_material_sphere,
    Quality,
};
use rgbnir::pipeline::{
    attribute_maps, evaluate, relight, stage1, stage2, stage3, transfer_cross_spectral, EvalReport, LossLog,
    OptimConfig, RelightConfig, COVERED_ALPHA,
};
use rgbnir::quadrature::HemisphereRule;
use rgbnir::render::{backward, rasterize, RenderGrad, RenderOutput, ShadeGrad, ShadeInput, Shader, ValueShader};
use rgbnir::scene::{Gaussian2D, Scene};
use rgbnir::spectral::{Camera, Channel, SpectralImage, Vec3};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn report(id: usize, name: &str, started: Instant, v: rgbnir::Result<Verdict>) {
    let secs = started.elapsed().as_secs_f64();
    match v {
        Ok(v) => println!("{} [{id:2}] {name} ({secs:.1}s): {}", if v.pass { "PASS" } else { "FAIL" }, v.detail),
        Err(e) => println!("FAIL [{id:2}] {name} ({secs:.1}s): error: {e}"),
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * PI);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

/// Random direction with `n·d ≥ min_cos`.
fn random_above(n: &Vec3, min_cos: f64, rng: &mut impl Rng) -> Vec3 {
    loop {
        let d = random_unit(rng);
        if n.dot(&d) >= min_cos {
            return d;
        }
    }
}

fn mean_of(n: usize, mut f: impl FnMut() -> [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let (mut s, mut s2) = ([0.0; 3], [0.0; 3]);
    for _ in 0..n {
        let v = f();
        for c in 0..3 {
            s[c] += v[c];
            s2[c] += v[c] * v[c];
        }
    }
    let nf = n as f64;
    let mean = s.map(|x| x / nf);
    let mut se = [0.0; 3];
    for c in 0..3 {
        se[c] = ((s2[c] / nf - mean[c] * mean[c]).max(0.0) / nf).sqrt();
    }
    (mean, se)
}

fn mis_against_quadrature() -> rgbnir::Result<Verdict> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rule = HemisphereRule::with_nodes(1_000_000);
    let mut worst: f64 = 0.0;
    let mut worst_se: f64 = 0.0;
    for k in 0..10 {
        let (sigma, m) = if k == 0 { (0.3, 0.5) } else { (rng.gen_range(0.2..1.0), rng.gen_range(0.0..1.0)) };
        let albedo = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), 0.5];
        let brdf = SurfaceBrdf::new(albedo, sigma, m)?;
        let (h, w) = (8, 16);
        let lobe_dir = random_unit(&mut rng);
        let rad = (0..h * w)
            .map(|t| {
                let d = rgbnir::envlight::texel_to_dir((t / w) as f64 + 0.5, (t % w) as f64 + 0.5, h, w);
                let peak = 4.0 * (5.0 * (d.dot(&lobe_dir) - 1.0)).exp();
                [
                    rng.gen_range(0.0..1.0) + peak,
                    rng.gen_range(0.0..1.0) + 0.5 * peak,
                    rng.gen_range(0.0..1.0) + 0.25 * peak,
                ]
            })
            .collect();
        let env = EnvironmentMap::new(h, w, rad)?;
        let n = random_unit(&mut rng);
        let o = random_above(&n, 0.2, &mut rng);
        let exact = rule.integrate3(&n, |i| {
            let l = env.eval(i);
            let mut v = [0.0; 3];
            for c in 0..3 {
                v[c] = lobe(albedo[c], sigma, m, n.dot(i), n.dot(&o), i.dot(&o)) * n.dot(i) * l[c];
            }
            v
        });
        let point = ShadingPoint { position: Vec3::zeros(), normal: n, view: o };
        let cfg = MisConfig { n_brdf: 16, n_light: 16, ..Default::default() };
        let (est, se) = mean_of(40_000, || mis_pixel(&point, &brdf, &env, None, None, &cfg, &mut rng).radiance);
        for c in 0..3 {
            worst = worst.max((est[c] - exact[c]).abs() / exact[c]);
            worst_se = worst_se.max(se[c] / exact[c]);
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        worst <= 0.01 && secs < 60.0,
        format!("worst relative error {:.3}% (MC std error ≤ {:.3}%), {secs:.1}s", 100.0 * worst, 100.0 * worst_se),
    ))
}

fn lambertian_pixel() -> rgbnir::Result<Verdict> {
    let env = EnvironmentMap::constant(16, 32, [1.0; 3]);
    let brdf = SurfaceBrdf::new([0.5; 4], 0.5, 0.0)?;
    let n = Vec3::new(0.3, 0.8, -0.2).normalize();
    let point = ShadingPoint { position: Vec3::zeros(), normal: n, view: n };
    let cfg = MisConfig { n_brdf: 1, n_light: 1, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // the diffuse term alone: the dielectric base still carries a 4% specular lobe
    let (mean, _) = mean_of(100_000, || mis_pixel(&point, &brdf, &env, None, None, &cfg, &mut rng).diffuse.map(|d| d * 0.5));
    let worst = mean.iter().map(|v| (v - 0.5).abs() / 0.5).fold(0.0, f64::max);
    Ok(verdict(worst <= 0.01, format!("pixel {:.4} {:.4} {:.4}, worst deviation {:.3}%", mean[0], mean[1], mean[2], 100.0 * worst)))
}

/// Shader depending on hit position and normal so their gradient paths run.
struct Ramp;

impl Shader for Ramp {
    fn channels(&self) -> usize {
        2
    }
    fn shade(&self, k: usize, s: &ShadeInput, out: &mut [f64]) {
        out[0] = 1.0 + 0.5 * s.point.x - 0.3 * s.point.y + 0.2 * s.normal.z;
        out[1] = 0.2 + 0.1 * k as f64 + 0.4 * s.normal.x;
    }
    fn shade_backward(&self, _: usize, _: &ShadeInput, g: &[f64], grad: &mut ShadeGrad<'_>) {
        grad.point += Vec3::new(0.5, -0.3, 0.0) * g[0];
        grad.normal += Vec3::new(0.4 * g[1], 0.0, 0.2 * g[0]);
    }
}

fn splat_scene(rng: &mut impl Rng, count: usize) -> Vec<Gaussian2D> {
    (0..count)
        .map(|_| {
            let c = Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(-0.5..0.5));
            let n = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), -1.0).normalize();
            let (a, b) = rgbnir::spectral::orthonormal_basis(&n);
            let ang: f64 = rng.gen_range(0.0..2.0 * PI);
            let tu = a * ang.cos() + b * ang.sin();
            let tv = n.cross(&tu);
            Gaussian2D::new(c, tu, tv, [rng.gen_range(0.3..0.8), rng.gen_range(0.3..0.8)], rng.gen_range(0.3..0.9))
                .expect("valid splat")
        })
        .collect()
}

/// Weighted sum of every composited output.
fn loss(out: &RenderOutput, wts: &[f64]) -> (f64, RenderGrad) {
    let n = out.width() * out.height();
    let k = out.channels();
    let mut g = RenderGrad::zeros(out);
    let mut l = 0.0;
    for p in 0..n {
        for c in 0..k {
            let r = out.radiance.data()[k * p + c];
            let w = wts[(p + c) % n];
            l += w * r * r;
            g.radiance[k * p + c] = 2.0 * w * r;
        }
        l += 0.3 * wts[n - 1 - p] * out.alpha.data()[p];
        g.alpha[p] = 0.3 * wts[n - 1 - p];
        l += 0.1 * wts[p] * out.depth.data()[p];
        g.depth[p] = 0.1 * wts[p];
        for c in 0..3 {
            let q = wts[(p + c) % n] - 0.5;
            l += q * out.normal.data()[3 * p + c];
            g.normal[3 * p + c] = q;
        }
    }
    (l, g)
}

fn same_support(a: &RenderOutput, b: &RenderOutput) -> bool {
    let n = a.width() * a.height();
    (0..n).all(|p| a.flips(p).eq(b.flips(p)))
}

fn gradient_suite() -> rgbnir::Result<Verdict> {
    let started = Instant::now();
    let cam = Camera::look_at(Vec3::new(0.0, 0.0, -3.0), Vec3::zeros(), -Vec3::y(), 8.0, 8.0, 8, 8)?;
    let h = 1e-4;
    let (mut render_cases, mut worst_render): (usize, f64) = (0, 0.0);
    for seed in 0..12 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let gs = splat_scene(&mut rng, 3);
        let wts: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        let out = rasterize(&gs, &cam, &Ramp);
        let sg = backward(&out, &gs, &Ramp, &loss(&out, &wts).1)?;
        for k in 0..gs.len() {
            type Perturb = Box<dyn Fn(&mut Gaussian2D, f64)>;
            let mut cases: Vec<(f64, Perturb)> = Vec::new();
            for a in 0..3 {
                cases.push((sg.center[k][a], Box::new(move |g: &mut Gaussian2D, e| g.center[a] += e)));
                cases.push((
                    sg.rotation(&gs[k], k)[a],
                    Box::new(move |g: &mut Gaussian2D, e| {
                        let mut w = Vec3::zeros();
                        w[a] = e;
                        g.rotate(&w)
                    }),
                ));
            }
            for a in 0..2 {
                cases.push((sg.log_scale[k][a], Box::new(move |g: &mut Gaussian2D, e| g.log_scale[a] += e)));
            }
            cases.push((sg.opacity_logit[k], Box::new(|g: &mut Gaussian2D, e| g.opacity_logit += e)));
            for (an, perturb) in cases {
                let (mut p, mut m) = (gs.clone(), gs.clone());
                perturb(&mut p[k], h);
                perturb(&mut m[k], -h);
                let (rp, rm) = (rasterize(&p, &cam, &Ramp), rasterize(&m, &cam, &Ramp));
                // the cutoff makes the loss piecewise smooth; skip steps across a kink
                if !same_support(&rp, &out) || !same_support(&rm, &out) {
                    continue;
                }
                let fd = (loss(&rp, &wts).0 - loss(&rm, &wts).0) / (2.0 * h);
                worst_render = worst_render.max((an - fd).abs() / fd.abs().max(1e-2));
                render_cases += 1;
            }
        }
        // per-splat shader values
        let vals: Vec<f64> = (0..3).map(|_| rng.gen()).collect();
        let vs = ValueShader { channels: 1, values: vals.clone() };
        let out = rasterize(&gs, &cam, &vs);
        let sg = backward(&out, &gs, &vs, &loss(&out, &wts).1)?;
        for k in 0..3 {
            let eval = |d: f64| {
                let mut v = vals.clone();
                v[k] += d;
                loss(&rasterize(&gs, &cam, &ValueShader { channels: 1, values: v }), &wts).0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            worst_render = worst_render.max((sg.local[k] - fd).abs() / fd.abs().max(1e-2));
            render_cases += 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let (mut brdf_cases, mut worst_brdf): (usize, f64) = (0, 0.0);
    for _ in 0..100 {
        let n = Vec3::z();
        let (i, o) = (random_above(&n, 0.1, &mut rng), random_above(&n, 0.1, &mut rng));
        let (ci, co, cio) = (i.z, o.z, i.dot(&o));
        let (rho, sig, m) = (rng.gen_range(0.05..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.05..0.95));
        let g = lobe_grad(rho, sig, m, ci, co, cio);
        let f = |r: f64, s: f64, mm: f64| lobe(r, s, mm, ci, co, cio);
        let fd = [
            (f(rho + h, sig, m) - f(rho - h, sig, m)) / (2.0 * h),
            (f(rho, sig + h, m) - f(rho, sig - h, m)) / (2.0 * h),
            (f(rho, sig, m + h) - f(rho, sig, m - h)) / (2.0 * h),
        ];
        for (a, d) in [g.d_albedo, g.d_roughness, g.d_metallic].iter().zip(fd) {
            worst_brdf = worst_brdf.max((a - d).abs() / d.abs().max(1e-3 * g.value.max(1e-3)));
            brdf_cases += 1;
        }
    }
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        render_cases >= 50 && brdf_cases >= 50 && worst_render <= 1e-3 && worst_brdf <= 1e-3 && secs < 120.0,
        format!(
            "renderer {render_cases} cases worst {worst_render:.2e}, brdf {brdf_cases} cases worst {worst_brdf:.2e}, {secs:.1}s"
        ),
    ))
}

/// One full reconstruction of the two-material sphere.
struct RoundTrip {
    captures: CaptureSet,
    gt: GroundTruth,
    transferred: Scene,
    joint: Scene,
    joint_report: EvalReport,
    frozen: Option<(Scene, EvalReport)>,
    elapsed: Duration,
}

const VIEWS: usize = 20;
const RES: usize = 64;

fn round_trip(env_name: &str, seed: u64, with_frozen: bool) -> rgbnir::Result<RoundTrip> {
    let started = Instant::now();
    let env = preset_env(env_name, 16, 32)?;
    let (captures, gt) = generate_capture_set(&two_material_sphere(env.clone()), &default_ring(VIEWS, RES), Quality::default())?;
    let config = OptimConfig { seed, ..Default::default() };
    let mut log = LossLog::default();
    let s1 = stage1(&captures, &config, &mut log)?;
    let s2 = stage2(&s1, &captures, &config, &mut log)?;
    let transferred = transfer_cross_spectral(&s2)?;
    let frozen = if with_frozen {
        let mut start = transferred.clone();
        start.env = Some(env);
        let mut cfg = config;
        cfg.stage3.optimize_env = false;
        let s = stage3(&start, &captures, &cfg, &mut log)?;
        let r = evaluate(&s, &captures, &gt)?;
        Some((s, r))
    } else {
        None
    };
    let joint = stage3(&transferred, &captures, &config, &mut log)?;
    let joint_report = evaluate(&joint, &captures, &gt)?;
    Ok(RoundTrip { captures, gt, transferred, joint, joint_report, frozen, elapsed: started.elapsed() })
}

/// Masked PSNR of relighting under a held-out environment at held-out views,
/// with the peak taken as the reference maximum inside the mask.
fn held_out_relight(scene: &Scene, env_name: &str) -> rgbnir::Result<f64> {
    let env = preset_env(env_name, 16, 32)?;
    let truth = two_material_sphere(env.clone());
    let mut ring = default_ring(5, RES);
    ring.phase = PI / VIEWS as f64;
    let cfg = RelightConfig { background: false, ..Default::default() };
    let mut acc = 0.0;
    let cams = ring.cameras()?;
    for cam in &cams {
        let reference = render_reference(&truth, cam, &Channel::RGB, false, Quality::default());
        let mask = reference_attributes(&truth, cam).mask;
        let relit = relight(scene, Some(&env), &[], cam, &cfg)?;
        let peak = (0..mask.pixel_count())
            .filter(|&p| mask.data()[p] > 0.5)
            .flat_map(|p| reference.pixel(p % cam.width, p / cam.width).to_vec())
            .fold(0.0, f64::max);
        acc += psnr(&relit, &reference, peak, Some(&mask))?;
    }
    Ok(acc / cams.len() as f64)
}

fn end_to_end(rt: &RoundTrip) -> rgbnir::Result<Verdict> {
    let (_, f) = rt.frozen.as_ref().expect("criterion run keeps the frozen stage");
    let j = &rt.joint_report;
    let started = Instant::now();
    let relit = held_out_relight(&rt.joint, "dusk")?;
    let minutes = (rt.elapsed + started.elapsed()).as_secs_f64() / 60.0;
    let checks = [
        f.albedo_psnr >= 30.0,
        f.roughness_rmse <= 0.05,
        f.normal_mae_deg <= 5.0,
        j.albedo_psnr >= 25.0,
        relit >= 28.0,
        minutes <= 30.0,
    ];
    Ok(verdict(
        checks.iter().all(|c| *c),
        format!(
            "frozen env: albedo {:.2} dB, σ RMSE {:.4}, normal MAE {:.2}°; joint env: albedo {:.2} dB, held-out relight {:.2} dB; {minutes:.1} min",
            f.albedo_psnr, f.roughness_rmse, f.normal_mae_deg, j.albedo_psnr, relit
        ),
    ))
}

/// Albedo RMSE between two reconstructions over pixels both cover inside
/// the ground-truth mask, averaged over views.
fn albedo_rmse_between(a: &RoundTrip, b: &RoundTrip) -> rgbnir::Result<f64> {
    let mut acc = 0.0;
    for (v, t) in a.captures.views.iter().zip(&a.gt.views) {
        let (ma, mb) = (attribute_maps(&a.joint, &v.camera)?, attribute_maps(&b.joint, &v.camera)?);
        let data = (0..t.mask.pixel_count())
            .map(|p| {
                let keep = t.mask.data()[p] > 0.5
                    && ma.alpha.data()[p] > COVERED_ALPHA
                    && mb.alpha.data()[p] > COVERED_ALPHA;
                keep as u8 as f64
            })
            .collect();
        let mask = SpectralImage::from_data(v.camera.width, v.camera.height, 1, data)?;
        acc += rmse(&ma.albedo_rgb, &mb.albedo_rgb, Some(&mask))?;
    }
    Ok(acc / a.captures.len() as f64)
}

fn ambient_robustness(studio: &RoundTrip) -> rgbnir::Result<Verdict> {
    let sunset = round_trip("sunset", 0, false)?;
    let overcast = round_trip("overcast", 0, false)?;
    let runs = [("studio", studio), ("sunset", &sunset), ("overcast", &overcast)];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for x in 0..3 {
        for y in x + 1..3 {
            let e = albedo_rmse_between(runs[x].1, runs[y].1)?;
            worst = worst.max(e);
            parts.push(format!("{}/{} {e:.4}", runs[x].0, runs[y].0));
        }
    }
    Ok(verdict(worst <= 0.05, format!("pairwise albedo RMSE {}", parts.join(", "))))
}

fn cross_spectral_collapse(rt: &RoundTrip) -> rgbnir::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst: f64 = 0.0;
    let mut check = |bases: &BasisSet, w: &MixtureWeights, got: brdf::Collapsed| {
        let mut want = [0.0; 3];
        let (mut lo, mut hi) = ([f64::INFINITY; 3], [f64::NEG_INFINITY; 3]);
        for (b, &wk) in bases.bases.iter().zip(w.as_slice()) {
            let v = [b.roughness, b.metallic, b.albedo_nir];
            for c in 0..3 {
                want[c] += wk * v[c];
                lo[c] = lo[c].min(v[c]);
                hi[c] = hi[c].max(v[c]);
            }
        }
        let g = [got.roughness, got.metallic, got.albedo_nir];
        for c in 0..3 {
            worst = worst.max((g[c] - want[c]).abs());
            if g[c] < lo[c] - 1e-12 || g[c] > hi[c] + 1e-12 {
                worst = f64::INFINITY;
            }
        }
    };
    for _ in 0..1000 {
        let n = rng.gen_range(1..8);
        let bases = BasisSet::new(
            (0..n)
                .map(|_| Basis {
                    albedo_nir: rng.gen_range(0.0..1.0),
                    roughness: rng.gen_range(brdf::ROUGHNESS_MIN..1.0),
                    metallic: rng.gen_range(0.0..1.0),
                })
                .collect(),
        )?;
        let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let w = MixtureWeights::from_logits(&logits);
        check(&bases, &w, collapse(&bases, &w)?);
    }
    // the transfer applied to the reconstructed scene
    for g in &rt.transferred.gaussians {
        let frozen = g.frozen.expect("transferred splats carry collapsed parameters");
        check(&rt.transferred.bases, &g.mixture_weights(), frozen);
    }
    Ok(verdict(
        worst <= 1e-12,
        format!("1000 random mixtures and {} reconstructed splats, worst deviation {worst:.1e}", rt.transferred.len()),
    ))
}

fn stress_variances(env: &EnvironmentMap, brdf: &SurfaceBrdf, point: &ShadingPoint, seed: u64) -> [f64; 3] {
    let configs = [(8, 8), (8, 0), (0, 8)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [0.0; 3];
    for (k, &(n_brdf, n_light)) in configs.iter().enumerate() {
        let cfg = MisConfig { n_brdf, n_light, ..Default::default() };
        let mut acc = 0.0;
        for _ in 0..100 {
            let (_, se) = mean_of(1000, || mis_pixel(point, brdf, env, None, None, &cfg, &mut rng).radiance);
            // per-estimate variance of the green channel in this batch
            acc += se[1] * se[1] * 1000.0;
        }
        out[k] = acc / 100.0;
    }
    out
}

fn mis_invariants() -> rgbnir::Result<Verdict> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut unity: f64 = 0.0;
    for _ in 0..10_000 {
        let (n_b, n_l) = (rng.gen_range(0..16), rng.gen_range(0..16));
        if n_b + n_l == 0 {
            continue;
        }
        let (p_b, p_l) = (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0));
        let s = balance_weight(Strategy::Brdf, n_b, n_l, p_b, p_l)? + balance_weight(Strategy::Light, n_b, n_l, p_b, p_l)?;
        unity = unity.max((s - 1.0).abs());
    }

    let n = Vec3::y();
    let view = Vec3::new(0.3, 0.9, 0.1).normalize();
    let point = ShadingPoint { position: Vec3::zeros(), normal: n, view };
    let (h, w) = (16, 32);
    let mut rad = vec![[0.05; 3]; h * w];
    rad[3 * w + 7] = [400.0; 3];
    let texel = EnvironmentMap::new(h, w, rad)?;
    let diffuse = SurfaceBrdf::new([0.6; 4], 0.8, 0.0)?;
    let mirror = SurfaceBrdf::new([0.6; 4], brdf::ROUGHNESS_MIN, 1.0)?;
    let studio = preset_env("studio", 16, 32)?;
    let a = stress_variances(&texel, &diffuse, &point, 70);
    let b = stress_variances(&studio, &mirror, &point, 71);
    let ratio = |v: [f64; 3]| v[0] / v[1].min(v[2]);
    let (ra, rb) = (ratio(a), ratio(b));
    let secs = started.elapsed().as_secs_f64();
    Ok(verdict(
        unity <= 1e-12 && ra <= 1.05 && rb <= 1.05 && secs < 60.0,
        format!(
            "partition of unity off by {unity:.1e}; MIS / best single-strategy variance: bright texel {ra:.3}, near mirror {rb:.3}; {secs:.1}s"
        ),
    ))
}

fn brdf_fit_consistency() -> rgbnir::Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = FitConfig::default();
    let mut worst: f64 = 0.0;
    let mut ordering = true;
    for _ in 0..5 {
        let truth = SurfaceBrdf::new(
            [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
            rng.gen_range(0.15..0.9),
            rng.gen_range(0.05..0.8),
        )?;
        let table = BrdfTable::synthesize(&truth, &Channel::ALL, 200, &mut rng);
        let shared = fit(&table, &cfg)?;
        let b = shared.brdf;
        worst = worst.max((b.roughness - truth.roughness).abs()).max((b.metallic - truth.metallic).abs());
        for c in 0..4 {
            worst = worst.max((b.albedo[c] - truth.albedo[c]).abs());
        }
        let indep = fit_independent(&table, &cfg, Some(&b))?;
        ordering &= independent_total_rms(&indep) <= shared.total_rms + 1e-12;
    }
    // channels drawn from different lobes: sharing must cost residual
    let a = SurfaceBrdf::new([0.5; 4], 0.15, 0.2)?;
    let b = SurfaceBrdf::new([0.5; 4], 0.7, 0.2)?;
    let mut s = BrdfTable::synthesize(&a, &[Channel::R, Channel::G, Channel::B], 150, &mut rng).samples().to_vec();
    s.extend_from_slice(BrdfTable::synthesize(&b, &[Channel::Nir], 150, &mut rng).samples());
    let t = BrdfTable::new(s)?;
    let shared = fit(&t, &cfg)?;
    let indep = independent_total_rms(&fit_independent(&t, &cfg, Some(&shared.brdf))?);
    ordering &= shared.total_rms > indep;
    Ok(verdict(
        worst <= 0.02 && ordering,
        format!(
            "worst parameter error {worst:.4} over 5 tables; differing lobes: shared {:.4} vs independent {indep:.4}",
            shared.total_rms
        ),
    ))
}

fn bits(img: &SpectralImage) -> Vec<u64> {
    img.data().iter().map(|v| v.to_bits()).collect()
}

fn same_bits(a: &SpectralImage, b: &SpectralImage) -> bool {
    a.width() == b.width() && a.height() == b.height() && a.channels() == b.channels() && bits(a) == bits(b)
}

fn io_round_trips(rt: &RoundTrip) -> rgbnir::Result<Verdict> {
    let dir = tempfile::tempdir().map_err(|source| rgbnir::Error::Io { context: "temporary directory".into(), source })?;
    let mut problems = Vec::new();
    for (k, v) in rt.captures.views.iter().enumerate() {
        let sub = io::flash_subtract(&v.nir_on, &v.nir_off)?;
        let direct: Vec<u64> =
            v.nir_on.data().iter().zip(v.nir_off.data()).map(|(a, b)| (a - b).max(0.0).to_bits()).collect();
        if !same_bits(&sub, &v.nir_flash_only) || bits(&sub) != direct {
            problems.push(format!("view {k}: flash subtraction"));
        }
    }
    let root = dir.path().join("capture");
    io::save_capture_set(&root, &rt.captures)?;
    let back = io::load_capture_set(&root)?;
    for (k, (a, b)) in rt.captures.views.iter().zip(&back.views).enumerate() {
        let images = [(&a.rgb, &b.rgb), (&a.nir_on, &b.nir_on), (&a.nir_off, &b.nir_off), (&a.nir_flash_only, &b.nir_flash_only), (&a.mask, &b.mask)];
        if !images.iter().all(|(x, y)| same_bits(x, y)) {
            problems.push(format!("view {k}: images"));
        }
        let ca = serde_json::to_string(&a.camera).expect("camera serializes");
        let cb = serde_json::to_string(&b.camera).expect("camera serializes");
        if ca != cb || a.flash != b.flash {
            problems.push(format!("view {k}: pose or flash"));
        }
    }
    let gt_dir = dir.path().join("gt");
    io::save_ground_truth(&gt_dir, &rt.gt)?;
    let gt = io::load_ground_truth(&gt_dir)?;
    let env_bits = |e: &EnvironmentMap| e.radiance().iter().flatten().map(|v| v.to_bits()).collect::<Vec<_>>();
    if env_bits(&gt.env) != env_bits(&rt.gt.env) {
        problems.push("environment map".into());
    }
    for (a, b) in rt.gt.views.iter().zip(&gt.views) {
        let images = [(&a.albedo_rgb, &b.albedo_rgb), (&a.albedo_nir, &b.albedo_nir), (&a.roughness, &b.roughness), (&a.metallic, &b.metallic), (&a.normal, &b.normal), (&a.mask, &b.mask)];
        if !images.iter().all(|(x, y)| same_bits(x, y)) {
            problems.push("ground-truth view".into());
        }
    }
    let config = OptimConfig { seed: 17, ..Default::default() };
    let cfg_path = dir.path().join("config.json");
    config.save(&cfg_path)?;
    if OptimConfig::load(&cfg_path)? != config {
        problems.push("config".into());
    }
    let ckpt = dir.path().join("scene.ckpt");
    rt.joint.save_checkpoint(&ckpt)?;
    if Scene::load_checkpoint(&ckpt)?.checkpoint_bytes() != rt.joint.checkpoint_bytes() {
        problems.push("checkpoint".into());
    }
    Ok(verdict(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{} views, ground truth, config and checkpoint bit-identical", rt.captures.len())
        } else {
            format!("mismatches: {}", problems.join(", "))
        },
    ))
}

fn report_bits(r: &EvalReport) -> Vec<u64> {
    [
        r.albedo_psnr,
        r.albedo_ssim,
        r.albedo_nir_rmse,
        r.roughness_rmse,
        r.metallic_rmse,
        r.normal_mae_deg,
        r.coverage_iou,
        r.albedo_psnr_pooled,
    ]
    .iter()
    .map(|v| v.to_bits())
    .collect()
}

fn determinism(first: &RoundTrip) -> rgbnir::Result<Verdict> {
    let second = round_trip("studio", 0, true)?;
    let (fa, ra) = first.frozen.as_ref().expect("frozen stage");
    let (fb, rb) = second.frozen.as_ref().expect("frozen stage");
    let checkpoints = fa.checkpoint_bytes() == fb.checkpoint_bytes()
        && first.joint.checkpoint_bytes() == second.joint.checkpoint_bytes()
        && first.transferred.checkpoint_bytes() == second.transferred.checkpoint_bytes();
    let metrics = report_bits(ra) == report_bits(rb) && report_bits(&first.joint_report) == report_bits(&second.joint_report);
    Ok(verdict(checkpoints && metrics, format!("checkpoints identical: {checkpoints}, metrics identical: {metrics}")))
}

fn main() {
    // a test-name filter other than this target's name skips the suite
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|a| a == "acceptance") {
        return;
    }
    let t = Instant::now();
    report(1, "MIS matches quadrature", t, mis_against_quadrature());
    let t = Instant::now();
    report(2, "Lambertian pixel under constant light", t, lambertian_pixel());
    let t = Instant::now();
    report(3, "gradients match finite differences", t, gradient_suite());

    let t = Instant::now();
    let studio = round_trip("studio", 0, true);
    match &studio {
        Ok(rt) => report(4, "end-to-end round trip", t, end_to_end(rt)),
        Err(e) => println!("FAIL [ 4] end-to-end round trip: error: {e}"),
    }
    let t = Instant::now();
    match &studio {
        Ok(rt) => report(5, "ambient robustness", t, ambient_robustness(rt)),
        Err(_) => println!("FAIL [ 5] ambient robustness: no studio reconstruction"),
    }
    let t = Instant::now();
    match &studio {
        Ok(rt) => report(6, "cross-spectral collapse", t, cross_spectral_collapse(rt)),
        Err(_) => println!("FAIL [ 6] cross-spectral collapse: no studio reconstruction"),
    }
    let t = Instant::now();
    report(7, "balance heuristic and MIS variance", t, mis_invariants());
    let t = Instant::now();
    report(8, "BRDF fit self-consistency", t, brdf_fit_consistency());
    let t = Instant::now();
    match &studio {
        Ok(rt) => report(9, "flash subtraction and I/O round trips", t, io_round_trips(rt)),
        Err(_) => println!("FAIL [ 9] flash subtraction and I/O round trips: no capture set"),
    }
    let t = Instant::now();
    match &studio {
        Ok(rt) => report(10, "determinism", t, determinism(rt)),
        Err(_) => println!("FAIL [10] determinism: no first run"),
    }
}

//! Command-line front end: `synth`, `run`, `relight`, `eval`, `fit-brdf`
//! and `render`.
//!
//! Run directory layout written by `run`:
//!
//! ```text
//! config.json        the effective configuration (after --seed)
//! stage1.ckpt ...    one checkpoint per executed stage
//! scene.ckpt         the final scene
//! env.pfm            the stage-3 environment, when present
//! loss.csv           per-step loss terms
//! ```

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::envlight::EnvironmentMap;
use crate::error::{io_err, Error, Result};
use crate::fit::{fit, fit_independent, independent_total_rms, BrdfTable, FitConfig};
use crate::io::{load_capture_set, load_env, load_ground_truth, save_capture_set, save_env, save_ground_truth, save_json, save_pfm, save_png_preview, view_dir};
use crate::oracle::{default_ring, generate_capture_set, preset_env, two_material_sphere, Quality};
use crate::pipeline::{attribute_maps, evaluate, relight, run, LossLog, OptimConfig, RelightConfig, StageSet};
use crate::scene::{Scene, Stage};
use crate::spectral::{PointLight, Vec3};

#[derive(Debug, Parser)]
#[command(name = "rgbnir", version, about = "RGB-NIR inverse rendering with 2D Gaussian splats")]
struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic capture set and its ground truth.
    Synth(SynthArgs),
    /// Run reconstruction stages on a capture set.
    Run(RunArgs),
    /// Relight a reconstruction under a new environment and point lights.
    Relight(RelightArgs),
    /// Compare a reconstruction with ground truth.
    Eval(EvalArgs),
    /// Fit the shared-lobe BRDF model to a CSV table.
    FitBrdf(FitArgs),
    /// Write attribute maps of a reconstruction for every capture camera.
    Render(RenderArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value = "two_sphere")]
    scene: String,
    /// Preset name (studio, sunset, overcast, dusk) or a PFM path.
    #[arg(long, default_value = "studio")]
    env: String,
    #[arg(long, default_value_t = 20)]
    views: usize,
    #[arg(long, default_value_t = 64)]
    res: usize,
    /// Polar quadrature nodes for the reference renderer.
    #[arg(long, default_value_t = 32)]
    quality: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma list of stages, e.g. `1,2,3` or `3`.
    #[arg(long, default_value = "1,2,3")]
    stages: String,
    /// Checkpoint to start from when stage 1 is skipped.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stage-3 environment (fixed when the config disables its optimization).
    #[arg(long)]
    env: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RelightArgs {
    /// Run directory or checkpoint file.
    #[arg(long)]
    run: PathBuf,
    /// Capture set supplying the cameras.
    #[arg(long)]
    data: PathBuf,
    /// Preset name or PFM path.
    #[arg(long)]
    env: Option<String>,
    /// Point light `x,y,z,intensity`; repeatable.
    #[arg(long = "light")]
    lights: Vec<String>,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// Capture set with the cameras (default: the parent of --gt).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long)]
    table: PathBuf,
    #[arg(long, default_value_t = 8)]
    restarts: usize,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct RenderArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first) and runs the subcommand. Returns the
/// process exit code: 0 on success, 1 on failure, 2 on usage errors.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("RGBNIR_LOG", "info")).try_init();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n.max(1));
    }
    let result = match pool.build() {
        Ok(p) => p.install(|| execute(&cli)),
        Err(e) => Err(Error::InvalidParameter(format!("thread pool: {e}"))),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Run(a) => run_stages(a, cli.seed),
        Command::Relight(a) => relight_cmd(a, cli.seed),
        Command::Eval(a) => eval_cmd(a),
        Command::FitBrdf(a) => fit_cmd(a, cli.seed),
        Command::Render(a) => render_cmd(a),
    }
}

fn env_arg(spec: &str) -> Result<EnvironmentMap> {
    let p = Path::new(spec);
    if p.extension().is_some_and(|e| e == "pfm") || p.exists() {
        load_env(p)
    } else {
        preset_env(spec, 16, 32)
    }
}

fn synth(a: &SynthArgs) -> Result<()> {
    if a.scene != "two_sphere" {
        return Err(Error::InvalidParameter(format!("unknown scene {:?} (available: two_sphere)", a.scene)));
    }
    let scene = two_material_sphere(env_arg(&a.env)?);
    let q = Quality {
        diffuse_theta: a.quality,
        specular_theta: a.quality,
    };
    let (set, gt) = generate_capture_set(&scene, &default_ring(a.views, a.res), q)?;
    save_capture_set(&a.out, &set)?;
    save_ground_truth(&a.out.join("ground_truth"), &gt)?;
    log::info!("wrote {} views to {}", set.len(), a.out.display());
    Ok(())
}

fn load_scene(run_or_ckpt: &Path) -> Result<Scene> {
    if run_or_ckpt.is_dir() {
        Scene::load_checkpoint(&run_or_ckpt.join("scene.ckpt"))
    } else {
        Scene::load_checkpoint(run_or_ckpt)
    }
}

fn run_stages(a: &RunArgs, seed: Option<u64>) -> Result<()> {
    let captures = load_capture_set(&a.data)?;
    let mut config = match &a.config {
        Some(p) => OptimConfig::load(p)?,
        None => OptimConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let stages = StageSet::parse(&a.stages)?;
    std::fs::create_dir_all(&a.out).map_err(io_err(format!("creating {}", a.out.display())))?;
    config.save(&a.out.join("config.json"))?;
    let env = a.env.as_deref().map(load_env).transpose()?;
    let mut scene = a.resume.as_deref().map(Scene::load_checkpoint).transpose()?;
    let mut log = LossLog::default();
    let single = |g, n, r| StageSet { geometry: g, nir: n, rgb: r };
    for (k, one) in [(1, single(true, false, false)), (2, single(false, true, false)), (3, single(false, false, true))] {
        let selected = [stages.geometry, stages.nir, stages.rgb][k - 1];
        if !selected {
            continue;
        }
        let s = run(&captures, &config, one, scene.take(), env.clone(), &mut log)?;
        s.save_checkpoint(&a.out.join(format!("stage{k}.ckpt")))?;
        log::info!("stage {k} done: {} splats", s.len());
        scene = Some(s);
    }
    let scene = scene.expect("at least one stage ran");
    scene.save_checkpoint(&a.out.join("scene.ckpt"))?;
    if let Some(e) = &scene.env {
        save_env(&a.out.join("env.pfm"), e)?;
    }
    log.write_csv(&a.out.join("loss.csv"))
}

fn parse_light(s: &str) -> Result<PointLight> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::InvalidParameter(format!("light {s:?}: {e}")))?;
    match v.as_slice() {
        [x, y, z, i] => PointLight::new(Vec3::new(*x, *y, *z), *i),
        _ => Err(Error::InvalidParameter(format!("light {s:?}: expected x,y,z,intensity"))),
    }
}

fn relight_cmd(a: &RelightArgs, seed: Option<u64>) -> Result<()> {
    let scene = load_scene(&a.run)?;
    let captures = load_capture_set(&a.data)?;
    let env = a.env.as_deref().map(env_arg).transpose()?;
    let lights = a.lights.iter().map(|s| parse_light(s)).collect::<Result<Vec<_>>>()?;
    let cfg = RelightConfig {
        n_brdf: a.samples,
        n_light: a.samples,
        seed: seed.unwrap_or(0),
        ..Default::default()
    };
    for (k, v) in captures.views.iter().enumerate() {
        let img = relight(&scene, env.as_ref(), &lights, &v.camera, &cfg)?;
        let d = view_dir(&a.out, k);
        std::fs::create_dir_all(&d).map_err(io_err(format!("creating {}", d.display())))?;
        save_pfm(&d.join("relit.pfm"), &img)?;
        save_png_preview(&d.join("relit.png"), &img, 1.0)?;
    }
    Ok(())
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let scene = load_scene(&a.run)?;
    let data = match &a.data {
        Some(d) => d.clone(),
        None => a
            .gt
            .parent()
            .map(Path::to_path_buf)
            .ok_or_else(|| Error::Missing("capture set for the ground truth; pass --data".into()))?,
    };
    let captures = load_capture_set(&data)?;
    let gt = load_ground_truth(&a.gt)?;
    let report = evaluate(&scene, &captures, &gt)?;
    save_json(&a.report, &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn fit_cmd(a: &FitArgs, seed: Option<u64>) -> Result<()> {
    let table = BrdfTable::load(&a.table)?;
    let cfg = FitConfig {
        restarts: a.restarts,
        seed: seed.unwrap_or(0),
        ..Default::default()
    };
    let shared = fit(&table, &cfg)?;
    let indep = fit_independent(&table, &cfg, Some(&shared.brdf))?;
    let out = serde_json::json!({
        "shared": shared,
        "independent": indep.iter().map(|(c, r)| serde_json::json!({"channel": c, "fit": r})).collect::<Vec<_>>(),
        "independent_total_rms": independent_total_rms(&indep),
    });
    save_json(&a.report, &out)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn render_cmd(a: &RenderArgs) -> Result<()> {
    let scene = load_scene(&a.run)?;
    if scene.stage < Stage::Transferred {
        log::warn!("scene is at stage {:?}; material maps show the current mixture", scene.stage.name());
    }
    let captures = load_capture_set(&a.data)?;
    for (k, v) in captures.views.iter().enumerate() {
        let m = attribute_maps(&scene, &v.camera)?;
        let d = view_dir(&a.out, k);
        std::fs::create_dir_all(&d).map_err(io_err(format!("creating {}", d.display())))?;
        for (name, img) in [
            ("albedo_rgb", &m.albedo_rgb),
            ("albedo_nir", &m.albedo_nir),
            ("roughness", &m.roughness),
            ("metallic", &m.metallic),
            ("normal", &m.normal),
            ("alpha", &m.alpha),
        ] {
            save_pfm(&d.join(format!("{name}.pfm")), img)?;
        }
        save_png_preview(&d.join("albedo_rgb.png"), &m.albedo_rgb, 1.0)?;
    }
    Ok(())
}

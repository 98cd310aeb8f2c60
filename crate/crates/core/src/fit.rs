//! Fitting the shared-lobe BRDF model to tabulated measurements.
//!
//! A table holds `(i, o, channel, value)` samples in a local frame with the
//! normal along `+z`. The fit minimizes the mean squared log-space residual
//! `log(1 + f) - log(1 + value)` with one roughness and metallic value for
//! all channels and an independent diffuse albedo per channel.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::brdf::{lobe, lobe_grad, param, SurfaceBrdf};
use crate::error::{io_err, Error, Result};
use crate::pipeline::{Adam, AdamParams};
use crate::spectral::{Channel, Vec3};

type Matrix6 = nalgebra::Matrix6<f64>;
type Vector6 = nalgebra::Vector6<f64>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrdfSample {
    pub i: Vec3,
    pub o: Vec3,
    pub channel: Channel,
    pub value: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    ix: f64,
    iy: f64,
    iz: f64,
    ox: f64,
    oy: f64,
    oz: f64,
    channel: String,
    value: f64,
}

/// Measured BRDF samples with both directions above the surface.
#[derive(Debug, Clone, PartialEq)]
pub struct BrdfTable {
    samples: Vec<BrdfSample>,
}

impl BrdfTable {
    pub fn new(samples: Vec<BrdfSample>) -> Result<Self> {
        for (k, s) in samples.iter().enumerate() {
            if !(s.i.z > 0.0 && s.o.z > 0.0) {
                return Err(Error::InvalidParameter(format!("sample {k}: directions must have z > 0")));
            }
            if !s.value.is_finite() || s.value < 0.0 {
                return Err(Error::InvalidParameter(format!("sample {k}: value {} is not a finite nonnegative", s.value)));
            }
        }
        let samples = samples
            .into_iter()
            .map(|s| BrdfSample {
                i: s.i.normalize(),
                o: s.o.normalize(),
                ..s
            })
            .collect();
        Ok(BrdfTable { samples })
    }

    pub fn samples(&self) -> &[BrdfSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Channels present, in `[R, G, B, NIR]` order.
    pub fn channels(&self) -> Vec<Channel> {
        Channel::ALL
            .into_iter()
            .filter(|c| self.samples.iter().any(|s| s.channel == *c))
            .collect()
    }

    /// Samples of one channel only.
    pub fn channel(&self, c: Channel) -> BrdfTable {
        BrdfTable {
            samples: self.samples.iter().filter(|s| s.channel == c).copied().collect(),
        }
    }

    /// Columns `ix,iy,iz,ox,oy,oz,channel,value` with a header row.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut samples = Vec::new();
        for row in rdr.deserialize() {
            let r: CsvRow = row?;
            let channel = Channel::parse(&r.channel)
                .ok_or_else(|| Error::InvalidParameter(format!("unknown channel {:?}", r.channel)))?;
            samples.push(BrdfSample {
                i: Vec3::new(r.ix, r.iy, r.iz),
                o: Vec3::new(r.ox, r.oy, r.oz),
                channel,
                value: r.value,
            });
        }
        BrdfTable::new(samples)
    }

    pub fn to_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for s in &self.samples {
            w.serialize(CsvRow {
                ix: s.i.x,
                iy: s.i.y,
                iz: s.i.z,
                ox: s.o.x,
                oy: s.o.y,
                oz: s.o.z,
                channel: s.channel.name().into(),
                value: s.value,
            })?;
        }
        w.flush().map_err(io_err("writing BRDF table"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(io_err(format!("opening {}", path.display())))?;
        BrdfTable::from_csv(f)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(io_err(format!("creating {}", path.display())))?;
        self.to_csv(std::io::BufWriter::new(f))
    }

    /// Evaluates `brdf` on `pairs` random direction pairs for every listed
    /// channel (uniform on the upper hemisphere).
    pub fn synthesize(brdf: &SurfaceBrdf, channels: &[Channel], pairs: usize, rng: &mut impl Rng) -> BrdfTable {
        let n = Vec3::z();
        let mut samples = Vec::with_capacity(pairs * channels.len());
        for _ in 0..pairs {
            let (i, o) = (upper_hemisphere(rng), upper_hemisphere(rng));
            for &c in channels {
                samples.push(BrdfSample {
                    i,
                    o,
                    channel: c,
                    value: brdf.eval(c, &i, &o, &n),
                });
            }
        }
        BrdfTable { samples }
    }
}

fn upper_hemisphere(rng: &mut impl Rng) -> Vec3 {
    let z: f64 = rng.gen_range(0.05..1.0);
    let phi: f64 = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let s = (1.0 - z * z).sqrt();
    Vec3::new(s * phi.cos(), s * phi.sin(), z)
}

fn model(brdf: &SurfaceBrdf, s: &BrdfSample) -> f64 {
    lobe(brdf.albedo[s.channel.index()], brdf.roughness, brdf.metallic, s.i.z, s.o.z, s.i.dot(&s.o))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelResidual {
    pub channel: Channel,
    pub samples: usize,
    /// Root mean square of the log-space residual.
    pub rms: f64,
}

/// Log-space RMS residual per channel present in the table.
pub fn residual(table: &BrdfTable, brdf: &SurfaceBrdf) -> Vec<ChannelResidual> {
    let mut sq = [0.0; 4];
    let mut cnt = [0usize; 4];
    for s in &table.samples {
        let r = (1.0 + model(brdf, s)).ln() - (1.0 + s.value).ln();
        sq[s.channel.index()] += r * r;
        cnt[s.channel.index()] += 1;
    }
    Channel::ALL
        .into_iter()
        .filter(|c| cnt[c.index()] > 0)
        .map(|c| ChannelResidual {
            channel: c,
            samples: cnt[c.index()],
            rms: (sq[c.index()] / cnt[c.index()] as f64).sqrt(),
        })
        .collect()
}

/// RMS of the log-space residual over every sample.
pub fn total_residual(table: &BrdfTable, brdf: &SurfaceBrdf) -> f64 {
    let res = residual(table, brdf);
    let n: usize = res.iter().map(|r| r.samples).sum();
    if n == 0 {
        return 0.0;
    }
    (res.iter().map(|r| r.rms * r.rms * r.samples as f64).sum::<f64>() / n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    pub steps: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (exponential decay).
    pub lr_final_fraction: f64,
    pub seed: u64,
    pub adam: AdamParams,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            restarts: 8,
            steps: 1500,
            lr: 0.05,
            lr_final_fraction: 0.01,
            seed: 0,
            adam: AdamParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub brdf: SurfaceBrdf,
    pub residuals: Vec<ChannelResidual>,
    pub total_rms: f64,
    pub samples: usize,
    pub restarts: usize,
    pub best_restart: usize,
    /// False when the data do not support a specular lobe (a purely diffuse
    /// table). The reported model is then the diffuse equivalent with
    /// `m = 0` and albedo `(1 - m) ρ`, since metallic and albedo only enter
    /// through that product.
    pub specular_identified: bool,
}

impl FitReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::save_json(path, self)
    }
}

/// Parameter layout: `[raw σ, logit m, logit ρ_R, logit ρ_G, logit ρ_B, logit ρ_NIR]`.
fn unpack(x: &[f64; 6]) -> SurfaceBrdf {
    SurfaceBrdf {
        albedo: [2, 3, 4, 5].map(|k| param::sigmoid(x[k])),
        roughness: param::roughness_from_raw(x[0]),
        metallic: param::sigmoid(x[1]),
    }
}

fn pack(b: &SurfaceBrdf) -> [f64; 6] {
    let mut x = [0.0; 6];
    x[0] = param::raw_from_roughness(b.roughness.clamp(0.045, 0.995));
    x[1] = param::logit(b.metallic.clamp(0.005, 0.995));
    for c in 0..4 {
        x[2 + c] = param::logit(b.albedo[c].clamp(0.005, 0.995));
    }
    x
}

fn loss(table: &BrdfTable, brdf: &SurfaceBrdf) -> f64 {
    let s: f64 = table
        .samples
        .iter()
        .map(|s| {
            let r = (1.0 + model(brdf, s)).ln() - (1.0 + s.value).ln();
            r * r
        })
        .sum();
    s / table.len().max(1) as f64
}

fn loss_grad(table: &BrdfTable, x: &[f64; 6]) -> (f64, [f64; 6]) {
    let b = unpack(x);
    let mut g = [0.0; 6];
    let mut l = 0.0;
    let inv = 1.0 / table.len() as f64;
    for s in &table.samples {
        let c = s.channel.index();
        let lg = lobe_grad(b.albedo[c], b.roughness, b.metallic, s.i.z, s.o.z, s.i.dot(&s.o));
        let r = (1.0 + lg.value).ln() - (1.0 + s.value).ln();
        l += r * r * inv;
        let dr = 2.0 * r * inv / (1.0 + lg.value);
        g[0] += dr * lg.d_roughness;
        g[1] += dr * lg.d_metallic;
        g[2 + c] += dr * lg.d_albedo;
    }
    g[0] *= param::roughness_slope(x[0]);
    g[1] *= param::sigmoid_slope(b.metallic);
    for c in 0..4 {
        g[2 + c] *= param::sigmoid_slope(b.albedo[c]);
    }
    (l, g)
}

/// Levenberg–Marquardt refinement of an Adam result; the albedo/metallic
/// trade-off forms a curved valley that first-order steps cross slowly.
fn polish(table: &BrdfTable, start: [f64; 6], iters: usize) -> [f64; 6] {
    let mut x = start;
    let mut l = loss(table, &unpack(&x));
    let mut lambda = 1e-3;
    for _ in 0..iters {
        let b = unpack(&x);
        let slope = [
            param::roughness_slope(x[0]),
            param::sigmoid_slope(b.metallic),
            param::sigmoid_slope(b.albedo[0]),
            param::sigmoid_slope(b.albedo[1]),
            param::sigmoid_slope(b.albedo[2]),
            param::sigmoid_slope(b.albedo[3]),
        ];
        let mut jtj = Matrix6::zeros();
        let mut jtr = Vector6::zeros();
        for s in &table.samples {
            let c = s.channel.index();
            let lg = lobe_grad(b.albedo[c], b.roughness, b.metallic, s.i.z, s.o.z, s.i.dot(&s.o));
            let r = (1.0 + lg.value).ln() - (1.0 + s.value).ln();
            let k = 1.0 / (1.0 + lg.value);
            let mut j = Vector6::zeros();
            j[0] = k * lg.d_roughness * slope[0];
            j[1] = k * lg.d_metallic * slope[1];
            j[2 + c] = k * lg.d_albedo * slope[2 + c];
            jtj += j * j.transpose();
            jtr += j * r;
        }
        let mut improved = false;
        for _ in 0..10 {
            let mut a = jtj;
            for d in 0..6 {
                a[(d, d)] += lambda * (jtj[(d, d)] + 1e-12);
            }
            let Some(step) = a.lu().solve(&(-jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut xn = x;
            for d in 0..6 {
                xn[d] = (x[d] + step[d]).clamp(-15.0, 15.0);
            }
            let ln = loss(table, &unpack(&xn));
            if ln < l {
                x = xn;
                l = ln;
                lambda = (lambda * 0.3).max(1e-9);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    x
}

fn descend(table: &BrdfTable, start: [f64; 6], cfg: &FitConfig) -> [f64; 6] {
    let mut x = start;
    let mut best = (loss(table, &unpack(&x)), x);
    let mut opt = Adam::new(6);
    for step in 0..cfg.steps {
        let (l, g) = loss_grad(table, &x);
        if l < best.0 {
            best = (l, x);
        }
        let lr = cfg.lr * cfg.lr_final_fraction.powf(step as f64 / cfg.steps.max(1) as f64);
        if let Some(d) = opt.delta(&g, lr, &cfg.adam) {
            for (p, dx) in x.iter_mut().zip(d) {
                *p = (*p + dx).clamp(-15.0, 15.0);
            }
        }
    }
    if loss(table, &unpack(&x)) < best.0 {
        x
    } else {
        best.1
    }
}

fn check_table(table: &BrdfTable, min_channels: usize) -> Result<()> {
    if table.len() < 16 || table.channels().len() < min_channels {
        return Err(Error::InvalidParameter(format!(
            "need at least 16 samples over {min_channels} or more channels, got {} over {}",
            table.len(),
            table.channels().len()
        )));
    }
    let first = &table.samples[0];
    let single = table
        .samples
        .iter()
        .all(|s| (s.i - first.i).norm() < 1e-9 && (s.o - first.o).norm() < 1e-9);
    if single {
        return Err(Error::Unidentifiable("every sample shares one direction pair".into()));
    }
    Ok(())
}

fn restart_start(table: &BrdfTable, start: usize, seed: u64) -> [f64; 6] {
    if start == 0 {
        // diffuse guess from the median value of each channel
        let mut b = SurfaceBrdf {
            albedo: [0.5; 4],
            roughness: 0.5,
            metallic: 0.1,
        };
        for c in table.channels() {
            let mut v: Vec<f64> = table.samples.iter().filter(|s| s.channel == c).map(|s| s.value).collect();
            v.sort_by(f64::total_cmp);
            b.albedo[c.index()] = (v[v.len() / 2] * std::f64::consts::PI).clamp(0.01, 0.99);
        }
        return pack(&b);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(start as u64);
    pack(&SurfaceBrdf {
        albedo: [0; 4].map(|_| rng.gen_range(0.02..0.98)),
        roughness: rng.gen_range(0.05..0.95),
        metallic: rng.gen_range(0.0..1.0),
    })
}

fn best_of(table: &BrdfTable, starts: Vec<[f64; 6]>, cfg: &FitConfig) -> (usize, SurfaceBrdf) {
    let fits: Vec<(f64, SurfaceBrdf)> = starts
        .into_par_iter()
        .map(|s| {
            let b = unpack(&polish(table, descend(table, s, cfg), 100));
            (loss(table, &b), b)
        })
        .collect();
    let mut best = 0;
    for (k, f) in fits.iter().enumerate() {
        if f.0 < fits[best].0 {
            best = k;
        }
    }
    (best, fits[best].1)
}

/// Loss increase tolerated when replacing a fit by its diffuse equivalent.
const DIFFUSE_EQUIVALENCE_TOL: f64 = 1e-7;

fn diffuse_equivalent(brdf: &SurfaceBrdf) -> SurfaceBrdf {
    SurfaceBrdf {
        albedo: brdf.albedo.map(|a| a * (1.0 - brdf.metallic)),
        metallic: 0.0,
        ..*brdf
    }
}

fn report(table: &BrdfTable, brdf: SurfaceBrdf, restarts: usize, best_restart: usize) -> FitReport {
    let d = diffuse_equivalent(&brdf);
    let specular_identified = loss(table, &d) > loss(table, &brdf) + DIFFUSE_EQUIVALENCE_TOL;
    let brdf = if specular_identified { brdf } else { d };
    FitReport {
        residuals: residual(table, &brdf),
        total_rms: total_residual(table, &brdf),
        samples: table.len(),
        restarts,
        best_restart,
        specular_identified,
        brdf,
    }
}

/// Shared roughness and metallic across channels, multi-start Adam.
/// Albedo of channels absent from the table is left at 0.5.
pub fn fit(table: &BrdfTable, config: &FitConfig) -> Result<FitReport> {
    check_table(table, 2)?;
    let restarts = config.restarts.max(1);
    let starts = (0..restarts).map(|k| restart_start(table, k, config.seed)).collect();
    let (best, mut brdf) = best_of(table, starts, config);
    let present = table.channels();
    for c in Channel::ALL {
        if !present.contains(&c) {
            brdf.albedo[c.index()] = 0.5;
        }
    }
    Ok(report(table, brdf, restarts, best))
}

/// Control fit: every channel gets its own roughness and metallic. `shared`
/// (usually the result of [`fit`]) joins the restarts so each per-channel
/// loss is never worse than the shared model's.
pub fn fit_independent(
    table: &BrdfTable,
    config: &FitConfig,
    shared: Option<&SurfaceBrdf>,
) -> Result<Vec<(Channel, FitReport)>> {
    check_table(table, 1)?;
    table
        .channels()
        .into_iter()
        .map(|c| {
            let t = table.channel(c);
            let restarts = config.restarts.max(1);
            let mut starts: Vec<[f64; 6]> = (0..restarts).map(|k| restart_start(&t, k, config.seed)).collect();
            if let Some(s) = shared {
                starts.push(pack(s));
            }
            let (best, mut brdf) = best_of(&t, starts, config);
            if let Some(s) = shared {
                if loss(&t, s) <= loss(&t, &brdf) {
                    brdf = *s;
                }
            }
            Ok((c, report(&t, brdf, restarts, best)))
        })
        .collect()
}

/// Log-space RMS over all samples when every channel uses its own fit.
pub fn independent_total_rms(fits: &[(Channel, FitReport)]) -> f64 {
    let (mut sq, mut n) = (0.0, 0usize);
    for (_, r) in fits {
        sq += r.total_rms * r.total_rms * r.samples as f64;
        n += r.samples;
    }
    if n == 0 {
        0.0
    } else {
        (sq / n as f64).sqrt()
    }
}

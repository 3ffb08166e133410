//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.
//!
//! `cargo test -p surfacenet-model --test acceptance -- 2 5` runs a subset.

use std::f64::consts::{LN_2, PI};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfacenet_core::dataset::{
    generate_records, load_strip, max_stored_error, save_strip, RealImageRecord, SvbrdfRecord, TileOrder,
};
use surfacenet_core::metrics::rmse;
use surfacenet_core::renderer::pixel_position;
use surfacenet_core::{
    generate_procedural, ggx_distribution, render_flash, rmse_maps, rmse_renderings, validate_maps, LightSetup,
    MaterialMaps, Pattern, Raster, ValidateOptions, Vec3,
};
use surfacenet_model::checkpoint::{load_checkpoint, save_checkpoint};
use surfacenet_model::convert::maps_to_tensors;
use surfacenet_model::discriminator::{
    build_discriminator, discriminator_input, stack_maps, DiscriminatorConfig, DiscriminatorNetwork,
};
use surfacenet_model::evaluation::{run_ablation, AblationData, AblationPlan, AblationRow, ExperimentConfig};
use surfacenet_model::generator::{build_generator, GeneratorConfig, GeneratorNetwork};
use surfacenet_model::graph::{Gradients, Graph, Var};
use surfacenet_model::losses::{
    discriminator_loss, discriminator_loss_var, generator_adv_loss, generator_adv_loss_var, l1_map_loss, ms_ssim,
    supervised_loss_var, total_generator_loss, total_generator_loss_var, LossWeights, MSSSIM_SIGMA,
    MSSSIM_WEIGHTS, MSSSIM_WINDOW,
};
use surfacenet_model::params::{ParamId, ParamStore};
use surfacenet_model::tensor::Tensor;
use surfacenet_model::trainer::{
    synthetic_input, train, train_step_real, Stream, TrainConfig, TrainOptions, TrainState,
};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------
// 1. shape contract

fn shape_contract() -> Check {
    let desk = build_generator::<f32>(&GeneratorConfig::desk()).map_err(err)?;
    let mut sizes = Vec::new();
    for res in [64usize, 128, 256, 512] {
        let rec = &generate_records(1, &[Pattern::Perlin], res, 3).map_err(err)?[0];
        let out = desk.predict(&[&rec.render.linear]).map_err(err)?;
        let m = &out[0];
        ensure!(m.resolution() == (res, res), "desk generator at {res}: got {:?}", m.resolution());
        let channels = [m.diffuse.channels(), m.normal.channels(), m.roughness.channels(), m.specular.channels()];
        ensure!(channels == [3, 3, 1, 3], "channel counts {channels:?}");
        let report = validate_maps(m, ValidateOptions::default());
        ensure!(report.passed(), "desk output at {res} fails validation: {report}");
        sizes.push(res);
    }
    let large = build_generator::<f32>(&GeneratorConfig::large()).map_err(err)?;
    let rec = &generate_records(1, &[Pattern::Bricks], 256, 4).map_err(err)?[0];
    let out = large.predict(&[&rec.render.linear]).map_err(err)?;
    ensure!(out[0].resolution() == (256, 256), "large generator at 256: {:?}", out[0].resolution());

    for cfg in [DiscriminatorConfig::large(), DiscriminatorConfig::desk()] {
        let d = build_discriminator::<f32>(&cfg).map_err(err)?;
        let scores = d.score_maps(&[&rec.maps]).map_err(err)?;
        ensure!(scores.shape() == [1, 1, 14, 14], "discriminator on 256x256x10: {:?}", scores.shape());
        ensure!(scores.data().iter().all(|&s| s > 0.0 && s < 1.0), "scores outside (0, 1)");
    }
    Ok(format!(
        "desk G at {sizes:?} and large G at 256 give 4 maps at input size; D(256x256x10) -> 14x14x1"
    ))
}

// ---------------------------------------------------------------------------
// 2. loss oracles

/// Direct-loop MS-SSIM: full 2-D Gaussian window, valid positions, 2x2 mean pooling.
fn reference_ms_ssim(a: &[f64], b: &[f64], size: usize) -> f64 {
    let k = MSSSIM_WINDOW;
    let r = (k - 1) as f64 / 2.0;
    let mut win = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            win[i * k + j] = (-(dx * dx + dy * dy) / (2.0 * MSSSIM_SIGMA * MSSSIM_SIGMA)).exp();
        }
    }
    let norm: f64 = win.iter().sum();
    win.iter_mut().for_each(|w| *w /= norm);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));

    let mut levels = 0;
    while levels < 5 && k << levels <= size {
        levels += 1;
    }
    let weights: Vec<f64> = MSSSIM_WEIGHTS[..levels].to_vec();
    let wsum: f64 = weights.iter().sum();

    let (mut x, mut y, mut n) = (a.to_vec(), b.to_vec(), size);
    let mut result = 1.0;
    for (s, w) in weights.iter().enumerate() {
        let m = n - k + 1;
        let (mut ssim_sum, mut cs_sum) = (0.0, 0.0);
        for oy in 0..m {
            for ox in 0..m {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..k {
                    for j in 0..k {
                        let g = win[i * k + j];
                        let (p, q) = (x[(oy + i) * n + ox + j], y[(oy + i) * n + ox + j]);
                        mx += g * p;
                        my += g * q;
                        xx += g * p * p;
                        yy += g * q * q;
                        xy += g * p * q;
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                let cs = (2.0 * cov + c2) / (vx + vy + c2);
                cs_sum += cs;
                ssim_sum += cs * (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            }
        }
        let count = (m * m) as f64;
        let term = if s + 1 == levels { ssim_sum / count } else { cs_sum / count };
        result *= term.max(0.0).powf(w / wsum);
        if s + 1 < levels {
            let h = n / 2;
            let pool = |v: &[f64]| -> Vec<f64> {
                let mut o = vec![0.0; h * h];
                for py in 0..h {
                    for px in 0..h {
                        o[py * h + px] = 0.25
                            * (v[2 * py * n + 2 * px]
                                + v[2 * py * n + 2 * px + 1]
                                + v[(2 * py + 1) * n + 2 * px]
                                + v[(2 * py + 1) * n + 2 * px + 1]);
                    }
                }
                o
            };
            x = pool(&x);
            y = pool(&y);
            n = h;
        }
    }
    result
}

fn loss_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let size = 64;
    let mut worst: f64 = 0.0;
    for pair in 0..20 {
        // mix of smooth structure and noise so every scale carries signal
        let base = generate_procedural(pair as u64, Pattern::ALL[pair % 5], size).map_err(err)?;
        let a = base.roughness.clone();
        let noise = 0.05 + 0.3 * (pair as f32 / 20.0);
        let noisy = a.data().iter().map(|&v| (v + noise * (rng.random::<f32>() - 0.5)).clamp(0.0, 1.0)).collect();
        let b = Raster::from_vec(size, size, 1, noisy).map_err(err)?;
        let b = if pair % 4 == 3 { Raster::from_fn(size, size, 1, |_, _, _| rng.random::<f32>()) } else { b };
        let ours = ms_ssim(&a, &b).map_err(err)?;
        let f64s = |r: &Raster| r.data().iter().map(|&v| v as f64).collect::<Vec<_>>();
        let oracle = reference_ms_ssim(&f64s(&a), &f64s(&b), size);
        let diff = (ours - oracle).abs();
        ensure!(diff <= 1e-4, "pair {pair}: ms_ssim {ours} vs reference {oracle}");
        worst = worst.max(diff);
    }

    // hand-computed 2x2 cases
    let maps = |d: [f32; 4], r: [f32; 4]| -> MaterialMaps {
        let rgb = |v: [f32; 4]| Raster::from_vec(2, 2, 3, v.iter().flat_map(|&x| [x, x, x]).collect()).unwrap();
        MaterialMaps {
            diffuse: rgb(d),
            normal: Raster::from_pixel(2, 2, &[0.5, 0.5, 1.0]),
            roughness: Raster::from_vec(2, 2, 1, r.to_vec()).unwrap(),
            specular: rgb([0.25; 4]),
        }
    };
    let p = maps([0.0, 0.25, 0.5, 1.0], [0.5, 0.5, 0.5, 0.5]);
    let q = maps([0.5, 0.75, 0.0, 0.5], [0.0, 0.0, 0.0, 1.0]);
    let l1 = l1_map_loss(&p, &q).map_err(err)?;
    ensure!(l1.diffuse == 0.5, "l1 diffuse {} != 0.5", l1.diffuse);
    ensure!(l1.roughness == 0.5, "l1 roughness {} != 0.5", l1.roughness);
    ensure!(l1.normal == 0.0 && l1.specular == 0.0, "l1 of equal maps is not 0");
    let rm = rmse_maps(&p, &q).map_err(err)?;
    ensure!(rm.roughness == 0.5, "rmse roughness {} != 0.5", rm.roughness);
    ensure!(rm.diffuse == 0.5, "rmse diffuse {} != 0.5", rm.diffuse);
    ensure!(rm.normal == 0.0, "rmse of equal normals {}", rm.normal);
    let a = Raster::from_vec(2, 2, 1, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
    let z = Raster::new(2, 2, 1);
    ensure!(rmse(&a, &z).map_err(err)? == 0.5, "rmse [0,0,0,1] vs 0 != 0.5");

    // adversarial arithmetic
    let eq = discriminator_loss(0.5, 0.5);
    ensure!((eq - 2.0 * LN_2).abs() <= 1e-6, "equilibrium D loss {eq} != 2 ln 2");
    for (dr, df) in [(0.9, 0.1), (0.3, 0.6), (0.99, 0.01)] {
        let want = -(f64::ln(dr) + f64::ln(1.0 - df));
        let got = discriminator_loss(dr, df);
        ensure!((got - want).abs() <= 1e-6, "D loss({dr}, {df}) = {got}, want {want}");
    }
    for d in [0.5, 0.2, 0.95] {
        let got = generator_adv_loss(d);
        ensure!((got + d.ln()).abs() <= 1e-6, "G adversarial loss({d}) = {got}");
    }
    let w = LossWeights::default();
    let tot = total_generator_loss(1.25, LN_2, &w);
    ensure!((tot - (1.25 + w.alpha * LN_2)).abs() <= 1e-6, "total {tot}");
    Ok(format!("ms-ssim max |diff| {worst:.2e} over 20 pairs; 2x2 L1/RMSE exact; D(0.5,0.5) = 2 ln 2"))
}

// ---------------------------------------------------------------------------
// 3. renderer oracles

fn renderer_oracles() -> Check {
    for c in [0.0, 0.3, 0.7, 1.0] {
        let d = ggx_distribution(1.0, c);
        ensure!((d - 1.0 / PI).abs() <= 1e-9, "GGX(roughness 1, cos {c}) = {d}");
    }

    let albedo = [0.5f32, 0.25, 0.75];
    let m = MaterialMaps::uniform(5, 5, albedo, Vec3::Z, 0.6, [0.0; 3]).map_err(err)?;
    let img = render_flash(&m, &LightSetup::centered_flash()).map_err(err)?;
    let LightSetup::Flash { position, intensity } = LightSetup::centered_flash() else { unreachable!() };
    for c in 0..3 {
        // flash straight above: cos = 1, distance = height
        let want = albedo[c] as f64 / PI * intensity / (position.z * position.z);
        let got = img.linear.get(2, 2, c) as f64;
        ensure!((got - want).abs() <= 1e-6, "centre pixel channel {c}: {got} vs {want}");
    }
    let p = pixel_position(0, 0, 5, 5);
    let to_light = Vec3::new(position.x - p.x, position.y - p.y, position.z);
    let d2 = to_light.dot(to_light);
    let cos = to_light.z / d2.sqrt();
    let want = albedo[0] as f64 / PI * cos * intensity / d2;
    let corner = img.linear.get(0, 0, 0) as f64;
    // view and light coincide, so Fresnel reduces to f0 = 0
    ensure!((corner - want).abs() <= 1e-6, "corner pixel {corner} vs {want}");

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 2_000_000;
    let mut norms = Vec::new();
    for rough in [0.3, 0.6, 1.0] {
        // stratified in cos(theta_h): integral = 2 pi * int_0^1 D(mu) mu dmu
        let sum: f64 = (0..n)
            .map(|i| {
                let mu = (i as f64 + rng.random::<f64>()) / n as f64;
                ggx_distribution(rough, mu) * mu
            })
            .sum();
        let est = 2.0 * PI * sum / n as f64;
        ensure!((est - 1.0).abs() <= 0.02, "GGX normalization at roughness {rough}: {est}");
        norms.push(est);
    }

    let sym = Raster::from_fn(16, 16, 1, |x, y, _| {
        let dx = (x as f32 - 7.5).abs();
        0.2 + 0.04 * dx + 0.01 * y as f32
    });
    let maps = MaterialMaps {
        diffuse: sym.expand_channels(3).map(|v| v * 0.8),
        normal: Raster::from_pixel(16, 16, &[0.5, 0.5, 1.0]),
        roughness: sym.clone(),
        specular: sym.expand_channels(3).map(|v| 0.1 + 0.2 * v),
    };
    let left = render_flash(&maps, &LightSetup::flash_at(Vec3::new(-0.4, 0.3, 1.0))).map_err(err)?;
    let right = render_flash(&maps, &LightSetup::flash_at(Vec3::new(0.4, 0.3, 1.0))).map_err(err)?;
    let asym = left.linear.max_abs_diff(&right.linear.mirror_horizontal());
    ensure!(asym <= 1e-6, "mirror-light asymmetry {asym}");
    Ok(format!(
        "D(1) = 1/pi; centre/corner Lambertian exact; NDF norms {:.4} {:.4} {:.4}; mirror diff {asym:.1e}",
        norms[0], norms[1], norms[2]
    ))
}

// ---------------------------------------------------------------------------
// 4. gradient checks

const FD_STEP: f64 = 1e-3;
const FD_TOLERANCE: f64 = 1e-2;
/// Below this magnitude both gradients are treated as zero.
const FD_FLOOR: f64 = 1e-6;
/// A second, much smaller step on about `FD_FINE_ENTRIES` of the sampled entries. It does not
/// decide the criterion; it separates autodiff errors from the effect of
/// ReLU, |x| and clamp kinks inside the `FD_STEP` interval.
const FD_FINE_STEP: f64 = 1e-6;
const FD_FINE_ENTRIES: usize = 100;

/// Every sampled entry must satisfy `|a - n| / max(|a|, |n|) <= FD_TOLERANCE`.
/// The same ratio over the whole sampled vector is reported alongside.
struct GradStats {
    checked: usize,
    total: usize,
    diff_sq: f64,
    analytic_sq: f64,
    numeric_sq: f64,
    entries_within: usize,
    worst: Option<(f64, String)>,
    fine_checked: usize,
    fine_worst: f64,
}

impl GradStats {
    fn relative(&self) -> f64 {
        let scale = self.analytic_sq.max(self.numeric_sq).sqrt();
        if scale < FD_FLOOR { 0.0 } else { self.diff_sq.sqrt() / scale }
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < FD_FLOOR { 0.0 } else { (a - n).abs() / scale }
}

fn sample_entries(store: &ParamStore<f64>, fraction: f64, seed: u64) -> Vec<(ParamId, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::new();
    for id in store.ids() {
        for j in 0..store.get(id).len() {
            if rng.random::<f64>() < fraction {
                picks.push((id, j));
            }
        }
    }
    picks
}

/// Compares `grads` with central differences of `loss` for a sampled subset of the parameters.
fn finite_difference<N>(
    net: &mut N,
    params: fn(&mut N) -> &mut ParamStore<f64>,
    grads: &Gradients<f64>,
    loss: &dyn Fn(&N) -> f64,
    seed: u64,
) -> GradStats {
    let picks = sample_entries(params(net), 0.05, seed);
    let total = params(net).count();
    let mut stats = GradStats {
        checked: 0,
        total,
        diff_sq: 0.0,
        analytic_sq: 0.0,
        numeric_sq: 0.0,
        entries_within: 0,
        worst: None,
        fine_checked: 0,
        fine_worst: 0.0,
    };
    let central = |net: &mut N, id: ParamId, j: usize, h: f64| {
        let orig = params(net).get(id).data()[j];
        params(net).get_mut(id).data_mut()[j] = orig + h;
        let up = loss(net);
        params(net).get_mut(id).data_mut()[j] = orig - h;
        let down = loss(net);
        params(net).get_mut(id).data_mut()[j] = orig;
        (up - down) / (2.0 * h)
    };
    let fine_stride = picks.len().div_ceil(FD_FINE_ENTRIES).max(1);
    let mut worst = 0.0;
    for (i, (id, j)) in picks.into_iter().enumerate() {
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
        let numeric = central(net, id, j, FD_STEP);
        stats.diff_sq += (analytic - numeric).powi(2);
        stats.analytic_sq += analytic * analytic;
        stats.numeric_sq += numeric * numeric;
        let rel = relative_error(analytic, numeric);
        if rel <= FD_TOLERANCE {
            stats.entries_within += 1;
        }
        if rel > worst {
            worst = rel;
            let name = params(net).name(id).to_string();
            stats.worst = Some((rel, format!("{name}[{j}]: autodiff {analytic:.6e} fd {numeric:.6e}")));
        }
        if i % fine_stride == 0 {
            let fine = central(net, id, j, FD_FINE_STEP);
            stats.fine_worst = stats.fine_worst.max(relative_error(analytic, fine));
            stats.fine_checked += 1;
        }
        stats.checked += 1;
    }
    stats
}

fn gen_params(n: &mut GeneratorNetwork<f64>) -> &mut ParamStore<f64> {
    &mut n.params
}

fn disc_params(n: &mut DiscriminatorNetwork<f64>) -> &mut ParamStore<f64> {
    &mut n.params
}

fn fd_input(res: usize, n: usize, seed: u64) -> (Tensor<f64>, Vec<MaterialMaps>) {
    let recs = generate_records(n, &Pattern::ALL, 32.max(res), seed).unwrap();
    let maps: Vec<MaterialMaps> = recs
        .iter()
        .map(|r| if res < 32 { r.maps.crop(0, 0, res, res).unwrap() } else { r.maps.clone() })
        .collect();
    let imgs: Vec<Raster> = recs
        .iter()
        .map(|r| {
            let img = r.render.linear.map(|v| v.clamp(0.0, 1.0));
            if res < 32 { img.crop(0, 0, res, res).unwrap() } else { img }
        })
        .collect();
    let recs: Vec<SvbrdfRecord> = imgs
        .into_iter()
        .zip(&maps)
        .map(|(img, m)| SvbrdfRecord {
            id: String::new(),
            render: surfacenet_core::RenderedImage::from_linear(img),
            maps: m.clone(),
        })
        .collect();
    let refs: Vec<&SvbrdfRecord> = recs.iter().collect();
    (synthetic_input(&refs).unwrap().cast(), maps)
}

fn summarize(label: &str, s: &GradStats, started: Instant) -> std::result::Result<String, String> {
    let worst = s.worst.as_ref().map_or(String::from("none"), |(r, w)| format!("{r:.2e} at {w}"));
    let line = format!(
        "{label}: {}/{} params, {}/{} entries within {FD_TOLERANCE}, vector relative error {:.2e}, \
         worst entry {worst}; with h={FD_FINE_STEP:e} {} spread entries agree within {:.1e} [{:.0}s]",
        s.checked,
        s.total,
        s.entries_within,
        s.checked,
        s.relative(),
        s.fine_checked,
        s.fine_worst,
        started.elapsed().as_secs_f64()
    );
    if s.checked > 0 && s.entries_within == s.checked {
        Ok(line)
    } else {
        Err(line)
    }
}

/// Supervised + adversarial generator loss in f64.
fn generator_total(
    gen: &GeneratorNetwork<f64>,
    disc: Option<&DiscriminatorNetwork<f64>>,
    input: &Tensor<f64>,
    gt: &[Tensor<f64>; 4],
    w: &LossWeights,
    g: &Graph<f64>,
) -> f64 {
    generator_total_var(gen, disc, input, gt, w, g).value().item()
}

fn generator_total_var<'g>(
    gen: &GeneratorNetwork<f64>,
    disc: Option<&DiscriminatorNetwork<f64>>,
    input: &Tensor<f64>,
    gt: &[Tensor<f64>; 4],
    w: &LossWeights,
    g: &'g Graph<f64>,
) -> Var<'g, f64> {
    let out = gen.forward(g, &g.constant(input.clone())).unwrap();
    let gt = gt.clone().map(|t| g.constant(t));
    let sup = supervised_loss_var(&out.maps, &gt, w).unwrap().total;
    let adv = disc.map(|d| generator_adv_loss_var(&d.discriminate(g, &discriminator_input(&out.maps)).unwrap()));
    total_generator_loss_var(Some(&sup), adv.as_ref(), w).unwrap()
}

fn gradient_checks() -> Check {
    let mut lines = Vec::new();
    let mut failed = Vec::new();

    // desk generator on 8x8 inputs; the window-based and patch terms need larger images
    let started = Instant::now();
    let mut gcfg = GeneratorConfig::desk();
    gcfg.input_multiple = 8;
    let mut gen = build_generator::<f64>(&gcfg).map_err(err)?;
    let (input, maps) = fd_input(8, 1, 21);
    let refs: Vec<&MaterialMaps> = maps.iter().collect();
    let gt = maps_to_tensors::<f64>(&refs).map_err(err)?;
    let w8 = LossWeights::l1_only();
    let grads = {
        let g = Graph::new();
        let loss = generator_total_var(&gen, None, &input, &gt, &w8, &g);
        g.backward(&loss)
    };
    let stats = finite_difference(
        &mut gen,
        gen_params,
        &grads,
        &|n| generator_total(n, None, &input, &gt, &w8, &Graph::no_grad()),
        1,
    );
    match summarize("desk G 8x8 (L1)", &stats, started) {
        Ok(l) => lines.push(l),
        Err(e) => failed.push(e),
    }

    // desk discriminator loss at its smallest 64-aligned input
    let started = Instant::now();
    let mut disc = build_discriminator::<f64>(&DiscriminatorConfig::desk()).map_err(err)?;
    let real_maps = generate_records(2, &Pattern::ALL, 64, 5).map_err(err)?;
    let fake_maps = generate_records(2, &[Pattern::Voronoi, Pattern::Stripes], 64, 6).map_err(err)?;
    let real = stack_maps::<f64>(&real_maps.iter().map(|r| &r.maps).collect::<Vec<_>>()).map_err(err)?;
    let fake = stack_maps::<f64>(&fake_maps.iter().map(|r| &r.maps).collect::<Vec<_>>()).map_err(err)?;
    // real and fake share one forward pass; the loss is assembled from the per-sample scores
    let both = Tensor::stack(&[real.clone(), fake.clone()]);
    let d_loss = |d: &DiscriminatorNetwork<f64>| {
        let g = Graph::no_grad();
        let s = d.discriminate(&g, &g.constant(both.clone())).unwrap().value().clone();
        let half = s.len() / 2;
        let r = Tensor::from_vec([half, 1, 1, 1], s.data()[..half].to_vec());
        let f = Tensor::from_vec([half, 1, 1, 1], s.data()[half..].to_vec());
        discriminator_loss_var(&g.constant(r), &g.constant(f)).value().item()
    };
    let grads = {
        let g = Graph::new();
        let r = disc.discriminate(&g, &g.constant(real.clone())).map_err(err)?;
        let f = disc.discriminate(&g, &g.constant(fake.clone())).map_err(err)?;
        let loss = discriminator_loss_var(&r, &f);
        g.backward(&loss)
    };
    let stats = finite_difference(&mut disc, disc_params, &grads, &d_loss, 2);
    match summarize("desk D 64x64 (D loss)", &stats, started) {
        Ok(l) => lines.push(l),
        Err(e) => failed.push(e),
    }

    // full generator objective through the desk discriminator
    let started = Instant::now();
    let mut gen = build_generator::<f64>(&GeneratorConfig::tiny()).map_err(err)?;
    let (input, maps) = fd_input(64, 2, 22);
    let refs: Vec<&MaterialMaps> = maps.iter().collect();
    let gt = maps_to_tensors::<f64>(&refs).map_err(err)?;
    let w = LossWeights::default();
    let grads = {
        let g = Graph::new();
        let loss = generator_total_var(&gen, Some(&disc), &input, &gt, &w, &g);
        g.backward(&loss)
    };
    let stats = finite_difference(
        &mut gen,
        gen_params,
        &grads,
        &|n| generator_total(n, Some(&disc), &input, &gt, &w, &Graph::no_grad()),
        3,
    );
    match summarize("G 64x64 + desk D (total G loss)", &stats, started) {
        Ok(l) => lines.push(l),
        Err(e) => failed.push(e),
    }

    if failed.is_empty() {
        Ok(lines.join("; "))
    } else {
        Err(failed.into_iter().chain(lines).collect::<Vec<_>>().join("; "))
    }
}

// ---------------------------------------------------------------------------
// 5. overfit

const OVERFIT_STEPS: u64 = 2000;
const OVERFIT_MAP_RMSE: f64 = 0.05;
const OVERFIT_RENDER_RMSE: f64 = 0.08;

fn mean_errors(net: &GeneratorNetwork<f32>, records: &[SvbrdfRecord]) -> std::result::Result<(f64, f64), String> {
    let imgs: Vec<Raster> = records.iter().map(|r| r.render.linear.map(|v| v.clamp(0.0, 1.0))).collect();
    let preds = net.predict(&imgs.iter().collect::<Vec<_>>()).map_err(err)?;
    let (mut maps, mut rend) = (0.0, 0.0);
    for (p, r) in preds.iter().zip(records) {
        maps += rmse_maps(p, &r.maps).map_err(err)?.mean();
        rend += rmse_renderings(p, &r.maps).map_err(err)?;
    }
    Ok((maps / records.len() as f64, rend / records.len() as f64))
}

fn overfit() -> Check {
    let records = generate_records(8, &Pattern::ALL, 64, 1).map_err(err)?;
    let config = TrainConfig { max_iterations: OVERFIT_STEPS, checkpoint_interval: 0, ..TrainConfig::desk() };
    let state = TrainState::new(config, &GeneratorConfig::desk(), &DiscriminatorConfig::desk()).map_err(err)?;
    let params = state.generator.parameter_count();
    ensure!(params <= 2_000_000, "desk generator has {params} parameters");
    let out = train(state, &records, None, TrainOptions::default()).map_err(err)?;
    ensure!(out.steps.len() as u64 == OVERFIT_STEPS, "ran {} steps", out.steps.len());
    let (maps, rend) = mean_errors(&out.state.generator, &records)?;
    let line = format!("{params} params, {OVERFIT_STEPS} steps: map RMSE {maps:.4} (<= {OVERFIT_MAP_RMSE}), rendering RMSE {rend:.4} (<= {OVERFIT_RENDER_RMSE})");
    ensure!(maps <= OVERFIT_MAP_RMSE && rend <= OVERFIT_RENDER_RMSE, "{line}");
    Ok(line)
}

// ---------------------------------------------------------------------------
// 6. ablation direction

const ABLATION_STEPS: u64 = 2000;

fn ablation_direction() -> Check {
    let train_set = generate_records(40, &Pattern::ALL, 64, 11).map_err(err)?;
    let test_set = generate_records(20, &Pattern::ALL, 64, 12).map_err(err)?;
    let mut base = ExperimentConfig::desk().with_seed(6);
    base.train.max_iterations = ABLATION_STEPS;
    base.train.checkpoint_interval = 0;
    let full = AblationPlan::losses().rows.into_iter().find(|r| r.label == "full (synth)").unwrap();
    let plan = AblationPlan {
        rows: vec![AblationRow { label: "L1".into(), loss: Some(LossWeights::l1_only()), real_stream: Some(false), ..Default::default() }, full],
    };
    let data = AblationData { train: &train_set, real: None, test: &test_set };
    let table = run_ablation(&plan, &base, &data, None).map_err(err)?;
    let score = |i: usize| -> std::result::Result<f64, String> {
        table[i].1.as_ref().map(|r| r.mean_map_rmse()).map_err(|e| format!("row {}: {e}", table[i].0))
    };
    let (l1, full) = (score(0)?, score(1)?);
    let line = format!("held-out mean map RMSE: full {full:.4}, L1-only {l1:.4} ({ABLATION_STEPS} steps each)");
    ensure!(full <= l1, "{line}");
    Ok(line)
}

// ---------------------------------------------------------------------------
// 7. determinism and persistence

fn determinism() -> Check {
    let records = generate_records(8, &Pattern::ALL, 64, 2).map_err(err)?;
    let config = TrainConfig { max_iterations: 100, checkpoint_interval: 0, ..TrainConfig::desk() };
    let run = || -> std::result::Result<(Vec<f64>, TrainState), String> {
        let state = TrainState::new(config.clone(), &GeneratorConfig::desk(), &DiscriminatorConfig::desk()).map_err(err)?;
        let out = train(state, &records, None, TrainOptions::default()).map_err(err)?;
        Ok((out.steps.iter().map(|s| s.report.total).collect(), out.state))
    };
    let (a, state) = run()?;
    let (b, _) = run()?;
    ensure!(a.len() == 100, "{} steps", a.len());
    let drift = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    ensure!(drift <= 1e-6, "loss trajectories differ by {drift}");

    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("state.snck");
    save_checkpoint(&state, &path).map_err(err)?;
    let back = load_checkpoint(&path).map_err(err)?;
    let imgs: Vec<&Raster> = records.iter().map(|r| &r.render.linear).collect();
    let p = state.generator.predict(&imgs).map_err(err)?;
    let q = back.generator.predict(&imgs).map_err(err)?;
    let mut fwd: f64 = 0.0;
    for (x, y) in p.iter().zip(&q) {
        for k in surfacenet_core::MapKind::ALL {
            fwd = fwd.max(x.map(k).max_abs_diff(y.map(k)));
        }
    }
    ensure!(fwd <= 1e-7, "checkpoint round trip changes forward outputs by {fwd}");

    let mut strip: f64 = 0.0;
    for (i, r) in generate_records(20, &Pattern::ALL, 64, 13).map_err(err)?.iter().enumerate() {
        let path = dir.path().join(format!("{i}.png"));
        save_strip(r, &path, TileOrder::default()).map_err(err)?;
        let back = load_strip(&path, TileOrder::default()).map_err(err)?;
        strip = strip.max(max_stored_error(&r.maps, &back.maps));
        strip = strip.max(r.render.tone_mapped.max_abs_diff(&back.render.tone_mapped));
    }
    ensure!(strip <= 1.0 / 255.0 + 1e-9, "strip round trip error {strip}");
    Ok(format!(
        "100-step trajectories differ by {drift:.1e}; checkpoint forward diff {fwd:.1e}; strip error {:.3}/255",
        strip * 255.0
    ))
}

// ---------------------------------------------------------------------------
// 8. dual stream

const MIXED_STEPS: u64 = 500;

fn photos(n: usize, res: usize) -> Vec<RealImageRecord> {
    // environment-lit procedural surfaces stand in for unannotated photographs
    let env = surfacenet_core::renderer::random_environment(16, 99);
    generate_records(n, &Pattern::ALL, res, 77)
        .unwrap()
        .into_iter()
        .map(|r| {
            let img = surfacenet_core::render(&r.maps, &env).unwrap();
            RealImageRecord { id: format!("photo/{}", r.id), category: "photo".into(), image: img.linear.map(|v| v.clamp(0.0, 1.0)) }
        })
        .collect()
}

fn dual_stream() -> Check {
    let synth = generate_records(16, &Pattern::ALL, 64, 3).map_err(err)?;
    let real = photos(16, 64);
    let reservoir: Vec<&MaterialMaps> = synth.iter().map(|r| &r.maps).collect();
    let config = TrainConfig { max_iterations: MIXED_STEPS, checkpoint_interval: 0, real_stream_ratio: 0.5, ..TrainConfig::desk() };
    let state = TrainState::new(config.clone(), &GeneratorConfig::desk(), &DiscriminatorConfig::desk()).map_err(err)?;

    // a real-stream update must not depend on any supervised setting
    let batch: Vec<&RealImageRecord> = real[..4].iter().collect();
    let mut fingerprints = Vec::new();
    for loss in [
        LossWeights::default(),
        LossWeights { beta: 50.0, ..LossWeights::default() },
        LossWeights { l1: false, msssim: false, ..LossWeights::default() },
    ] {
        let mut s = state.clone();
        s.config.loss = loss;
        let report = train_step_real(&mut s, &batch, &reservoir).map_err(err)?;
        ensure!(report.l1.is_none() && report.msssim.is_none() && report.supervised.is_none(), "real step reported supervised terms");
        let adv = report.adv_g.ok_or("real step has no adversarial term")?;
        ensure!((report.total - loss.alpha * adv).abs() <= 1e-6 * adv.abs().max(1.0), "real-step total {} != alpha * adv {}", report.total, adv);
        fingerprints.push(s.generator.params.fingerprint());
    }
    ensure!(fingerprints.windows(2).all(|w| w[0] == w[1]), "real-stream generator update depends on supervised weights");
    ensure!(fingerprints[0] != state.generator.params.fingerprint(), "real-stream step did not update the generator");

    let out = train(state, &synth, Some(&real), TrainOptions::default()).map_err(err)?;
    let real_steps = out.steps.iter().filter(|s| s.stream == Stream::Real).count();
    ensure!(out.steps.len() as u64 == MIXED_STEPS, "{} steps", out.steps.len());
    ensure!(real_steps == MIXED_STEPS as usize / 2, "{real_steps} real steps");
    for s in &out.steps {
        ensure!(s.report.is_finite(), "non-finite loss at step {}", s.iteration);
        if s.stream == Stream::Real {
            ensure!(s.report.supervised.is_none(), "supervised term on real step {}", s.iteration);
        }
    }
    ensure!(
        out.state.generator.params.iter().all(|(_, t)| t.all_finite())
            && out.state.discriminator.params.iter().all(|(_, t)| t.all_finite()),
        "non-finite parameters after mixed training"
    );
    let last = out.steps.last().unwrap();
    Ok(format!("{MIXED_STEPS} mixed steps ({real_steps} real), all finite; real updates independent of supervised weights; last {}", last.report))
}

// ---------------------------------------------------------------------------

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "shape contract", budget: Duration::from_secs(60), run: shape_contract },
        Criterion { id: 2, name: "loss oracles", budget: Duration::from_secs(120), run: loss_oracles },
        Criterion { id: 3, name: "renderer oracles", budget: Duration::from_secs(120), run: renderer_oracles },
        Criterion { id: 4, name: "gradient checks", budget: Duration::from_secs(300), run: gradient_checks },
        Criterion { id: 5, name: "overfit", budget: Duration::from_secs(1800), run: overfit },
        Criterion { id: 6, name: "ablation direction", budget: Duration::from_secs(3600), run: ablation_direction },
        Criterion { id: 7, name: "determinism and persistence", budget: Duration::from_secs(300), run: determinism },
        Criterion { id: 8, name: "dual stream", budget: Duration::from_secs(900), run: dual_stream },
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failures = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let over = elapsed > c.budget;
        let (ok, detail) = match result {
            Ok(d) if !over => (true, d),
            Ok(d) => (false, format!("{d}; over the {:?} budget", c.budget)),
            Err(e) => (false, e),
        };
        if !ok {
            failures += 1;
        }
        println!(
            "{} criterion {} ({}) [{:.1}s]: {detail}",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            elapsed.as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}

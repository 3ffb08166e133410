//! Dual-stream adversarial training.
//!
//! Synthetic steps update D on (ground-truth maps, G output) and then G on the
//! supervised loss plus `α` times the adversarial term. Real steps feed
//! unannotated photos: D sees ground-truth synthetic map sets as its real
//! class, and G is updated with the adversarial term alone.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use surfacenet_core::dataset::{RealImageRecord, SvbrdfRecord};
use surfacenet_core::{MaterialMaps, Raster};

use crate::checkpoint::{checkpoint_path, save_checkpoint};
use crate::convert::{maps_to_tensors, rasters_to_tensor};
use crate::discriminator::{build_discriminator, discriminator_input, stack_maps, DiscriminatorConfig, DiscriminatorNetwork};
use crate::error::{io_err, ModelError, Result};
use crate::generator::{build_generator, GeneratorConfig, GeneratorNetwork};
use crate::graph::{Graph, Var};
use crate::losses::{
    discriminator_loss_var, generator_adv_loss_var, supervised_loss_var, total_generator_loss_var, LossReport, LossWeights,
};
use crate::params::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const LARGE_LEARNING_RATE: f64 = 4e-5;
/// Desk runs take a few thousand steps instead of hundreds of thousands.
pub const DESK_LEARNING_RATE: f64 = 1e-3;

/// Decay of the running loss averages.
pub const RUNNING_DECAY: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Synthetic,
    Real,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Synthetic => "synthetic",
            Stream::Real => "real",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Paired (D, G) steps.
    pub max_iterations: u64,
    /// Fraction of steps that consume a real batch.
    pub real_stream_ratio: f64,
    pub seed: u64,
    /// Save every this many steps; 0 saves only at the end.
    pub checkpoint_interval: u64,
    /// D updates before each G update.
    pub discriminator_steps: usize,
    pub loss: LossWeights,
}

impl TrainConfig {
    pub fn large() -> Self {
        TrainConfig {
            learning_rate: LARGE_LEARNING_RATE,
            batch_size: 6,
            max_iterations: 250_000,
            real_stream_ratio: 0.5,
            seed: 0,
            checkpoint_interval: 5_000,
            discriminator_steps: 1,
            loss: LossWeights::default(),
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: DESK_LEARNING_RATE,
            batch_size: 4,
            max_iterations: 2_000,
            checkpoint_interval: 500,
            ..Self::large()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.real_stream_ratio) {
            return err(format!("real_stream_ratio must lie in [0, 1], got {}", self.real_stream_ratio));
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1".into());
        }
        if self.discriminator_steps == 0 {
            return err("discriminator_steps must be at least 1".into());
        }
        self.loss.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::with_learning_rate(self.learning_rate)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Deterministic interleaving: step `i` is real iff
/// `⌊(i+1)·r + φ⌋ > ⌊i·r + φ⌋`, with the phase `φ ∈ [0, 1)` drawn from the seed.
/// Any window of `n` steps holds `⌊n·r⌋` or `⌈n·r⌉` real steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StreamScheduler {
    ratio: f64,
    phase: f64,
}

impl StreamScheduler {
    pub fn new(ratio: f64, seed: u64) -> Self {
        let phase = ChaCha8Rng::seed_from_u64(seed ^ 0x5c4e_d01e_5c4e_d01e).random::<f64>();
        StreamScheduler { ratio: ratio.clamp(0.0, 1.0), phase }
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn stream(&self, iteration: u64) -> Stream {
        let f = |i: u64| (i as f64 * self.ratio + self.phase).floor();
        if f(iteration + 1) > f(iteration) {
            Stream::Real
        } else {
            Stream::Synthetic
        }
    }
}

/// Exponential moving averages of the main loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningAverages {
    pub supervised: Option<f64>,
    pub adv_g: Option<f64>,
    pub loss_d: Option<f64>,
    pub total: Option<f64>,
}

impl RunningAverages {
    pub fn update(&mut self, r: &LossReport) {
        let ema = |slot: &mut Option<f64>, v: Option<f64>| {
            if let Some(v) = v {
                *slot = Some(slot.map_or(v, |a| RUNNING_DECAY * a + (1.0 - RUNNING_DECAY) * v));
            }
        };
        ema(&mut self.supervised, r.supervised);
        ema(&mut self.adv_g, r.adv_g);
        ema(&mut self.loss_d, r.loss_d);
        ema(&mut self.total, Some(r.total));
    }
}

/// Everything a resumed run needs.
#[derive(Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: GeneratorNetwork<f32>,
    pub discriminator: DiscriminatorNetwork<f32>,
    pub g_optim: Adam<f32>,
    pub d_optim: Adam<f32>,
    /// Completed paired steps.
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub running: RunningAverages,
}

impl TrainState {
    pub fn new(config: TrainConfig, generator: &GeneratorConfig, discriminator: &DiscriminatorConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator::<f32>(generator)?;
        let discriminator = build_discriminator::<f32>(discriminator)?;
        Ok(TrainState {
            g_optim: Adam::new(config.adam(), &generator.params),
            d_optim: Adam::new(config.adam(), &discriminator.params),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            iteration: 0,
            running: RunningAverages::default(),
            config,
            generator,
            discriminator,
        })
    }
}

fn batch_ids<'a>(ids: impl Iterator<Item = &'a str>) -> String {
    ids.collect::<Vec<_>>().join(", ")
}

fn clamp_input(r: &Raster) -> Raster {
    r.map(|v| if v.is_nan() { v } else { v.clamp(0.0, 1.0) })
}

/// Network input for synthetic records: the linear render, clamped to `[0, 1]`.
pub fn synthetic_input(batch: &[&SvbrdfRecord]) -> Result<Tensor<f32>> {
    let rasters: Vec<Raster> = batch.iter().map(|r| clamp_input(&r.render.linear)).collect();
    rasters_to_tensor(&rasters.iter().collect::<Vec<_>>())
}

pub fn real_input(batch: &[&RealImageRecord]) -> Result<Tensor<f32>> {
    let rasters: Vec<Raster> = batch.iter().map(|r| clamp_input(&r.image)).collect();
    rasters_to_tensor(&rasters.iter().collect::<Vec<_>>())
}

#[derive(Clone, Copy, Debug)]
struct DiscriminatorStats {
    real: f64,
    fake: f64,
    loss: f64,
}

/// `discriminator_steps` updates of D on `real` vs `fake` (both `[N, 10, H, W]`, discriminator order).
fn discriminator_update(state: &mut TrainState, real: &Tensor<f32>, fake: &Tensor<f32>, ids: &str) -> Result<DiscriminatorStats> {
    let g_before = state.generator.params.fingerprint();
    let real = std::rc::Rc::new(real.clone());
    let fake = std::rc::Rc::new(fake.clone());
    let mut first = None;
    for _ in 0..state.config.discriminator_steps {
        let g = Graph::new();
        let dr = state.discriminator.discriminate(&g, &g.constant_rc(real.clone()))?;
        let df = state.discriminator.discriminate(&g, &g.constant_rc(fake.clone()))?;
        let loss = discriminator_loss_var(&dr, &df);
        let stats = DiscriminatorStats {
            real: dr.value().mean() as f64,
            fake: df.value().mean() as f64,
            loss: loss.value().item() as f64,
        };
        if !stats.loss.is_finite() {
            return Err(ModelError::NonFinite { iteration: state.iteration + 1, term: "loss_d".into(), batch: ids.into() });
        }
        let grads = g.backward(&loss);
        state.d_optim.update(&mut state.discriminator.params, &grads);
        first.get_or_insert(stats);
    }
    assert_eq!(g_before, state.generator.params.fingerprint(), "discriminator update modified generator parameters");
    Ok(first.expect("at least one discriminator step"))
}

fn record_discriminator(report: &mut LossReport, s: DiscriminatorStats) {
    report.adv_d_real = Some(s.real);
    report.adv_d_fake = Some(s.fake);
    report.loss_d = Some(s.loss);
}

type DiscriminatorSnapshot = (DiscriminatorNetwork<f32>, Adam<f32>);

/// Applies the G update for `total`, or rolls D back and reports the first non-finite term.
fn generator_update(
    state: &mut TrainState,
    g: &Graph<f32>,
    total: &Var<'_, f32>,
    report: LossReport,
    ids: &str,
    snapshot: Option<DiscriminatorSnapshot>,
) -> Result<LossReport> {
    if let Some(term) = report.first_non_finite() {
        if let Some((d, opt)) = snapshot {
            state.discriminator = d;
            state.d_optim = opt;
        }
        log::error!("non-finite loss at iteration {} on [{ids}]: {report}", state.iteration + 1);
        return Err(ModelError::NonFinite { iteration: state.iteration + 1, term, batch: ids.into() });
    }
    let d_before = state.discriminator.params.fingerprint();
    let grads = g.backward(total);
    state.g_optim.update(&mut state.generator.params, &grads);
    assert_eq!(d_before, state.discriminator.params.fingerprint(), "generator update modified discriminator parameters");
    state.iteration += 1;
    state.running.update(&report);
    Ok(report)
}

/// One supervised step on annotated synthetic records.
pub fn train_step_synthetic(state: &mut TrainState, batch: &[&SvbrdfRecord]) -> Result<LossReport> {
    if batch.is_empty() {
        return Err(ModelError::Data("empty synthetic batch".into()));
    }
    let w = state.config.loss;
    let ids = batch_ids(batch.iter().map(|r| r.id.as_str()));
    let maps: Vec<&MaterialMaps> = batch.iter().map(|r| &r.maps).collect();
    let input = synthetic_input(batch)?;
    let g = Graph::new();
    let out = state.generator.forward(&g, &g.constant(input))?;
    let mut report = LossReport::default();
    let mut snapshot = None;
    let adv = if w.adversarial {
        snapshot = Some((state.discriminator.clone(), state.d_optim.clone()));
        let fake = discriminator_input(&out.maps).value().clone();
        let stats = discriminator_update(state, &stack_maps(&maps)?, &fake, &ids)?;
        record_discriminator(&mut report, stats);
        let adv = generator_adv_loss_var(&state.discriminator.discriminate(&g, &discriminator_input(&out.maps))?);
        report.adv_g = Some(adv.value().item() as f64);
        Some(adv)
    } else {
        None
    };
    let sup = if w.supervised_enabled() {
        let gt = maps_to_tensors::<f32>(&maps)?.map(|t| g.constant(t));
        let terms = supervised_loss_var(&out.maps, &gt, &w)?;
        report.record_supervised(&terms);
        Some(terms.total)
    } else {
        None
    };
    let total = total_generator_loss_var(sup.as_ref(), adv.as_ref(), &w)
        .ok_or_else(|| ModelError::Config("no generator loss term is enabled".into()))?;
    report.total = total.value().item() as f64;
    generator_update(state, &g, &total, report, &ids, snapshot)
}

/// One adversarial-only step on unannotated photos. D's real class is drawn from `reservoir`.
pub fn train_step_real(state: &mut TrainState, batch: &[&RealImageRecord], reservoir: &[&MaterialMaps]) -> Result<LossReport> {
    if reservoir.is_empty() {
        return Err(ModelError::Data("real-stream step needs a non-empty reservoir of ground-truth map sets".into()));
    }
    if batch.is_empty() {
        return Err(ModelError::Data("empty real batch".into()));
    }
    let w = state.config.loss;
    if !w.adversarial {
        return Err(ModelError::Config("real-stream steps need the adversarial loss enabled".into()));
    }
    let ids = batch_ids(batch.iter().map(|r| r.id.as_str()));
    let picks: Vec<&MaterialMaps> =
        (0..batch.len()).map(|_| reservoir[state.rng.random_range(0..reservoir.len())]).collect();
    let input = real_input(batch)?;
    let g = Graph::new();
    let out = state.generator.forward(&g, &g.constant(input))?;
    let mut report = LossReport::default();
    let snapshot = Some((state.discriminator.clone(), state.d_optim.clone()));
    let fake = discriminator_input(&out.maps).value().clone();
    let stats = discriminator_update(state, &stack_maps(&picks)?, &fake, &ids)?;
    record_discriminator(&mut report, stats);
    let adv = generator_adv_loss_var(&state.discriminator.discriminate(&g, &discriminator_input(&out.maps))?);
    report.adv_g = Some(adv.value().item() as f64);
    let total = total_generator_loss_var(None, Some(&adv), &w).expect("adversarial term enabled");
    report.total = total.value().item() as f64;
    generator_update(state, &g, &total, report, &ids, snapshot)
}

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    /// Steps completed after this one.
    pub iteration: u64,
    pub stream: Stream,
    pub report: LossReport,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} stream={} {}", self.iteration, self.stream, self.report)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub log: Option<&'a mut dyn Write>,
    /// Stop once this many steps are complete, before `max_iterations`.
    pub stop_at: Option<u64>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub steps: Vec<StepLog>,
    pub notices: Vec<String>,
}

/// Real-stream ratio actually used, with a notice when it had to be forced to zero.
pub fn effective_real_ratio(config: &TrainConfig, has_real: bool) -> (f64, Option<String>) {
    let r = config.real_stream_ratio;
    if r > 0.0 && !has_real {
        (0.0, Some(format!("no real images available; real_stream_ratio forced from {r} to 0")))
    } else if r > 0.0 && !config.loss.adversarial {
        (0.0, Some(format!("adversarial loss disabled; real_stream_ratio forced from {r} to 0")))
    } else {
        (r, None)
    }
}

/// Runs from `state.iteration` to `max_iterations`, interleaving streams with a seeded scheduler.
pub fn train(
    mut state: TrainState,
    synthetic: &[SvbrdfRecord],
    real: Option<&[RealImageRecord]>,
    mut opts: TrainOptions<'_>,
) -> Result<TrainOutcome> {
    state.config.validate()?;
    if synthetic.is_empty() {
        return Err(ModelError::Data("synthetic dataset is empty".into()));
    }
    let real = real.filter(|r| !r.is_empty());
    let (ratio, notice) = effective_real_ratio(&state.config, real.is_some());
    let mut notices = Vec::new();
    if let Some(n) = notice {
        log::warn!("{n}");
        notices.push(n);
    }
    let scheduler = StreamScheduler::new(ratio, state.config.seed);
    let reservoir: Vec<&MaterialMaps> = synthetic.iter().map(|r| &r.maps).collect();
    let end = opts.stop_at.map_or(state.config.max_iterations, |s| s.min(state.config.max_iterations));
    let interval = state.config.checkpoint_interval;
    let mut steps = Vec::new();
    let mut saved_at = None;
    while state.iteration < end {
        let stream = scheduler.stream(state.iteration);
        let k = state.config.batch_size;
        let report = match (stream, real) {
            (Stream::Real, Some(real)) => {
                let idx = sample(&mut state.rng, real.len(), k.min(real.len())).into_vec();
                let batch: Vec<&RealImageRecord> = idx.iter().map(|&i| &real[i]).collect();
                train_step_real(&mut state, &batch, &reservoir)
            }
            _ => {
                let idx = sample(&mut state.rng, synthetic.len(), k.min(synthetic.len())).into_vec();
                let batch: Vec<&SvbrdfRecord> = idx.iter().map(|&i| &synthetic[i]).collect();
                train_step_synthetic(&mut state, &batch)
            }
        };
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                if let Some(log) = opts.log.as_deref_mut() {
                    let _ = writeln!(log, "abort step={} stream={stream}: {e}", state.iteration + 1);
                }
                return Err(e);
            }
        };
        let entry = StepLog { iteration: state.iteration, stream, report };
        log::debug!("{entry}");
        if let Some(log) = opts.log.as_deref_mut() {
            writeln!(log, "{entry}").map_err(io_err(Path::new("<training log>")))?;
        }
        steps.push(entry);
        if let Some(dir) = opts.checkpoint_dir {
            if interval > 0 && state.iteration % interval == 0 {
                save_checkpoint(&state, &checkpoint_path(dir, state.iteration))?;
                saved_at = Some(state.iteration);
            }
        }
    }
    if let Some(dir) = opts.checkpoint_dir {
        if saved_at != Some(state.iteration) {
            save_checkpoint(&state, &checkpoint_path(dir, state.iteration))?;
        }
    }
    Ok(TrainOutcome { state, steps, notices })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheduler_hits_the_ratio_exactly() {
        for seed in 0..5 {
            let s = StreamScheduler::new(0.5, seed);
            assert_eq!((0..100).filter(|&i| s.stream(i) == Stream::Real).count(), 50);
            let s = StreamScheduler::new(0.0, seed);
            assert!((0..1000).all(|i| s.stream(i) == Stream::Synthetic));
            let s = StreamScheduler::new(1.0, seed);
            assert!((0..1000).all(|i| s.stream(i) == Stream::Real));
        }
    }

    #[test]
    fn config_invariants_are_checked() {
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::large().validate().is_ok());
        let bad = [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::desk() },
            TrainConfig { real_stream_ratio: 1.5, ..TrainConfig::desk() },
            TrainConfig { batch_size: 0, ..TrainConfig::desk() },
            TrainConfig { discriminator_steps: 0, ..TrainConfig::desk() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn missing_real_data_forces_ratio_to_zero() {
        let (r, notice) = effective_real_ratio(&TrainConfig::desk(), false);
        assert_eq!(r, 0.0);
        assert!(notice.unwrap().contains("forced"));
        assert_eq!(effective_real_ratio(&TrainConfig::desk(), true), (0.5, None));
    }

    #[test]
    fn running_average_starts_at_first_value() {
        let mut avg = RunningAverages::default();
        avg.update(&LossReport { total: 2.0, ..Default::default() });
        avg.update(&LossReport { total: 1.0, ..Default::default() });
        assert!((avg.total.unwrap() - 1.9).abs() < 1e-12);
        assert_eq!(avg.supervised, None);
    }
}

//! Dataset-level metrics and the ablation harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use surfacenet_core::dataset::{RealImageRecord, SvbrdfRecord};
use surfacenet_core::metrics::PerMap;
use surfacenet_core::{rmse_maps, rmse_renderings, MapKind, MaterialMaps};

use crate::checkpoint::save_generator;
use crate::discriminator::{DiscriminatorConfig, DiscriminatorKind};
use crate::error::{io_err, ModelError, Result};
use crate::generator::{GeneratorConfig, GeneratorNetwork, Upsampling};
use crate::losses::LossWeights;
use crate::trainer::{synthetic_input, train, TrainConfig, TrainOptions, TrainState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub rmse: PerMap,
    /// Absent when rendering failed for any evaluated sample.
    pub rendering: Option<f64>,
    pub samples: usize,
    pub skipped: usize,
}

impl MetricsReport {
    pub fn mean_map_rmse(&self) -> f64 {
        self.rmse.mean()
    }
}

/// Metrics over (prediction, ground truth) pairs, accumulated in id order so
/// the result does not depend on input order.
pub fn evaluate_predictions(label: &str, pairs: &[(&str, &MaterialMaps, &MaterialMaps)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(ModelError::Data("nothing to evaluate".into()));
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.sort_by(|&a, &b| pairs[a].0.cmp(pairs[b].0));
    let mut sum = PerMap::default();
    let mut rend_sum = 0.0;
    let mut rend_ok = true;
    let mut samples = 0;
    let mut skipped = 0;
    for i in order {
        let (id, pred, gt) = pairs[i];
        let maps = match rmse_maps(pred, gt) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("skipping {id}: {e}");
                skipped += 1;
                continue;
            }
        };
        match rmse_renderings(pred, gt) {
            Ok(r) => rend_sum += r,
            Err(e) => {
                log::warn!("rendering RMSE unavailable for {id}: {e}");
                rend_ok = false;
            }
        }
        for k in MapKind::ALL {
            *sum.get_mut(k) += maps.get(k);
        }
        samples += 1;
    }
    if samples == 0 {
        return Err(ModelError::Data(format!("all {skipped} records failed evaluation")));
    }
    let n = samples as f64;
    Ok(MetricsReport {
        label: label.to_string(),
        rmse: PerMap::from_fn(|k| sum.get(k) / n),
        rendering: rend_ok.then(|| rend_sum / n),
        samples,
        skipped,
    })
}

/// Runs `net` on every record's render and scores the predicted maps.
pub fn evaluate_dataset(label: &str, net: &GeneratorNetwork<f32>, records: &[SvbrdfRecord]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(ModelError::Data("evaluation dataset is empty".into()));
    }
    let mut preds = Vec::with_capacity(records.len());
    let mut failed = 0;
    for r in records {
        let pred = synthetic_input(&[r]).and_then(|x| {
            let g = crate::graph::Graph::no_grad();
            let out = net.forward(&g, &g.constant(x))?;
            let [d, n, ro, s] = &out.maps;
            crate::convert::tensors_to_maps([d.value(), n.value(), ro.value(), s.value()], 0)
        });
        match pred {
            Ok(p) => preds.push((r, p)),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.id);
                failed += 1;
            }
        }
    }
    if preds.is_empty() {
        return Err(ModelError::Data(format!("all {failed} records failed inference")));
    }
    let pairs: Vec<(&str, &MaterialMaps, &MaterialMaps)> = preds.iter().map(|(r, p)| (r.id.as_str(), p, &r.maps)).collect();
    let mut report = evaluate_predictions(label, &pairs)?;
    report.skipped += failed;
    Ok(report)
}

const COLUMNS: [&str; 5] = ["Diff.", "Nrm.", "Rgh.", "Spec.", "Rend."];

fn cells(r: &MetricsReport) -> [String; 5] {
    let f = |v: f64| format!("{v:.4}");
    [
        f(r.rmse.diffuse),
        f(r.rmse.normal),
        f(r.rmse.roughness),
        f(r.rmse.specular),
        r.rendering.map_or_else(|| "n/a".into(), f),
    ]
}

/// Aligned plain-text table; failed rows show their error.
pub fn format_table(rows: &[(String, std::result::Result<MetricsReport, String>)]) -> String {
    let width = rows.iter().map(|(l, _)| l.len()).chain([6]).max().unwrap_or(6);
    let mut out = format!("{:<width$}", "Config");
    for c in COLUMNS {
        let _ = write!(out, "  {c:>7}");
    }
    let _ = writeln!(out, "  {:>5}", "N");
    for (label, r) in rows {
        let _ = write!(out, "{label:<width$}");
        match r {
            Ok(r) => {
                for c in cells(r) {
                    let _ = write!(out, "  {c:>7}");
                }
                let _ = writeln!(out, "  {:>5}", r.samples);
            }
            Err(e) => {
                let _ = writeln!(out, "  failed: {e}");
            }
        }
    }
    out
}

pub fn to_csv(rows: &[(String, std::result::Result<MetricsReport, String>)]) -> String {
    let mut out = String::from("label,diffuse,normal,roughness,specular,rendering,samples,skipped,error\n");
    for (label, r) in rows {
        let label = label.replace(',', ";");
        match r {
            Ok(r) => {
                let [d, n, ro, s, re] = cells(r);
                let _ = writeln!(out, "{label},{d},{n},{ro},{s},{re},{},{},", r.samples, r.skipped);
            }
            Err(e) => {
                let _ = writeln!(out, "{label},,,,,,,,{}", e.replace([',', '\n'], " "));
            }
        }
    }
    out
}

/// Full description of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        ExperimentConfig {
            train: TrainConfig::desk(),
            generator: GeneratorConfig::desk(),
            discriminator: DiscriminatorConfig::desk(),
        }
    }

    pub fn large() -> Self {
        ExperimentConfig {
            train: TrainConfig::large(),
            generator: GeneratorConfig::large(),
            discriminator: DiscriminatorConfig::large(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()
    }

    /// Uses `seed` for data order, stream scheduling and both initializations.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.train.seed = seed;
        self.generator.seed = seed;
        self.discriminator.seed = seed.wrapping_add(1);
        self
    }
}

/// Overrides applied to the base configuration for one ablation row.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationRow {
    pub label: String,
    #[serde(default)]
    pub upsampling: Option<Upsampling>,
    #[serde(default)]
    pub input_skips: Option<bool>,
    #[serde(default)]
    pub discriminator: Option<DiscriminatorKind>,
    #[serde(default)]
    pub loss: Option<LossWeights>,
    /// Whether real photos are interleaved when available.
    #[serde(default)]
    pub real_stream: Option<bool>,
}

impl AblationRow {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        if let Some(u) = self.upsampling {
            c.generator.upsampling = u;
        }
        if let Some(s) = self.input_skips {
            c.generator.input_skips = s;
        }
        if let Some(k) = self.discriminator {
            c.discriminator.kind = k;
        }
        if let Some(l) = self.loss {
            c.train.loss = l;
        }
        match self.real_stream {
            Some(false) => c.train.real_stream_ratio = 0.0,
            Some(true) if c.train.real_stream_ratio == 0.0 => c.train.real_stream_ratio = 0.5,
            _ => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationPlan {
    pub rows: Vec<AblationRow>,
}

impl AblationPlan {
    /// Architecture rows: interpolating decoder without skips or adversary, then each addition.
    pub fn architecture() -> Self {
        let sup = LossWeights::supervised_only();
        let full = LossWeights::default();
        let row = |label: &str, upsampling, skips, disc, loss| AblationRow {
            label: label.into(),
            upsampling: Some(upsampling),
            input_skips: Some(skips),
            discriminator: disc,
            loss: Some(loss),
            real_stream: Some(false),
        };
        AblationPlan {
            rows: vec![
                row("Base", Upsampling::Interpolate, false, None, sup),
                row("+ Dec.", Upsampling::Learned, false, None, sup),
                row("+ Skip", Upsampling::Learned, true, None, sup),
                row("+ Image", Upsampling::Learned, true, Some(DiscriminatorKind::Image), full),
                row("+ Patch", Upsampling::Learned, true, Some(DiscriminatorKind::Patch), full),
            ],
        }
    }

    /// Loss rows on the full architecture.
    pub fn losses() -> Self {
        let row = |label: &str, loss, real| AblationRow {
            label: label.into(),
            loss: Some(loss),
            real_stream: Some(real),
            ..Default::default()
        };
        AblationPlan {
            rows: vec![
                row("L1", LossWeights::l1_only(), false),
                row("L_sup", LossWeights::supervised_only(), false),
                row("L_unsup", LossWeights::adversarial_only(), false),
                row("full (synth)", LossWeights::default(), false),
                row("full (synth+real)", LossWeights::default(), true),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(ModelError::Config("ablation plan has no rows".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if r.label.trim().is_empty() {
                return Err(ModelError::Config("ablation row with an empty label".into()));
            }
            if !seen.insert(r.label.as_str()) {
                return Err(ModelError::Config(format!("duplicate ablation label `{}`", r.label)));
            }
        }
        Ok(())
    }
}

pub struct AblationData<'a> {
    pub train: &'a [SvbrdfRecord],
    pub real: Option<&'a [RealImageRecord]>,
    pub test: &'a [SvbrdfRecord],
}

pub type AblationTable = Vec<(String, std::result::Result<MetricsReport, String>)>;

/// File-system-safe directory name for a label.
pub fn label_slug(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' })
        .collect();
    let s = s.split('-').filter(|p| !p.is_empty()).collect::<Vec<_>>().join("-");
    if s.is_empty() {
        "row".into()
    } else {
        s
    }
}

fn run_row(row: &AblationRow, base: &ExperimentConfig, data: &AblationData<'_>, out: Option<&Path>) -> Result<MetricsReport> {
    let cfg = row.apply(base);
    cfg.validate()?;
    let state = TrainState::new(cfg.train.clone(), &cfg.generator, &cfg.discriminator)?;
    let outcome = train(state, data.train, data.real, TrainOptions::default())?;
    let report = evaluate_dataset(&row.label, &outcome.state.generator, data.test)?;
    if let Some(dir) = out {
        let dir = dir.join(label_slug(&row.label));
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        save_generator(&outcome.state.generator, &dir.join("generator.snck"))?;
        let rows = vec![(row.label.clone(), Ok(report.clone()))];
        let p = dir.join("report.csv");
        fs::write(&p, to_csv(&rows)).map_err(io_err(&p))?;
    }
    Ok(report)
}

/// Trains and evaluates each row in order under the base seeds and budget.
/// A failing row is recorded and the remaining rows still run.
pub fn run_ablation(plan: &AblationPlan, base: &ExperimentConfig, data: &AblationData<'_>, out: Option<&Path>) -> Result<AblationTable> {
    plan.validate()?;
    base.validate()?;
    let mut table = Vec::new();
    for row in &plan.rows {
        log::info!("ablation row `{}`", row.label);
        let r = run_row(row, base, data, out).map_err(|e| e.to_string());
        if let Err(e) = &r {
            log::error!("ablation row `{}` failed: {e}", row.label);
        }
        table.push((row.label.clone(), r));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let (t, c) = (dir.join("ablation.txt"), dir.join("ablation.csv"));
        fs::write(&t, format_table(&table)).map_err(io_err(&t))?;
        fs::write(&c, to_csv(&table)).map_err(io_err(&c))?;
    }
    Ok(table)
}

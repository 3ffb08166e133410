//! Training objectives.
//!
//! Every loss is built from graph ops so the trainer can differentiate it;
//! the scalar helpers evaluate the same graph code without recording.

use std::fmt;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use surfacenet_core::metrics::PerMap;
use surfacenet_core::{MapKind, MaterialMaps, Raster};

use crate::convert::{maps_to_tensors, raster_to_tensor};
use crate::error::{ModelError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Float, Tensor};

/// Added inside every log of a discriminator output.
pub const LOG_EPS: f64 = 1e-8;

pub const MSSSIM_WINDOW: usize = 11;
pub const MSSSIM_SIGMA: f64 = 1.5;
pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub l1: bool,
    pub msssim: bool,
    pub adversarial: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.2, beta: 0.84, l1: true, msssim: true, adversarial: true }
    }
}

impl LossWeights {
    pub fn l1_only() -> Self {
        LossWeights { msssim: false, adversarial: false, ..Self::default() }
    }

    pub fn supervised_only() -> Self {
        LossWeights { adversarial: false, ..Self::default() }
    }

    pub fn adversarial_only() -> Self {
        LossWeights { l1: false, msssim: false, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0 && self.beta.is_finite() && self.beta >= 0.0) {
            return Err(ModelError::Config(format!(
                "loss weights must be finite and non-negative (alpha {}, beta {})",
                self.alpha, self.beta
            )));
        }
        if !(self.l1 || self.msssim || self.adversarial) {
            return Err(ModelError::Config("at least one loss term must be enabled".into()));
        }
        Ok(())
    }

    pub fn supervised_enabled(&self) -> bool {
        self.l1 || self.msssim
    }
}

/// Number of MS-SSIM scales for an image whose shorter side is `size`.
pub fn msssim_scales(size: usize) -> Option<usize> {
    (1..=MSSSIM_WEIGHTS.len()).rev().find(|&s| (1 << (s - 1)) * MSSSIM_WINDOW <= size)
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(len: usize, sigma: f64) -> Vec<f64> {
    let c = (len as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..len).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn check_pair(a: [usize; 4], b: [usize; 4], what: &str) -> Result<()> {
    if a != b {
        return Err(ModelError::Shape(format!("{what}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_var<'g, T: Float>(a: &Var<'g, T>, b: &Var<'g, T>) -> Result<Var<'g, T>> {
    check_pair(a.shape(), b.shape(), "l1")?;
    Ok(a.sub(b).abs().mean())
}

/// Spatial means of the SSIM and contrast-structure maps, `[N, C, 1, 1]` each.
fn ssim_parts<'g, T: Float>(x: &Var<'g, T>, y: &Var<'g, T>, taps: &Rc<Vec<T>>) -> (Var<'g, T>, Var<'g, T>) {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let f = |v: &Var<'g, T>| v.separable_filter(taps.clone());
    let (mx, my) = (f(x), f(y));
    let (mxx, myy, mxy) = (mx.square(), my.square(), mx.mul(&my));
    let sxx = f(&x.square()).sub(&mxx);
    let syy = f(&y.square()).sub(&myy);
    let sxy = f(&x.mul(y)).sub(&mxy);
    let cs = sxy.affine(2.0, c2).div(&sxx.add(&syy).affine(1.0, c2));
    let lum = mxy.affine(2.0, c1).div(&mxx.add(&myy).affine(1.0, c1));
    (lum.mul(&cs).spatial_mean(), cs.spatial_mean())
}

/// Multi-scale SSIM per sample and channel, `[N, C, 1, 1]`, for values in `[0, 1]`.
///
/// Scales are added while the window still fits; weights are renormalized
/// over the scales used. Contrast and SSIM terms are clamped at zero before
/// exponentiation.
pub fn ms_ssim_var<'g, T: Float>(a: &Var<'g, T>, b: &Var<'g, T>) -> Result<Var<'g, T>> {
    check_pair(a.shape(), b.shape(), "ms_ssim")?;
    let [_, _, h, w] = a.shape();
    let scales = msssim_scales(h.min(w)).ok_or_else(|| {
        ModelError::Shape(format!("ms_ssim needs at least {MSSSIM_WINDOW}x{MSSSIM_WINDOW} pixels, got {w}x{h}"))
    })?;
    let total: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let taps = Rc::new(gaussian_taps(MSSSIM_WINDOW, MSSSIM_SIGMA).into_iter().map(T::from_f64).collect::<Vec<_>>());
    let (mut x, mut y) = (a.clone(), b.clone());
    let mut acc: Option<Var<'g, T>> = None;
    for s in 0..scales {
        let weight = MSSSIM_WEIGHTS[s] / total;
        let (ssim, cs) = ssim_parts(&x, &y, &taps);
        let last = s + 1 == scales;
        let factor = if last { ssim } else { cs }.relu_pow(weight);
        acc = Some(match acc {
            Some(p) => p.mul(&factor),
            None => factor,
        });
        if !last {
            let [_, _, h, w] = x.shape();
            if h % 2 != 0 || w % 2 != 0 {
                return Err(ModelError::Shape(format!("ms_ssim scale {s} has odd size {w}x{h}")));
            }
            x = x.avg_pool(2);
            y = y.avg_pool(2);
        }
    }
    Ok(acc.expect("at least one scale"))
}

/// MS-SSIM of two single maps, averaged over channels.
pub fn ms_ssim(a: &Raster, b: &Raster) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(ModelError::Shape("ms_ssim: rasters differ in shape".into()));
    }
    let g = Graph::<f64>::no_grad();
    let v = ms_ssim_var(&g.constant(raster_to_tensor(a)), &g.constant(raster_to_tensor(b)))?;
    Ok(v.value().mean())
}

/// Per-kind mean absolute difference.
pub fn l1_map_loss(pred: &MaterialMaps, gt: &MaterialMaps) -> Result<PerMap> {
    let [p, t] = [pred, gt].map(|m| maps_to_tensors::<f64>(&[m]));
    let (p, t) = (p?, t?);
    let g = Graph::<f64>::no_grad();
    let mut out = PerMap::default();
    for (i, kind) in MapKind::ALL.into_iter().enumerate() {
        let v = l1_var(&g.constant(p[i].clone()), &g.constant(t[i].clone()))?;
        *out.get_mut(kind) = v.value().item();
    }
    Ok(out)
}

/// Graph terms of the supervised loss. Maps are in [`MapKind::ALL`] order.
pub struct SupervisedTerms<'g, T: Float> {
    pub l1: [Option<Var<'g, T>>; 4],
    /// Similarities, not losses.
    pub msssim: [Option<Var<'g, T>>; 4],
    pub total: Var<'g, T>,
}

/// `Σ_k [L1_k + β (1 − MS-SSIM_k)]` with the enabled terms.
pub fn supervised_loss_var<'g, T: Float>(
    pred: &[Var<'g, T>; 4],
    gt: &[Var<'g, T>; 4],
    w: &LossWeights,
) -> Result<SupervisedTerms<'g, T>> {
    if !w.supervised_enabled() {
        return Err(ModelError::Config("supervised loss requested with l1 and msssim disabled".into()));
    }
    let mut l1: [Option<Var<'g, T>>; 4] = Default::default();
    let mut ms: [Option<Var<'g, T>>; 4] = Default::default();
    let mut total: Option<Var<'g, T>> = None;
    let mut push = |t: Var<'g, T>| {
        total = Some(match total.take() {
            Some(acc) => acc.add(&t),
            None => t,
        })
    };
    for k in 0..4 {
        if w.l1 {
            let v = l1_var(&pred[k], &gt[k])?;
            push(v.clone());
            l1[k] = Some(v);
        }
        if w.msssim {
            let sim = ms_ssim_var(&pred[k], &gt[k])?.mean();
            push(sim.affine(-w.beta, w.beta));
            ms[k] = Some(sim);
        }
    }
    Ok(SupervisedTerms { l1, msssim: ms, total: total.expect("an enabled term") })
}

/// Scalar supervised loss and its report.
pub fn supervised_loss(pred: &MaterialMaps, gt: &MaterialMaps, w: &LossWeights) -> Result<(f64, LossReport)> {
    let g = Graph::<f64>::no_grad();
    let vars = |m: &MaterialMaps| -> Result<[Var<'_, f64>; 4]> { Ok(maps_to_tensors::<f64>(&[m])?.map(|t| g.constant(t))) };
    let terms = supervised_loss_var(&vars(pred)?, &vars(gt)?, w)?;
    let total = terms.total.value().item();
    let mut report = LossReport::default();
    report.record_supervised(&terms);
    report.total = total;
    Ok((total, report))
}

/// `−[mean ln(d_real + ε) + mean ln(1 − d_fake + ε)]`.
pub fn discriminator_loss_var<'g, T: Float>(d_real: &Var<'g, T>, d_fake: &Var<'g, T>) -> Var<'g, T> {
    let real = d_real.ln_eps(LOG_EPS).mean();
    let fake = d_fake.affine(-1.0, 1.0).ln_eps(LOG_EPS).mean();
    real.add(&fake).affine(-1.0, 0.0)
}

/// `−mean ln(d_fake + ε)`: the non-saturating generator objective.
pub fn generator_adv_loss_var<'g, T: Float>(d_fake: &Var<'g, T>) -> Var<'g, T> {
    d_fake.ln_eps(LOG_EPS).mean().affine(-1.0, 0.0)
}

/// `sup + α·adv` with toggles; `None` when nothing is enabled.
pub fn total_generator_loss_var<'g, T: Float>(
    sup: Option<&Var<'g, T>>,
    adv: Option<&Var<'g, T>>,
    w: &LossWeights,
) -> Option<Var<'g, T>> {
    let sup = sup.filter(|_| w.supervised_enabled()).cloned();
    let adv = adv.filter(|_| w.adversarial).map(|a| a.affine(w.alpha, 0.0));
    match (sup, adv) {
        (Some(s), Some(a)) => Some(s.add(&a)),
        (s, a) => s.or(a),
    }
}

fn scalar_graph<R>(f: impl for<'g> FnOnce(&'g Graph<f64>) -> R) -> R {
    f(&Graph::no_grad())
}

pub fn discriminator_loss(d_real: f64, d_fake: f64) -> f64 {
    scalar_graph(|g| {
        discriminator_loss_var(&g.constant(Tensor::scalar(d_real)), &g.constant(Tensor::scalar(d_fake))).value().item()
    })
}

pub fn generator_adv_loss(d_fake: f64) -> f64 {
    scalar_graph(|g| generator_adv_loss_var(&g.constant(Tensor::scalar(d_fake))).value().item())
}

pub fn total_generator_loss(sup: f64, adv_g: f64, w: &LossWeights) -> f64 {
    scalar_graph(|g| {
        let (s, a) = (g.constant(Tensor::scalar(sup)), g.constant(Tensor::scalar(adv_g)));
        total_generator_loss_var(Some(&s), Some(&a), w).map_or(0.0, |v| v.value().item())
    })
}

/// Per-term values of one training step. Absent terms were not part of the step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l1: Option<PerMap>,
    pub msssim: Option<PerMap>,
    pub supervised: Option<f64>,
    pub adv_g: Option<f64>,
    pub adv_d_real: Option<f64>,
    pub adv_d_fake: Option<f64>,
    pub loss_d: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn record_supervised<T: Float>(&mut self, terms: &SupervisedTerms<'_, T>) {
        let collect = |vals: &[Option<Var<'_, T>>; 4]| {
            vals.iter().all(Option::is_some).then(|| {
                PerMap::from_fn(|k| vals[crate::convert::kind_index(k)].as_ref().unwrap().value().item().as_f64())
            })
        };
        self.l1 = collect(&terms.l1);
        self.msssim = collect(&terms.msssim);
        self.supervised = Some(terms.total.value().item().as_f64());
    }

    /// `(term, value)` pairs in a fixed order.
    pub fn terms(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (prefix, per) in [("l1", &self.l1), ("msssim", &self.msssim)] {
            if let Some(p) = per {
                out.extend(MapKind::ALL.iter().map(|&k| (format!("{prefix}.{}", k.name()), p.get(k))));
            }
        }
        let scalars = [
            ("supervised", self.supervised),
            ("adv_g", self.adv_g),
            ("d_real", self.adv_d_real),
            ("d_fake", self.adv_d_fake),
            ("loss_d", self.loss_d),
        ];
        out.extend(scalars.into_iter().filter_map(|(n, v)| v.map(|v| (n.to_string(), v))));
        out.push(("total".into(), self.total));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.terms().iter().all(|(_, v)| v.is_finite())
    }

    /// First non-finite term, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms().into_iter().map(|(n, v)| format!("{n}={v:.6e}")).collect();
        f.write_str(&parts.join(" "))
    }
}

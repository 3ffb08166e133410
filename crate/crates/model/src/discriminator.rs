//! Six-layer convolutional discriminator over concatenated map sets.
//!
//! No normalization layers: every score depends only on its receptive field.

use serde::{Deserialize, Serialize};
use surfacenet_core::{MapKind, MaterialMaps};

use crate::convert::{kind_index, maps_to_tensors};
use crate::error::{ModelError, Result};
use crate::graph::{concat_channels, Graph, Var};
use crate::kernels::ConvGeom;
use crate::layers::Conv;
use crate::params::{Init, ParamStore};
use crate::tensor::{Float, Tensor};

pub const LAYER_COUNT: usize = 6;
/// Resolution at which the layer arithmetic is pinned.
pub const REFERENCE_INPUT: usize = 256;
pub const REFERENCE_OUTPUT: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorKind {
    /// Sigmoid per patch, then the mean of patch scores.
    Patch,
    /// One sigmoid over the spatially averaged logits.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
    pub kind: DiscriminatorKind,
    pub leaky_slope: f64,
    pub seed: u64,
}

impl DiscriminatorConfig {
    /// Layer arithmetic shared by all scales, with the given hidden widths.
    pub fn with_widths(widths: [usize; 5]) -> Self {
        let s2 = |channels| LayerSpec { kernel: 4, stride: 2, padding: 1, channels };
        DiscriminatorConfig {
            input_channels: MapKind::total_channels(),
            layers: vec![
                s2(widths[0]),
                s2(widths[1]),
                s2(widths[2]),
                s2(widths[3]),
                LayerSpec { kernel: 3, stride: 1, padding: 1, channels: widths[4] },
                LayerSpec { kernel: 3, stride: 1, padding: 0, channels: 1 },
            ],
            kind: DiscriminatorKind::Patch,
            leaky_slope: 0.2,
            seed: 1,
        }
    }

    pub fn large() -> Self {
        Self::with_widths([64, 128, 256, 512, 512])
    }

    pub fn desk() -> Self {
        Self::with_widths([16, 32, 64, 64, 64])
    }

    pub fn tiny() -> Self {
        Self::with_widths([4, 4, 8, 8, 8])
    }

    /// Spatial size of the score map for a square input, if every layer fits.
    pub fn output_size(&self, input: usize) -> Option<usize> {
        self.layers.iter().try_fold(input, |n, l| ConvGeom::square(l.kernel, l.stride, l.padding, 1).out_extent(n, l.kernel))
    }

    /// Smallest square input that yields a score map.
    pub fn min_input(&self) -> usize {
        (1..=4096).find(|&n| self.output_size(n).is_some_and(|o| o >= 1)).unwrap_or(usize::MAX)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.layers.len() != LAYER_COUNT {
            return err(format!("discriminator needs exactly {LAYER_COUNT} layers, got {}", self.layers.len()));
        }
        if self.input_channels != MapKind::total_channels() {
            return err(format!(
                "discriminator input_channels must be {}, got {}",
                MapKind::total_channels(),
                self.input_channels
            ));
        }
        if self.layers.iter().any(|l| l.kernel == 0 || l.stride == 0 || l.channels == 0) {
            return err("discriminator layers need positive kernel, stride and channels".into());
        }
        if self.layers[LAYER_COUNT - 1].channels != 1 {
            return err("the last discriminator layer must produce 1 channel".into());
        }
        match self.output_size(REFERENCE_INPUT) {
            Some(REFERENCE_OUTPUT) => {}
            Some(n) => {
                return err(format!(
                    "layer arithmetic maps {REFERENCE_INPUT}x{REFERENCE_INPUT} to {n}x{n}, expected {REFERENCE_OUTPUT}x{REFERENCE_OUTPUT}"
                ))
            }
            None => return err(format!("layer arithmetic collapses a {REFERENCE_INPUT}x{REFERENCE_INPUT} input")),
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return err(format!("leaky_slope {} outside [0, 1)", self.leaky_slope));
        }
        Ok(())
    }
}

#[derive(Clone)]
pub struct DiscriminatorNetwork<T: Float> {
    pub config: DiscriminatorConfig,
    pub params: ParamStore<T>,
    layers: Vec<Conv>,
}

pub fn build_discriminator<T: Float>(config: &DiscriminatorConfig) -> Result<DiscriminatorNetwork<T>> {
    config.validate()?;
    let mut s = ParamStore::new();
    let init = &mut Init::new(config.seed);
    let mut cin = config.input_channels;
    let layers = config
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let geom = ConvGeom::square(l.kernel, l.stride, l.padding, 1);
            let conv = Conv::new(&mut s, init, &format!("layer{i}"), cin, l.channels, geom, true);
            cin = l.channels;
            conv
        })
        .collect();
    Ok(DiscriminatorNetwork { config: config.clone(), params: s, layers })
}

/// Concatenate generator-ordered maps (`MapKind::ALL`) into the discriminator's channel order.
pub fn discriminator_input<'g, T: Float>(maps: &[Var<'g, T>; 4]) -> Var<'g, T> {
    let ordered: Vec<&Var<'g, T>> = MapKind::DISCRIMINATOR_ORDER.iter().map(|&k| &maps[kind_index(k)]).collect();
    concat_channels(&ordered)
}

/// Map sets as a `[N, 10, H, W]` tensor in discriminator order.
pub fn stack_maps<T: Float>(maps: &[&MaterialMaps]) -> Result<Tensor<T>> {
    let per_kind = maps_to_tensors::<T>(maps)?;
    let g = Graph::no_grad();
    let vars = per_kind.map(|t| g.constant(t));
    Ok(discriminator_input(&vars).value().clone())
}

impl<T: Float> DiscriminatorNetwork<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    fn check(&self, shape: [usize; 4]) -> Result<()> {
        let [_, c, h, w] = shape;
        if c != self.config.input_channels {
            return Err(ModelError::Shape(format!(
                "discriminator expects {} channels, got {c}",
                self.config.input_channels
            )));
        }
        let min = self.config.min_input();
        if h < min || w < min {
            return Err(ModelError::Shape(format!("discriminator input {w}x{h} is below the minimum {min}x{min}")));
        }
        Ok(())
    }

    /// Pre-activation score map `[N, 1, h, w]`.
    pub fn logits<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        self.check(x.shape())?;
        let s = &self.params;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(g, s, &h);
            if i < last {
                h = h.leaky_relu(self.config.leaky_slope);
            }
        }
        Ok(h)
    }

    /// Per-patch scores in (0, 1).
    pub fn patch_scores<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.logits(g, x)?.sigmoid())
    }

    /// One score per sample, `[N, 1, 1, 1]`.
    pub fn discriminate<'g>(&self, g: &'g Graph<T>, x: &Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(match self.config.kind {
            DiscriminatorKind::Patch => self.patch_scores(g, x)?.mean_per_sample(),
            DiscriminatorKind::Image => self.logits(g, x)?.mean_per_sample().sigmoid(),
        })
    }

    /// Score maps for whole map sets, evaluation mode.
    pub fn score_maps(&self, maps: &[&MaterialMaps]) -> Result<Tensor<T>> {
        let g = Graph::no_grad();
        let x = g.constant(stack_maps(maps)?);
        Ok(self.patch_scores(&g, &x)?.value().clone())
    }
}

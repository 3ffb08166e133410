//! Fully-convolutional multi-head generator.
//!
//! Residual encoder at stride 8, atrous spatial pyramid pooling, a three-stage
//! transposed-convolution decoder that re-injects area-downsampled copies of
//! the input, a shared trunk and one small head per map kind.

use serde::{Deserialize, Serialize};
use surfacenet_core::{MapKind, MaterialMaps, Raster};

use crate::convert::{rasters_to_tensor, tensors_to_maps};
use crate::error::{ModelError, Result};
use crate::graph::{concat_channels, Graph, Var};
use crate::kernels::ConvGeom;
use crate::layers::{Conv, ConvNormRelu, ConvTranspose, Norm, ResidualBlock};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

/// Encoder stride; fixed by the three encoder stages.
pub const ENCODER_STRIDE: usize = 8;

/// The network sees display-encoded values; inputs arrive linear.
pub const INPUT_GAMMA: f64 = 2.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Large,
    Desk,
}

/// How the 1/8-resolution features are brought back to full resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsampling {
    /// Transposed convolution + residual layer per stage.
    Learned,
    /// Bilinear interpolation, no parameters.
    Interpolate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub kind: MapKind,
    pub channels: usize,
    pub activation: OutputActivation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub scale: Scale,
    pub stem_channels: usize,
    pub encoder_block_counts: Vec<usize>,
    pub encoder_channels: Vec<usize>,
    pub aspp_dilations: Vec<usize>,
    pub aspp_channels: usize,
    pub upsampling: Upsampling,
    pub decoder_channels: Vec<usize>,
    pub input_skips: bool,
    pub trunk_channels: usize,
    pub head_hidden: usize,
    pub heads: Vec<HeadSpec>,
    /// Input height and width must be multiples of this.
    pub input_multiple: usize,
    /// Training resolution; informational.
    pub input_resolution: usize,
    pub seed: u64,
}

fn default_heads() -> Vec<HeadSpec> {
    MapKind::ALL
        .iter()
        .map(|&kind| HeadSpec { kind, channels: kind.channels(), activation: OutputActivation::Sigmoid })
        .collect()
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        GeneratorConfig {
            scale: Scale::Desk,
            stem_channels: 24,
            encoder_block_counts: vec![2, 2, 2],
            encoder_channels: vec![24, 48, 96],
            aspp_dilations: vec![1, 2, 4],
            aspp_channels: 64,
            upsampling: Upsampling::Learned,
            decoder_channels: vec![48, 32, 16],
            input_skips: true,
            trunk_channels: 64,
            head_hidden: 16,
            heads: default_heads(),
            input_multiple: 32,
            input_resolution: 64,
            seed: 0,
        }
    }

    /// Deeper encoder and 256-map trunk; shape-compatible with the desk network.
    pub fn large() -> Self {
        GeneratorConfig {
            scale: Scale::Large,
            stem_channels: 64,
            encoder_block_counts: vec![3, 4, 23],
            encoder_channels: vec![64, 128, 256],
            aspp_dilations: vec![6, 12, 18],
            aspp_channels: 256,
            upsampling: Upsampling::Learned,
            decoder_channels: vec![256, 128, 64],
            input_skips: true,
            trunk_channels: 256,
            head_hidden: 64,
            heads: default_heads(),
            input_multiple: 32,
            input_resolution: 256,
            seed: 0,
        }
    }

    /// Same topology with a handful of channels; for fast tests.
    pub fn tiny() -> Self {
        GeneratorConfig {
            stem_channels: 4,
            encoder_block_counts: vec![1, 1, 1],
            encoder_channels: vec![4, 4, 8],
            aspp_dilations: vec![1, 2],
            aspp_channels: 8,
            decoder_channels: vec![8, 4, 4],
            trunk_channels: 8,
            head_hidden: 4,
            input_multiple: 8,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.encoder_block_counts.len() != 3 {
            return err(format!(
                "encoder_block_counts needs 3 stages for stride {ENCODER_STRIDE}, got {}",
                self.encoder_block_counts.len()
            ));
        }
        if self.encoder_channels.len() != self.encoder_block_counts.len() {
            return err("encoder_channels must have one entry per encoder stage".into());
        }
        if self.encoder_block_counts.iter().any(|&b| b == 0) {
            return err("every encoder stage needs at least one block".into());
        }
        if self.aspp_dilations.is_empty() {
            return err("aspp_dilations is empty".into());
        }
        if let Some(d) = self.aspp_dilations.iter().find(|&&d| d == 0) {
            return err(format!("aspp dilation {d} must be positive"));
        }
        if self.upsampling == Upsampling::Learned && self.decoder_channels.len() != 3 {
            return err(format!("decoder_channels needs 3 stages, got {}", self.decoder_channels.len()));
        }
        let widths = [self.stem_channels, self.aspp_channels, self.trunk_channels, self.head_hidden];
        if widths.iter().chain(&self.encoder_channels).chain(&self.decoder_channels).any(|&c| c == 0) {
            return err("channel counts must be positive (trunk_channels included)".into());
        }
        if self.heads.is_empty() {
            return err("heads is empty".into());
        }
        for kind in MapKind::ALL {
            let n = self.heads.iter().filter(|h| h.kind == kind).count();
            if n != 1 {
                return err(format!("expected exactly one {kind} head, found {n}"));
            }
        }
        if let Some(h) = self.heads.iter().find(|h| h.channels != h.kind.channels()) {
            return err(format!("{} head must have {} channels, not {}", h.kind, h.kind.channels(), h.channels));
        }
        if self.input_multiple == 0 || self.input_multiple % ENCODER_STRIDE != 0 {
            return err(format!("input_multiple {} must be a positive multiple of {ENCODER_STRIDE}", self.input_multiple));
        }
        Ok(())
    }
}

#[derive(Clone)]
struct Aspp {
    branches: Vec<ConvNormRelu>,
    pool: Conv,
    project: ConvNormRelu,
}

impl Aspp {
    fn new<T: Float>(s: &mut ParamStore<T>, init: &mut Init, cin: usize, ch: usize, dilations: &[usize]) -> Self {
        let branches = dilations
            .iter()
            .enumerate()
            .map(|(i, &d)| ConvNormRelu::new(s, init, &format!("aspp.branch{i}"), cin, ch, ConvGeom::square(3, 1, d, d)))
            .collect();
        let pool = Conv::new(s, init, "aspp.pool", cin, ch, ConvGeom::square(1, 1, 0, 1), true);
        let n = dilations.len() + 1;
        let project = ConvNormRelu::new(s, init, "aspp.project", n * ch, ch, ConvGeom::square(1, 1, 0, 1));
        Aspp { branches, pool, project }
    }

    fn forward<'g, T: Float>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let [_, _, h, w] = x.shape();
        let mut outs: Vec<Var<'g, T>> = self.branches.iter().map(|b| b.forward(g, s, x)).collect();
        let pooled = self.pool.forward(g, s, &x.spatial_mean()).relu();
        outs.push(pooled.broadcast_spatial(h, w));
        let refs: Vec<&Var<'g, T>> = outs.iter().collect();
        self.project.forward(g, s, &concat_channels(&refs))
    }
}

#[derive(Clone)]
struct DecoderStage {
    up: ConvTranspose,
    up_norm: Norm,
    fuse: Option<ConvNormRelu>,
    refine: ResidualBlock,
}

#[derive(Clone)]
struct Head {
    kind: MapKind,
    hidden: Conv,
    out: Conv,
}

#[derive(Clone)]
pub struct GeneratorNetwork<T: Float> {
    pub config: GeneratorConfig,
    pub params: ParamStore<T>,
    stem: ConvNormRelu,
    stages: Vec<Vec<ResidualBlock>>,
    aspp: Aspp,
    decoder: Vec<DecoderStage>,
    interp_fuse: Option<ConvNormRelu>,
    trunk: ConvNormRelu,
    heads: Vec<Head>,
}

/// Outputs in [`MapKind::ALL`] order plus the shared trunk features.
pub struct GeneratorOutputs<'g, T: Float> {
    pub maps: [Var<'g, T>; 4],
    pub trunk: Var<'g, T>,
}

impl<'g, T: Float> GeneratorOutputs<'g, T> {
    pub fn map(&self, kind: MapKind) -> &Var<'g, T> {
        &self.maps[crate::convert::kind_index(kind)]
    }
}

pub fn build_generator<T: Float>(config: &GeneratorConfig) -> Result<GeneratorNetwork<T>> {
    config.validate()?;
    let c = config;
    let mut s = ParamStore::new();
    let init = &mut Init::new(c.seed);
    let stem = ConvNormRelu::new(&mut s, init, "stem", 3, c.stem_channels, ConvGeom::square(3, 2, 1, 1));
    let mut stages = Vec::new();
    let mut cin = c.stem_channels;
    for (si, (&blocks, &ch)) in c.encoder_block_counts.iter().zip(&c.encoder_channels).enumerate() {
        let stage = (0..blocks)
            .map(|b| {
                let stride = if si > 0 && b == 0 { 2 } else { 1 };
                let block = ResidualBlock::new(&mut s, init, &format!("enc{si}.{b}"), cin, ch, stride);
                cin = ch;
                block
            })
            .collect();
        stages.push(stage);
    }
    let aspp = Aspp::new(&mut s, init, cin, c.aspp_channels, &c.aspp_dilations);
    cin = c.aspp_channels;
    let mut decoder = Vec::new();
    let mut interp_fuse = None;
    match c.upsampling {
        Upsampling::Learned => {
            for (i, &ch) in c.decoder_channels.iter().enumerate() {
                let up = ConvTranspose::new(&mut s, init, &format!("dec{i}.up"), cin, ch, ConvGeom::square(4, 2, 1, 1));
                let up_norm = Norm::new(&mut s, &format!("dec{i}.up_norm"), ch);
                let fuse = c.input_skips.then(|| {
                    ConvNormRelu::new(&mut s, init, &format!("dec{i}.fuse"), ch + 3, ch, ConvGeom::square(1, 1, 0, 1))
                });
                let refine = ResidualBlock::new(&mut s, init, &format!("dec{i}.refine"), ch, ch, 1);
                decoder.push(DecoderStage { up, up_norm, fuse, refine });
                cin = ch;
            }
        }
        Upsampling::Interpolate => {
            if c.input_skips {
                interp_fuse =
                    Some(ConvNormRelu::new(&mut s, init, "interp.fuse", cin + 3, cin, ConvGeom::square(1, 1, 0, 1)));
            }
        }
    }
    let trunk = ConvNormRelu::new(&mut s, init, "trunk", cin, c.trunk_channels, ConvGeom::square(1, 1, 0, 1));
    let heads = c
        .heads
        .iter()
        .map(|h| {
            let name = h.kind.name();
            let pw = ConvGeom::square(1, 1, 0, 1);
            Head {
                kind: h.kind,
                hidden: Conv::new(&mut s, init, &format!("head.{name}.hidden"), c.trunk_channels, c.head_hidden, pw, true),
                out: Conv::new(&mut s, init, &format!("head.{name}.out"), c.head_hidden, h.channels, pw, true),
            }
        })
        .collect();
    Ok(GeneratorNetwork { config: config.clone(), params: s, stem, stages, aspp, decoder, interp_fuse, trunk, heads })
}

/// Unit-length, upward-facing normals from raw head output in `[0, 1]`.
pub fn renormalize_encoded_normals<'g, T: Float>(raw: &Var<'g, T>) -> Var<'g, T> {
    let v = raw.affine(2.0, -1.0);
    let (x, y) = (v.slice_channels(0, 1), v.slice_channels(1, 1));
    let z = v.slice_channels(2, 1).clamp_min(surfacenet_core::material::MIN_NORMAL_Z);
    let len = x.square().add(&y.square()).add(&z.square()).sqrt();
    let unit = concat_channels(&[&x, &y, &z]).div(&concat_channels(&[&len, &len, &len]));
    unit.affine(0.5, 0.5)
}

fn check_input(shape: [usize; 4], multiple: usize) -> Result<()> {
    let [_, c, h, w] = shape;
    if c != 3 {
        return Err(ModelError::Shape(format!("generator input needs 3 channels, got {c}")));
    }
    if h == 0 || w == 0 || h % multiple != 0 || w % multiple != 0 {
        return Err(ModelError::Shape(format!(
            "input resolution {w}x{h} is not a multiple of {multiple} (encoder stride constraint); pad or crop the image"
        )));
    }
    Ok(())
}

impl<T: Float> GeneratorNetwork<T> {
    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Parameters owned by one head.
    pub fn head_params(&self, kind: MapKind) -> Vec<ParamId> {
        self.heads
            .iter()
            .filter(|h| h.kind == kind)
            .flat_map(|h| [Some(h.hidden.weight()), h.hidden.bias(), Some(h.out.weight()), h.out.bias()])
            .flatten()
            .collect()
    }

    /// `image` is linear RGB in `[0, 1]`, shaped `[N, 3, H, W]`.
    pub fn forward<'g>(&self, g: &'g Graph<T>, image: &Var<'g, T>) -> Result<GeneratorOutputs<'g, T>> {
        check_input(image.shape(), self.config.input_multiple)?;
        let s = &self.params;
        let [_, _, h, w] = image.shape();
        let x0 = image.relu_pow(1.0 / INPUT_GAMMA);
        let mut x = self.stem.forward(g, s, &x0);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(g, s, &x);
            }
        }
        x = self.aspp.forward(g, s, &x);
        if self.decoder.is_empty() {
            x = x.resize_bilinear(h, w);
            if let Some(fuse) = &self.interp_fuse {
                x = fuse.forward(g, s, &concat_channels(&[&x, &x0]));
            }
        }
        for (i, stage) in self.decoder.iter().enumerate() {
            x = stage.up_norm.forward(g, s, &stage.up.forward(g, s, &x)).relu();
            if let Some(fuse) = &stage.fuse {
                let factor = 1 << (self.decoder.len() - 1 - i);
                let skip = downsample_var(&x0, factor);
                x = fuse.forward(g, s, &concat_channels(&[&x, &skip]));
            }
            x = stage.refine.forward(g, s, &x);
        }
        let trunk = self.trunk.forward(g, s, &x);
        let mut maps: [Option<Var<'g, T>>; 4] = Default::default();
        for head in &self.heads {
            let raw = head.out.forward(g, s, &head.hidden.forward(g, s, &trunk).relu()).sigmoid();
            let out = if head.kind == MapKind::Normal { renormalize_encoded_normals(&raw) } else { raw };
            maps[crate::convert::kind_index(head.kind)] = Some(out);
        }
        let maps = maps.map(|m| m.expect("one head per kind"));
        Ok(GeneratorOutputs { maps, trunk })
    }

    /// Batched inference on linear RGB rasters.
    pub fn predict(&self, images: &[&Raster]) -> Result<Vec<MaterialMaps>> {
        let g = Graph::no_grad();
        let input = g.constant(rasters_to_tensor(images)?);
        let out = self.forward(&g, &input)?;
        let [d, n, r, sp] = &out.maps;
        (0..images.len()).map(|i| tensors_to_maps([d.value(), n.value(), r.value(), sp.value()], i)).collect()
    }
}

fn downsample_var<'g, T: Float>(x: &Var<'g, T>, factor: usize) -> Var<'g, T> {
    if factor == 1 {
        x.clone()
    } else {
        x.avg_pool(factor)
    }
}

/// Single-image inference. `image` is linear RGB in `[0, 1]`.
pub fn generator_forward(net: &GeneratorNetwork<f32>, image: &Raster) -> Result<MaterialMaps> {
    Ok(net.predict(&[image])?.remove(0))
}

/// Area-average downsampling by 1, 2 or 4.
pub fn downsample_input(image: &Raster, factor: usize) -> Result<Raster> {
    if ![1, 2, 4].contains(&factor) {
        return Err(ModelError::Shape(format!("downsample factor {factor} is not one of 1, 2, 4")));
    }
    let (w, h) = (image.width(), image.height());
    if w % factor != 0 || h % factor != 0 {
        return Err(ModelError::Shape(format!("{w}x{h} is not divisible by {factor}")));
    }
    if factor == 1 {
        return Ok(image.clone());
    }
    let t: Tensor<f64> = crate::convert::raster_to_tensor(image);
    Ok(crate::convert::tensor_to_raster(&crate::kernels::avg_pool(&t, factor), 0))
}

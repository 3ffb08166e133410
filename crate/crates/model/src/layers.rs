//! Parameterized building blocks shared by both networks.

use crate::graph::{Graph, Var};
use crate::kernels::ConvGeom;
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: Option<ParamId>,
    pub geom: ConvGeom,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let fan_in = cin * geom.kh * geom.kw;
        let w = store.add(format!("{name}.weight"), init.he([cout, cin, geom.kh, geom.kw], fan_in));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1])));
        Conv { w, b, geom, cin, cout }
    }

    pub fn k(store: &mut ParamStore<impl Float>, init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(store, init, name, cin, cout, ConvGeom::square(k, 1, k / 2, 1), true)
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let w = g.param(s, self.w);
        let b = self.b.map(|b| g.param(s, b));
        x.conv2d(&w, b.as_ref(), self.geom)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.b
    }
}

/// Transposed convolution, weights `[cin, cout, k, k]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose {
    w: ParamId,
    b: ParamId,
    geom: ConvGeom,
}

impl ConvTranspose {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        // Each output pixel of a stride-s transposed conv sees about k²/s² taps per input channel.
        let fan_in = (cin * geom.kh * geom.kw / (geom.stride * geom.stride)).max(1);
        let w = store.add(format!("{name}.weight"), init.he([cin, cout, geom.kh, geom.kw], fan_in));
        let b = store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]));
        ConvTranspose { w, b, geom }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        x.conv_transpose2d(&g.param(s, self.w), Some(&g.param(s, self.b)), self.geom)
    }
}

/// Group normalization with a per-channel affine.
#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
    pub groups: usize,
}

/// Largest of 8, 4, 2 groups that keeps at least two channels per group.
pub fn group_count(channels: usize) -> usize {
    [8, 4, 2].into_iter().find(|&g| channels % g == 0 && channels / g >= 2).unwrap_or(1)
}

impl Norm {
    pub fn new<T: Float>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([1, channels, 1, 1], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]));
        Norm { gamma, beta, groups: group_count(channels) }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        x.group_norm(&g.param(s, self.gamma), &g.param(s, self.beta), self.groups, NORM_EPS)
    }
}

/// Convolution, group norm, ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    conv: Conv,
    norm: Norm,
}

impl ConvNormRelu {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize, geom: ConvGeom) -> Self {
        ConvNormRelu {
            conv: Conv::new(store, init, &format!("{name}.conv"), cin, cout, geom, false),
            norm: Norm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        self.norm.forward(g, s, &self.conv.forward(g, s, x)).relu()
    }
}

/// Two 3×3 convolutions with an identity or projected shortcut.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    conv1: Conv,
    norm1: Norm,
    conv2: Conv,
    norm2: Norm,
    shortcut: Option<(Conv, Norm)>,
}

impl ResidualBlock {
    pub fn new<T: Float>(store: &mut ParamStore<T>, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let conv1 = Conv::new(store, init, &format!("{name}.conv1"), cin, cout, ConvGeom::square(3, stride, 1, 1), false);
        let norm1 = Norm::new(store, &format!("{name}.norm1"), cout);
        let conv2 = Conv::new(store, init, &format!("{name}.conv2"), cout, cout, ConvGeom::square(3, 1, 1, 1), false);
        let norm2 = Norm::new(store, &format!("{name}.norm2"), cout);
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv::new(store, init, &format!("{name}.proj"), cin, cout, ConvGeom::square(1, stride, 0, 1), false),
                Norm::new(store, &format!("{name}.proj_norm"), cout),
            )
        });
        ResidualBlock { conv1, norm1, conv2, norm2, shortcut }
    }

    pub fn forward<'g, T: Float>(&self, g: &'g Graph<T>, s: &ParamStore<T>, x: &Var<'g, T>) -> Var<'g, T> {
        let h = self.norm1.forward(g, s, &self.conv1.forward(g, s, x)).relu();
        let h = self.norm2.forward(g, s, &self.conv2.forward(g, s, &h));
        let skip = match &self.shortcut {
            Some((c, n)) => n.forward(g, s, &c.forward(g, s, x)),
            None => x.clone(),
        };
        h.add(&skip).relu()
    }
}

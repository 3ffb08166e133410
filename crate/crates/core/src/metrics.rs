//! Map and rendering errors used for evaluation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::material::{MapKind, MaterialMaps, Raster};
use crate::renderer::{render_flash, LightSetup, EVALUATION_FLASH_POSITIONS};

/// One value per map kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PerMap {
    pub diffuse: f64,
    pub normal: f64,
    pub roughness: f64,
    pub specular: f64,
}

impl PerMap {
    pub fn get(&self, kind: MapKind) -> f64 {
        match kind {
            MapKind::Diffuse => self.diffuse,
            MapKind::Normal => self.normal,
            MapKind::Roughness => self.roughness,
            MapKind::Specular => self.specular,
        }
    }

    pub fn get_mut(&mut self, kind: MapKind) -> &mut f64 {
        match kind {
            MapKind::Diffuse => &mut self.diffuse,
            MapKind::Normal => &mut self.normal,
            MapKind::Roughness => &mut self.roughness,
            MapKind::Specular => &mut self.specular,
        }
    }

    pub fn from_fn(mut f: impl FnMut(MapKind) -> f64) -> Self {
        let mut p = PerMap::default();
        for k in MapKind::ALL {
            *p.get_mut(k) = f(k);
        }
        p
    }

    pub fn mean(&self) -> f64 {
        MapKind::ALL.iter().map(|&k| self.get(k)).sum::<f64>() / 4.0
    }

    pub fn sum(&self) -> f64 {
        MapKind::ALL.iter().map(|&k| self.get(k)).sum()
    }
}

/// Root-mean-square difference of two rasters of the same shape.
pub fn rmse(a: &Raster, b: &Raster) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    let n = a.data().len().max(1) as f64;
    let sse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((sse / n).sqrt())
}

/// Per-kind RMSE in stored `[0, 1]` space (normals compared encoded).
pub fn rmse_maps(pred: &MaterialMaps, gt: &MaterialMaps) -> Result<PerMap> {
    let mut out = PerMap::default();
    for k in MapKind::ALL {
        *out.get_mut(k) = rmse(pred.map(k), gt.map(k)).map_err(|e| match e {
            Error::Shape(m) => Error::Shape(format!("{k}: {m}")),
            e => e,
        })?;
    }
    Ok(out)
}

/// Mean over the five evaluation flash positions of the tone-mapped
/// rendering RMSE.
pub fn rmse_renderings(pred: &MaterialMaps, gt: &MaterialMaps) -> Result<f64> {
    let mut total = 0.0;
    for (_, pos) in EVALUATION_FLASH_POSITIONS {
        let light = LightSetup::flash_at(pos);
        let a = render_flash(pred, &light)?;
        let b = render_flash(gt, &light)?;
        total += rmse(&a.tone_mapped, &b.tone_mapped)?;
    }
    Ok(total / EVALUATION_FLASH_POSITIONS.len() as f64)
}

/// Spatial averages of roughness and specular, for comparison with
/// methods that predict homogeneous values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMaterial {
    pub roughness: f64,
    pub specular: [f64; 3],
}

pub fn scalar_reduce(maps: &MaterialMaps) -> ScalarMaterial {
    let s = maps.specular.channel_means();
    ScalarMaterial {
        roughness: maps.roughness.channel_means()[0],
        specular: [s[0], s[1], s[2]],
    }
}

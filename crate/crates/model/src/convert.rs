//! Conversions between interleaved rasters and planar tensors.

use surfacenet_core::{MapKind, MaterialMaps, Raster};

use crate::error::{ModelError, Result};
use crate::tensor::{Float, Tensor};

/// Position of `kind` in [`MapKind::ALL`], which is also the order of generator outputs.
pub fn kind_index(kind: MapKind) -> usize {
    MapKind::ALL.iter().position(|&k| k == kind).expect("kind in ALL")
}

/// Batch of rasters as `[N, C, H, W]`. All rasters must share a shape.
pub fn rasters_to_tensor<T: Float>(rasters: &[&Raster]) -> Result<Tensor<T>> {
    let first = rasters.first().ok_or_else(|| ModelError::Shape("empty raster batch".into()))?;
    let (w, h, c) = (first.width(), first.height(), first.channels());
    let mut t = Tensor::zeros([rasters.len(), c, h, w]);
    for (n, r) in rasters.iter().enumerate() {
        if !r.same_shape(first) {
            return Err(ModelError::Shape(format!(
                "raster {n} is {}x{}x{}, batch expects {w}x{h}x{c}",
                r.width(),
                r.height(),
                r.channels()
            )));
        }
        let dst = t.sample_mut(n);
        for (i, &v) in r.data().iter().enumerate() {
            let (pix, ch) = (i / c, i % c);
            dst[ch * h * w + pix] = T::from_f64(v as f64);
        }
    }
    Ok(t)
}

pub fn raster_to_tensor<T: Float>(r: &Raster) -> Tensor<T> {
    rasters_to_tensor(&[r]).expect("single raster")
}

/// Sample `n` of a tensor as an interleaved raster.
pub fn tensor_to_raster<T: Float>(t: &Tensor<T>, n: usize) -> Raster {
    let [_, c, h, w] = t.shape();
    let src = t.sample(n);
    Raster::from_fn(w, h, c, |x, y, ch| src[(ch * h + y) * w + x].as_f64() as f32)
}

/// Per-kind batch tensors in [`MapKind::ALL`] order.
pub fn maps_to_tensors<T: Float>(maps: &[&MaterialMaps]) -> Result<[Tensor<T>; 4]> {
    let one = |kind: MapKind| rasters_to_tensor(&maps.iter().map(|m| m.map(kind)).collect::<Vec<_>>());
    Ok([one(MapKind::Diffuse)?, one(MapKind::Normal)?, one(MapKind::Roughness)?, one(MapKind::Specular)?])
}

pub fn tensors_to_maps<T: Float>(maps: [&Tensor<T>; 4], n: usize) -> Result<MaterialMaps> {
    Ok(MaterialMaps::new(
        tensor_to_raster(maps[0], n),
        tensor_to_raster(maps[1], n),
        tensor_to_raster(maps[2], n),
        tensor_to_raster(maps[3], n),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use surfacenet_core::{generate_procedural, Pattern};

    #[test]
    fn maps_round_trip_through_tensors() {
        let m = generate_procedural(3, Pattern::Bricks, 32).unwrap();
        let t = maps_to_tensors::<f32>(&[&m, &m]).unwrap();
        assert_eq!(t[kind_index(MapKind::Roughness)].shape(), [2, 1, 32, 32]);
        let back = tensors_to_maps([&t[0], &t[1], &t[2], &t[3]], 1).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn mismatched_batch_is_rejected() {
        let a = Raster::new(4, 4, 3);
        let b = Raster::new(4, 2, 3);
        assert!(rasters_to_tensor::<f32>(&[&a, &b]).is_err());
    }
}

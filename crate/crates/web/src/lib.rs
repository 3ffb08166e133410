//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Images cross the boundary as RGBA bytes ready for `ImageData`. The
//! `*_impl` functions hold the logic so it can be tested natively.

use surfacenet_core::dataset::encode_gamma;
use surfacenet_core::renderer::random_environment;
use surfacenet_core::{
    generate_procedural, render, rmse_maps, rmse_renderings, LightSetup, MapKind, MaterialMaps, Pattern, Raster,
    Vec3,
};
use wasm_bindgen::prelude::*;

/// Demo resolutions are capped to keep relighting interactive.
pub const MAX_RESOLUTION: usize = 512;

const ENVIRONMENT_SAMPLES: usize = 24;

/// A procedural material held on the Rust side.
#[wasm_bindgen]
pub struct Material {
    maps: MaterialMaps,
}

#[wasm_bindgen]
impl Material {
    /// `pattern` is one of `pattern_names()`; `resolution` a power of two from 32.
    #[wasm_bindgen(constructor)]
    pub fn new(pattern: &str, seed: u64, resolution: usize) -> Result<Material, JsError> {
        generate_impl(pattern, seed, resolution).map_err(|e| JsError::new(&e))
    }

    pub fn resolution(&self) -> usize {
        self.maps.width()
    }

    /// One map as RGBA; normals are shown encoded, scalars as grey.
    pub fn map_rgba(&self, kind: &str) -> Result<Vec<u8>, JsError> {
        map_rgba_impl(&self.maps, kind).map_err(|e| JsError::new(&e))
    }

    /// Flash render with the light at `(x, y, z)` over the unit plane.
    pub fn relight_flash(&self, x: f64, y: f64, z: f64) -> Result<Vec<u8>, JsError> {
        relight_impl(&self.maps, &LightSetup::flash_at(Vec3::new(x, y, z))).map_err(|e| JsError::new(&e))
    }

    /// Render under a random sky and sun environment chosen by `seed`.
    pub fn relight_environment(&self, seed: u64) -> Result<Vec<u8>, JsError> {
        relight_impl(&self.maps, &random_environment(ENVIRONMENT_SAMPLES, seed)).map_err(|e| JsError::new(&e))
    }

    /// Per-map RMSE against `other` followed by the rendering RMSE:
    /// `[diffuse, normal, roughness, specular, rendering]`.
    pub fn compare(&self, other: &Material) -> Result<Vec<f64>, JsError> {
        compare_impl(&self.maps, &other.maps).map_err(|e| JsError::new(&e))
    }
}

#[wasm_bindgen]
pub fn pattern_names() -> Vec<String> {
    Pattern::ALL.iter().map(|p| p.name().to_string()).collect()
}

pub fn generate_impl(pattern: &str, seed: u64, resolution: usize) -> Result<Material, String> {
    if resolution > MAX_RESOLUTION {
        return Err(format!("resolution {resolution} is above the demo limit of {MAX_RESOLUTION}"));
    }
    let pattern: Pattern = pattern.parse().map_err(|e: surfacenet_core::Error| e.to_string())?;
    let maps = generate_procedural(seed, pattern, resolution).map_err(|e| e.to_string())?;
    Ok(Material { maps })
}

pub fn map_rgba_impl(maps: &MaterialMaps, kind: &str) -> Result<Vec<u8>, String> {
    let kind = match kind {
        "diffuse" => MapKind::Diffuse,
        "normal" => MapKind::Normal,
        "roughness" => MapKind::Roughness,
        "specular" => MapKind::Specular,
        other => return Err(format!("unknown map `{other}`")),
    };
    let raster = maps.map(kind);
    let encoded = if kind == MapKind::Diffuse { raster.map(encode_gamma) } else { raster.clone() };
    Ok(to_rgba(&encoded))
}

pub fn relight_impl(maps: &MaterialMaps, light: &LightSetup) -> Result<Vec<u8>, String> {
    let image = render(maps, light).map_err(|e| e.to_string())?;
    Ok(to_rgba(&image.tone_mapped))
}

pub fn compare_impl(a: &MaterialMaps, b: &MaterialMaps) -> Result<Vec<f64>, String> {
    let per_map = rmse_maps(a, b).map_err(|e| e.to_string())?;
    let rendering = rmse_renderings(a, b).map_err(|e| e.to_string())?;
    let mut out: Vec<f64> = MapKind::ALL.iter().map(|&k| per_map.get(k)).collect();
    out.push(rendering);
    Ok(out)
}

/// Values in `[0, 1]` to RGBA bytes; one channel is broadcast to grey.
pub fn to_rgba(r: &Raster) -> Vec<u8> {
    let mut out = Vec::with_capacity(r.width() * r.height() * 4);
    for y in 0..r.height() {
        for x in 0..r.width() {
            let px = r.pixel(x, y);
            for c in 0..3 {
                let v = px[c.min(px.len() - 1)];
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
    }
    out
}

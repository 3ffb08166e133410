//! Cook-Torrance shading with a GGX normal distribution, Smith geometry
//! (k = a²/2, a = roughness²) and Schlick Fresnel.
//!
//! The surface is the plane `[-1, 1]²` at `z = 0`; image row 0 is `y = +1`.
//! Flash mode places a point light co-located with the camera, so light and
//! view vectors coincide per pixel and irradiance falls off with the inverse
//! square of distance. Environment mode is a sum of directional lights seen
//! by an orthographic overhead camera.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};
use crate::material::{MaterialMaps, Raster, SurfacePoint};
use crate::vec3::Vec3;

/// Floor on the GGX width parameter `a = roughness²`.
pub const MIN_GGX_ALPHA: f64 = 1e-3;

/// Floor on the `4 (n·l)(n·v)` denominator of the specular lobe.
pub const SPECULAR_DENOM_EPS: f64 = 1e-6;

/// Display gamma used by [`tonemap`] and by 8-bit storage.
pub const GAMMA: f64 = 2.2;

/// Default flash radiant intensity. With the flash one unit above a
/// Lambertian plane this makes the centre radiance equal to the albedo.
pub const DEFAULT_FLASH_INTENSITY: f64 = PI;

/// Default flash height above the plane.
pub const FLASH_HEIGHT: f64 = 1.0;

/// The five flash positions used for rendering comparisons: quadrant
/// centres and the plane centre.
pub const EVALUATION_FLASH_POSITIONS: [(&str, Vec3); 5] = [
    ("top-left", Vec3::new(-0.5, 0.5, FLASH_HEIGHT)),
    ("top-right", Vec3::new(0.5, 0.5, FLASH_HEIGHT)),
    ("bottom-left", Vec3::new(-0.5, -0.5, FLASH_HEIGHT)),
    ("bottom-right", Vec3::new(0.5, -0.5, FLASH_HEIGHT)),
    ("center", Vec3::new(0.0, 0.0, FLASH_HEIGHT)),
];

/// GGX (Trowbridge-Reitz) normal distribution.
pub fn ggx_distribution(roughness: f64, cos_theta_h: f64) -> f64 {
    let a = (roughness * roughness).max(MIN_GGX_ALPHA);
    let a2 = a * a;
    let c2 = cos_theta_h * cos_theta_h;
    let t = c2 * (a2 - 1.0) + 1.0;
    a2 / (PI * t * t)
}

/// Separable Smith masking-shadowing for GGX with `k = a² / 2`.
pub fn smith_geometry(roughness: f64, cos_theta_l: f64, cos_theta_v: f64) -> f64 {
    let a = roughness * roughness;
    let k = a * a * 0.5;
    let g1 = |c: f64| c / (c * (1.0 - k) + k);
    g1(cos_theta_l) * g1(cos_theta_v)
}

/// Schlick's approximation of Fresnel reflectance.
pub fn fresnel_schlick(f0: [f64; 3], cos_theta_d: f64) -> [f64; 3] {
    let w = (1.0 - cos_theta_d).clamp(0.0, 1.0).powi(5);
    f0.map(|f| f + (1.0 - f) * w)
}

/// Reflected radiance at one surface point for a single light.
///
/// `light_dir` and `view_dir` point away from the surface.
pub fn shade_pixel(
    p: &SurfacePoint,
    light_dir: Vec3,
    view_dir: Vec3,
    light_radiance: [f64; 3],
) -> Result<[f64; 3]> {
    let finite = p.diffuse.iter().chain(&p.specular).all(|v| v.is_finite())
        && p.roughness.is_finite()
        && p.normal.is_finite()
        && light_dir.is_finite()
        && view_dir.is_finite()
        && light_radiance.iter().all(|v| v.is_finite());
    if !finite {
        return Err(Error::Validation("non-finite shading input".into()));
    }
    let n = p.normal;
    let n_dot_l = n.dot(light_dir);
    let n_dot_v = n.dot(view_dir);
    if n_dot_l <= 0.0 || n_dot_v <= 0.0 {
        return Ok([0.0; 3]);
    }
    let h = (light_dir + view_dir).normalize();
    let n_dot_h = n.dot(h).clamp(0.0, 1.0);
    let v_dot_h = view_dir.dot(h).clamp(0.0, 1.0);
    let d = ggx_distribution(p.roughness, n_dot_h);
    let g = smith_geometry(p.roughness, n_dot_l.min(1.0), n_dot_v.min(1.0));
    let f = fresnel_schlick(p.specular, v_dot_h);
    let denom = (4.0 * n_dot_l * n_dot_v).max(SPECULAR_DENOM_EPS);
    let mut out = [0.0; 3];
    for c in 0..3 {
        let brdf = p.diffuse[c] / PI + d * f[c] * g / denom;
        out[c] = brdf * n_dot_l * light_radiance[c];
    }
    debug_assert!(out.iter().all(|v| v.is_finite()));
    Ok(out)
}

/// One directional light sample of an environment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvironmentSample {
    pub direction: Vec3,
    pub radiance: [f64; 3],
}

/// Illumination description.
#[derive(Clone, Debug, PartialEq)]
pub enum LightSetup {
    /// Point light co-located with the camera.
    Flash { position: Vec3, intensity: f64 },
    /// Sum of directional lights with an overhead orthographic camera.
    Environment { samples: Vec<EnvironmentSample> },
}

impl LightSetup {
    /// Flash centred above the plane at the default height and intensity.
    pub fn centered_flash() -> Self {
        Self::flash_at(Vec3::new(0.0, 0.0, FLASH_HEIGHT))
    }

    pub fn flash_at(position: Vec3) -> Self {
        LightSetup::Flash {
            position,
            intensity: DEFAULT_FLASH_INTENSITY,
        }
    }

    pub fn sample_count(&self) -> usize {
        match self {
            LightSetup::Flash { .. } => 1,
            LightSetup::Environment { samples } => samples.len(),
        }
    }

    /// Checks the invariants of the selected mode.
    pub fn validate(&self) -> Result<()> {
        match self {
            LightSetup::Flash {
                position,
                intensity,
            } => {
                if !(position.z > 0.0) || !position.is_finite() {
                    return Err(Error::Validation(format!(
                        "flash position {position} must lie above the plane (z > 0)"
                    )));
                }
                if !(*intensity >= 0.0) || !intensity.is_finite() {
                    return Err(Error::Validation(format!(
                        "flash intensity {intensity} must be finite and non-negative"
                    )));
                }
            }
            LightSetup::Environment { samples } => {
                if samples.is_empty() {
                    return Err(Error::Validation(
                        "environment light needs at least one sample".into(),
                    ));
                }
                for (i, s) in samples.iter().enumerate() {
                    if (s.direction.length() - 1.0).abs() > 1e-6 || !(s.direction.z > 0.0) {
                        return Err(Error::Validation(format!(
                            "environment sample {i}: direction {} must be unit with z > 0",
                            s.direction
                        )));
                    }
                    if s.radiance.iter().any(|v| !v.is_finite() || *v < 0.0) {
                        return Err(Error::Validation(format!(
                            "environment sample {i}: radiance must be finite and non-negative"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Multiplies every light's power by `k`.
    pub fn scaled(&self, k: f64) -> Self {
        match self {
            LightSetup::Flash {
                position,
                intensity,
            } => LightSetup::Flash {
                position: *position,
                intensity: intensity * k,
            },
            LightSetup::Environment { samples } => LightSetup::Environment {
                samples: samples
                    .iter()
                    .map(|s| EnvironmentSample {
                        direction: s.direction,
                        radiance: s.radiance.map(|r| r * k),
                    })
                    .collect(),
            },
        }
    }
}

/// Linear radiance plus its display-space version.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    pub linear: Raster,
    pub tone_mapped: Raster,
}

impl RenderedImage {
    pub fn from_linear(linear: Raster) -> Self {
        let tone_mapped = tonemap(&linear);
        Self {
            linear,
            tone_mapped,
        }
    }

    /// Rebuilds the linear image from a display-space one. Values that were
    /// clipped by the tone curve are not recoverable.
    pub fn from_tone_mapped(tone_mapped: Raster) -> Self {
        let linear = tone_mapped.map(|v| (v.clamp(0.0, 1.0) as f64).powf(GAMMA) as f32);
        Self {
            linear,
            tone_mapped,
        }
    }
}

/// Centre of pixel `(x, y)` on the plane.
#[inline]
pub fn pixel_position(x: usize, y: usize, width: usize, height: usize) -> Vec3 {
    Vec3::new(
        -1.0 + (x as f64 + 0.5) * 2.0 / width as f64,
        1.0 - (y as f64 + 0.5) * 2.0 / height as f64,
        0.0,
    )
}

/// Renders under either light mode.
pub fn render(maps: &MaterialMaps, setup: &LightSetup) -> Result<RenderedImage> {
    match setup {
        LightSetup::Flash { .. } => render_flash(maps, setup),
        LightSetup::Environment { .. } => render_environment(maps, setup),
    }
}

/// Renders under a co-located flash.
pub fn render_flash(maps: &MaterialMaps, setup: &LightSetup) -> Result<RenderedImage> {
    let LightSetup::Flash {
        position,
        intensity,
    } = setup
    else {
        return Err(Error::Validation("render_flash needs a flash light".into()));
    };
    setup.validate()?;
    let (h, w) = maps.resolution();
    let mut out = Raster::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let p = pixel_position(x, y, w, h);
            let to_light = *position - p;
            let dist2 = to_light.length_squared();
            let dir = to_light * (1.0 / dist2.sqrt());
            let e = intensity / dist2;
            let rgb = shade_pixel(&maps.surface_point(x, y), dir, dir, [e; 3])?;
            let px = out.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = rgb[c] as f32;
            }
        }
    }
    Ok(RenderedImage::from_linear(out))
}

/// Renders under a list of directional samples with an overhead camera.
pub fn render_environment(maps: &MaterialMaps, setup: &LightSetup) -> Result<RenderedImage> {
    let LightSetup::Environment { samples } = setup else {
        return Err(Error::Validation(
            "render_environment needs an environment light".into(),
        ));
    };
    setup.validate()?;
    let (h, w) = maps.resolution();
    let mut out = Raster::new(w, h, 3);
    for y in 0..h {
        for x in 0..w {
            let sp = maps.surface_point(x, y);
            let mut acc = [0.0f64; 3];
            for s in samples {
                let rgb = shade_pixel(&sp, s.direction, Vec3::Z, s.radiance)?;
                for c in 0..3 {
                    acc[c] += rgb[c];
                }
            }
            let px = out.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = acc[c] as f32;
            }
        }
    }
    Ok(RenderedImage::from_linear(out))
}

/// Clamps to `[0, 1]` and applies display gamma.
pub fn tonemap(linear: &Raster) -> Raster {
    linear.map(|v| tonemap_value(v as f64) as f32)
}

#[inline]
pub fn tonemap_value(v: f64) -> f64 {
    v.clamp(0.0, 1.0).powf(1.0 / GAMMA)
}

/// Parses an environment sample list: one `dx dy dz r g b` line per
/// sample. Blank lines and `#` comments are ignored; directions are
/// normalized.
pub fn parse_environment(text: &str) -> Result<LightSetup> {
    let mut samples = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))?;
        if vals.len() != 6 {
            return Err(Error::Parse(format!(
                "line {}: expected 6 values `dx dy dz r g b`, found {}",
                lineno + 1,
                vals.len()
            )));
        }
        let d = Vec3::new(vals[0], vals[1], vals[2]);
        if !(d.length() > 0.0) {
            return Err(Error::Parse(format!("line {}: zero direction", lineno + 1)));
        }
        samples.push(EnvironmentSample {
            direction: d.normalize(),
            radiance: [vals[3], vals[4], vals[5]],
        });
    }
    let setup = LightSetup::Environment { samples };
    setup.validate()?;
    Ok(setup)
}

pub fn load_environment(path: &Path) -> Result<LightSetup> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_environment(&text)
}

/// Writes samples in the format read by [`parse_environment`].
pub fn format_environment(samples: &[EnvironmentSample]) -> String {
    let mut s = String::from("# dx dy dz r g b\n");
    for e in samples {
        s.push_str(&format!(
            "{} {} {} {} {} {}\n",
            e.direction.x, e.direction.y, e.direction.z, e.radiance[0], e.radiance[1], e.radiance[2]
        ));
    }
    s
}

/// Cosine-weighted hemisphere directions on a stratified grid, each with
/// radiance `total / count`. Directions keep z > 0.
pub fn cosine_hemisphere(count: usize, total: [f64; 3], seed: u64) -> LightSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (count as f64).sqrt().ceil() as usize;
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let (sx, sy) = ((i % side) as f64, (i / side) as f64);
        let u1 = ((sx + rng.random::<f64>()) / side as f64).clamp(0.0, 0.999);
        let u2 = (sy + rng.random::<f64>()) / side as f64;
        let r = u1.sqrt();
        let phi = 2.0 * PI * u2;
        let z = (1.0 - u1).sqrt();
        samples.push(EnvironmentSample {
            direction: Vec3::new(r * phi.cos(), r * phi.sin(), z).normalize(),
            radiance: total.map(|t| t / count as f64),
        });
    }
    LightSetup::Environment { samples }
}

/// A random natural-looking environment: a dim tinted sky dome plus one or
/// two bright lobes, deterministic in `seed`.
pub fn random_environment(count: usize, seed: u64) -> LightSetup {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sky = [
        rng.random_range(0.4..0.8),
        rng.random_range(0.5..0.8),
        rng.random_range(0.6..1.0),
    ];
    let LightSetup::Environment { mut samples } = cosine_hemisphere(count, sky, seed ^ 0x5eed)
    else {
        unreachable!()
    };
    let lobes = rng.random_range(1..=2);
    for _ in 0..lobes {
        let phi = rng.random_range(0.0..2.0 * PI);
        let z: f64 = rng.random_range(0.3..0.95);
        let r = (1.0 - z * z).sqrt();
        let power: f64 = rng.random_range(0.5..1.5);
        let warm: f64 = rng.random_range(0.8..1.0);
        samples.push(EnvironmentSample {
            direction: Vec3::new(r * phi.cos(), r * phi.sin(), z),
            radiance: [power, power * warm, power * warm * warm],
        });
    }
    LightSetup::Environment { samples }
}

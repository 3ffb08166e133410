//! Seeded procedural SVBRDFs.
//!
//! Every pattern first builds a [`Layout`]: a region mask (which of two
//! material "phases" a pixel belongs to) and a height field. The two phases
//! get their own albedo, roughness and specular; the height field drives the
//! normal map. A fine noise overlay is then added to every map.
//!
//! Lattice hashing is integer-only and all noise is periodic over the tile,
//! so outputs are bit-identical across runs and tileable.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::material::{MaterialMaps, Raster};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pattern {
    Checker,
    Bricks,
    Perlin,
    Voronoi,
    Stripes,
}

impl Pattern {
    pub const ALL: [Pattern; 5] = [
        Pattern::Checker,
        Pattern::Bricks,
        Pattern::Perlin,
        Pattern::Voronoi,
        Pattern::Stripes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Checker => "checker",
            Pattern::Bricks => "bricks",
            Pattern::Perlin => "perlin",
            Pattern::Voronoi => "voronoi",
            Pattern::Stripes => "stripes",
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pattern::ALL
            .into_iter()
            .find(|p| p.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown pattern `{s}` (expected one of checker, bricks, perlin, voronoi, stripes)"
                ))
            })
    }
}

/// Region mask and height field, both `res × res`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub resolution: usize,
    pub mask: Vec<f32>,
    pub height: Vec<f32>,
}

/// Per-phase material parameters drawn from the seed.
#[derive(Clone, Debug, PartialEq)]
struct Phases {
    diffuse: [[f32; 3]; 2],
    roughness: [f32; 2],
    specular: [[f32; 3]; 2],
    bump: f32,
    overlay: f32,
}

fn check_resolution(resolution: usize) -> Result<()> {
    if resolution < 32 || !resolution.is_power_of_two() {
        return Err(Error::Validation(format!(
            "procedural resolution must be a power of two >= 32, got {resolution}"
        )));
    }
    Ok(())
}

/// Builds the mask/height layout of `pattern`.
pub fn layout(seed: u64, pattern: Pattern, resolution: usize) -> Result<Layout> {
    check_resolution(resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let n = resolution;
    let hash_seed = rng.random::<u32>();
    let mut mask = vec![0f32; n * n];
    let mut height = vec![0f32; n * n];
    let uv = |i: usize| (i as f32 + 0.5) / n as f32;

    match pattern {
        Pattern::Checker => {
            let cells = [2usize, 4, 8][rng.random_range(0..3)];
            let bevel = rng.random_range(0.04f32..0.12);
            for y in 0..n {
                for x in 0..n {
                    let (u, v) = (uv(x) * cells as f32, uv(y) * cells as f32);
                    let parity = (u.floor() as usize + v.floor() as usize) % 2;
                    let edge = edge_distance(u.fract(), v.fract());
                    mask[y * n + x] = parity as f32;
                    height[y * n + x] = smoothstep(0.0, bevel, edge) * (0.6 + 0.4 * parity as f32);
                }
            }
        }
        Pattern::Bricks => {
            let rows = [4usize, 6, 8][rng.random_range(0..3)];
            let cols = rows / 2;
            let mortar = rng.random_range(0.05f32..0.1);
            for y in 0..n {
                for x in 0..n {
                    let v = uv(y) * rows as f32;
                    let row = v.floor() as usize;
                    let shift = if row % 2 == 1 { 0.5 } else { 0.0 };
                    let u = uv(x) * cols as f32 + shift;
                    let fu = u.fract();
                    let fv = v.fract();
                    let du = fu.min(1.0 - fu) / cols as f32 * rows as f32;
                    let d = du.min(fv.min(1.0 - fv));
                    let brick = smoothstep(mortar * 0.5, mortar, d);
                    mask[y * n + x] = if d > mortar * 0.75 { 1.0 } else { 0.0 };
                    let bid = hash2(u.floor() as i32, row as i32, hash_seed);
                    height[y * n + x] = brick * (0.7 + 0.3 * unit(bid));
                }
            }
        }
        Pattern::Perlin => {
            let freq = [2u32, 4][rng.random_range(0..2)];
            let threshold = rng.random_range(0.4f32..0.6);
            for y in 0..n {
                for x in 0..n {
                    let h = fbm(uv(x), uv(y), freq, 4, hash_seed);
                    height[y * n + x] = h;
                    mask[y * n + x] = smoothstep(threshold - 0.05, threshold + 0.05, h);
                }
            }
        }
        Pattern::Voronoi => {
            let cells = [3u32, 4, 6][rng.random_range(0..3)];
            let crack = rng.random_range(0.03f32..0.08);
            for y in 0..n {
                for x in 0..n {
                    let (f1, f2, id) = voronoi(uv(x), uv(y), cells, hash_seed);
                    let gap = f2 - f1;
                    mask[y * n + x] = if unit(id) > 0.5 { 1.0 } else { 0.0 };
                    height[y * n + x] = smoothstep(0.0, crack, gap) * (0.8 - 0.5 * f1.min(1.0));
                }
            }
        }
        Pattern::Stripes => {
            let count = [3u32, 4, 6, 8][rng.random_range(0..4)];
            let vertical = rng.random_bool(0.5);
            let duty = rng.random_range(0.3f32..0.7);
            for y in 0..n {
                for x in 0..n {
                    let t = if vertical { uv(x) } else { uv(y) } * count as f32;
                    let f = t.fract();
                    mask[y * n + x] = if f < duty { 1.0 } else { 0.0 };
                    let groove = edge_distance(f, 0.5).min((f - duty).abs());
                    height[y * n + x] = smoothstep(0.0, 0.08, groove);
                }
            }
        }
    }
    Ok(Layout {
        resolution: n,
        mask,
        height,
    })
}

fn draw_phases(rng: &mut ChaCha8Rng) -> Phases {
    let color = |rng: &mut ChaCha8Rng| {
        let base = rng.random_range(0.15f32..0.85);
        let tint = [
            rng.random_range(-0.15f32..0.15),
            rng.random_range(-0.15f32..0.15),
            rng.random_range(-0.15f32..0.15),
        ];
        tint.map(|t| (base + t).clamp(0.03, 0.97))
    };
    let diffuse = [color(rng), color(rng)];
    let roughness = [rng.random_range(0.25f32..0.9), rng.random_range(0.25f32..0.9)];
    let spec = |rng: &mut ChaCha8Rng| {
        let s = rng.random_range(0.02f32..0.3);
        let t = rng.random_range(-0.03f32..0.03);
        [s + t, s, s - t].map(|v| v.clamp(0.0, 1.0))
    };
    let specular = [spec(rng), spec(rng)];
    Phases {
        diffuse,
        roughness,
        specular,
        bump: rng.random_range(1.0f32..3.0),
        overlay: rng.random_range(0.02f32..0.08),
    }
}

fn assemble(layout: &Layout, ph: &Phases, overlay: Option<&[f32]>) -> MaterialMaps {
    let n = layout.resolution;
    let mix = |a: f32, b: f32, t: f32| a + (b - a) * t;
    let ov = |i: usize| overlay.map_or(0.0, |o| o[i] - 0.5);
    let mut diffuse = Raster::new(n, n, 3);
    let mut roughness = Raster::new(n, n, 1);
    let mut specular = Raster::new(n, n, 3);
    let mut normal = Raster::new(n, n, 3);
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let m = layout.mask[i];
            let o = ov(i);
            let px = diffuse.pixel_mut(x, y);
            for c in 0..3 {
                let base = mix(ph.diffuse[0][c], ph.diffuse[1][c], m);
                px[c] = (base * (1.0 + 2.0 * ph.overlay * o)).clamp(0.0, 1.0);
            }
            let r = mix(ph.roughness[0], ph.roughness[1], m);
            roughness.set(x, y, 0, (r + ph.overlay * o).clamp(0.0, 1.0));
            let px = specular.pixel_mut(x, y);
            for c in 0..3 {
                px[c] = mix(ph.specular[0][c], ph.specular[1][c], m).clamp(0.0, 1.0);
            }
            // Central differences on the periodic height field. Slopes are
            // per plane unit (the tile spans two units).
            let h = |xx: usize, yy: usize| {
                let j = (yy % n) * n + (xx % n);
                layout.height[j] + 0.5 * ph.overlay * ov(j)
            };
            let scale = ph.bump * n as f32 / 64.0;
            let dx = (h(x + 1, y) - h(x + n - 1, y)) * 0.5 * scale;
            // Row index grows downwards while plane y grows upwards.
            let dy = (h(x, y + n - 1) - h(x, y + 1)) * 0.5 * scale;
            let len = (dx * dx + dy * dy + 1.0).sqrt();
            let nrm = [-dx / len, -dy / len, 1.0 / len];
            normal
                .pixel_mut(x, y)
                .copy_from_slice(&nrm.map(|v| (v + 1.0) * 0.5));
        }
    }
    let mut maps = MaterialMaps {
        diffuse,
        normal,
        roughness,
        specular,
    };
    maps.renormalize_normals();
    maps
}

/// Maps built from the layout alone, without the noise overlay.
pub fn base_maps(seed: u64, pattern: Pattern, resolution: usize) -> Result<MaterialMaps> {
    let lay = layout(seed, pattern, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ph = draw_phases(&mut rng);
    Ok(assemble(&lay, &ph, None))
}

/// Generates a complete, valid map set. Deterministic in all arguments.
pub fn generate_procedural(seed: u64, pattern: Pattern, resolution: usize) -> Result<MaterialMaps> {
    let lay = layout(seed, pattern, resolution)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ph = draw_phases(&mut rng);
    let ov_seed = rng.random::<u32>();
    let n = resolution;
    let overlay: Vec<f32> = (0..n * n)
        .map(|i| {
            let (x, y) = (i % n, i / n);
            fbm(
                (x as f32 + 0.5) / n as f32,
                (y as f32 + 0.5) / n as f32,
                8,
                3,
                ov_seed,
            )
        })
        .collect();
    Ok(assemble(&lay, &ph, Some(&overlay)))
}

fn smoothstep(e0: f32, e1: f32, x: f32) -> f32 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn edge_distance(fu: f32, fv: f32) -> f32 {
    fu.min(1.0 - fu).min(fv.min(1.0 - fv))
}

#[inline]
fn hash2(x: i32, y: i32, seed: u32) -> u32 {
    let mut h = seed
        ^ (x as u32).wrapping_mul(0x8da6_b343)
        ^ (y as u32).wrapping_mul(0xd816_3841);
    h ^= h >> 16;
    h = h.wrapping_mul(0x7feb_352d);
    h ^= h >> 15;
    h = h.wrapping_mul(0x846c_a68b);
    h ^= h >> 16;
    h
}

#[inline]
fn unit(h: u32) -> f32 {
    (h >> 8) as f32 / (1u32 << 24) as f32
}

// Sixteen gradient directions, fixed so the hash path has no float maths.
const GRADIENTS: [(f32, f32); 16] = [
    (1.0, 0.0),
    (0.923_879_5, 0.382_683_43),
    (0.707_106_77, 0.707_106_77),
    (0.382_683_43, 0.923_879_5),
    (0.0, 1.0),
    (-0.382_683_43, 0.923_879_5),
    (-0.707_106_77, 0.707_106_77),
    (-0.923_879_5, 0.382_683_43),
    (-1.0, 0.0),
    (-0.923_879_5, -0.382_683_43),
    (-0.707_106_77, -0.707_106_77),
    (-0.382_683_43, -0.923_879_5),
    (0.0, -1.0),
    (0.382_683_43, -0.923_879_5),
    (0.707_106_77, -0.707_106_77),
    (0.923_879_5, -0.382_683_43),
];

/// Periodic gradient noise over `[0,1)²` with `period` lattice cells per
/// side, roughly in `[-1, 1]`.
fn perlin(u: f32, v: f32, period: u32, seed: u32) -> f32 {
    let (x, y) = (u * period as f32, v * period as f32);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let p = period as i32;
    let (ix, iy) = (x0 as i32, y0 as i32);
    let grad = |cx: i32, cy: i32, dx: f32, dy: f32| {
        let h = hash2(cx.rem_euclid(p), cy.rem_euclid(p), seed);
        let (gx, gy) = GRADIENTS[(h & 15) as usize];
        gx * dx + gy * dy
    };
    let fade = |t: f32| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (sx, sy) = (fade(fx), fade(fy));
    let n00 = grad(ix, iy, fx, fy);
    let n10 = grad(ix + 1, iy, fx - 1.0, fy);
    let n01 = grad(ix, iy + 1, fx, fy - 1.0);
    let n11 = grad(ix + 1, iy + 1, fx - 1.0, fy - 1.0);
    let a = n00 + (n10 - n00) * sx;
    let b = n01 + (n11 - n01) * sx;
    (a + (b - a) * sy) * std::f32::consts::SQRT_2
}

/// Fractal sum of [`perlin`] octaves mapped to `[0, 1]`.
fn fbm(u: f32, v: f32, base_period: u32, octaves: u32, seed: u32) -> f32 {
    let mut sum = 0.0;
    let mut amp = 0.5;
    let mut norm = 0.0;
    for o in 0..octaves {
        sum += amp * perlin(u, v, base_period << o, seed.wrapping_add(o.wrapping_mul(0x68e3_1da4)));
        norm += amp;
        amp *= 0.5;
    }
    (0.5 + 0.5 * sum / norm).clamp(0.0, 1.0)
}

/// Periodic Worley noise: distances to the nearest and second nearest
/// feature points (in cell units) and the nearest cell's hash.
fn voronoi(u: f32, v: f32, cells: u32, seed: u32) -> (f32, f32, u32) {
    let (x, y) = (u * cells as f32, v * cells as f32);
    let (cx, cy) = (x.floor() as i32, y.floor() as i32);
    let c = cells as i32;
    let mut f1 = f32::MAX;
    let mut f2 = f32::MAX;
    let mut id = 0;
    for oy in -1..=1 {
        for ox in -1..=1 {
            let (gx, gy) = (cx + ox, cy + oy);
            let h = hash2(gx.rem_euclid(c), gy.rem_euclid(c), seed);
            let px = gx as f32 + 0.15 + 0.7 * unit(h);
            let py = gy as f32 + 0.15 + 0.7 * unit(h.rotate_left(13));
            let d = ((px - x) * (px - x) + (py - y) * (py - y)).sqrt();
            if d < f1 {
                f2 = f1;
                f1 = d;
                id = h;
            } else if d < f2 {
                f2 = d;
            }
        }
    }
    (f1, f2, id)
}

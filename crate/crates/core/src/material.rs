//! Material map sets and the tangent-space normal encoding shared by the
//! renderer, the dataset code and the networks.
//!
//! All maps are stored in linear space with every channel in `[0, 1]`.
//! Normals are kept *encoded*, i.e. `(n + 1) / 2` per component.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vec3::Vec3;

/// Tolerance on |n| accepted by [`encode_normal`].
pub const UNIT_TOLERANCE: f64 = 1e-5;

/// Lower bound applied to the decoded z component before renormalizing.
pub const MIN_NORMAL_Z: f64 = 1e-3;

static DEGENERATE_NORMALS: AtomicU64 = AtomicU64::new(0);

/// Number of degenerate encodings that [`decode_normal`] replaced with the
/// flat normal since process start.
pub fn degenerate_normal_count() -> u64 {
    DEGENERATE_NORMALS.load(Ordering::Relaxed)
}

/// One of the four reflectance maps estimated per surface.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Diffuse,
    Normal,
    Roughness,
    Specular,
}

impl MapKind {
    /// Declaration order. Loss reports and metric tables use this order.
    pub const ALL: [MapKind; 4] = [
        MapKind::Diffuse,
        MapKind::Normal,
        MapKind::Roughness,
        MapKind::Specular,
    ];

    /// Channel order the discriminator sees when maps are concatenated.
    pub const DISCRIMINATOR_ORDER: [MapKind; 4] = [
        MapKind::Normal,
        MapKind::Diffuse,
        MapKind::Roughness,
        MapKind::Specular,
    ];

    pub const fn channels(self) -> usize {
        match self {
            MapKind::Roughness => 1,
            _ => 3,
        }
    }

    pub const fn name(self) -> &'static str {
        match self {
            MapKind::Diffuse => "diffuse",
            MapKind::Normal => "normal",
            MapKind::Roughness => "roughness",
            MapKind::Specular => "specular",
        }
    }

    pub const fn short_name(self) -> &'static str {
        match self {
            MapKind::Diffuse => "Diff.",
            MapKind::Normal => "Nrm.",
            MapKind::Roughness => "Rgh.",
            MapKind::Specular => "Spec.",
        }
    }

    /// Total channel count of a full map set (10).
    pub fn total_channels() -> usize {
        Self::ALL.iter().map(|k| k.channels()).sum()
    }
}

impl fmt::Display for MapKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for MapKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MapKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown map kind `{s}`")))
    }
}

/// A dense `height × width × channels` image of `f32`, row-major, top row
/// first, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Raster {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_pixel(width: usize, height: usize, pixel: &[f32]) -> Self {
        let mut data = Vec::with_capacity(width * height * pixel.len());
        for _ in 0..width * height {
            data.extend_from_slice(pixel);
        }
        Self {
            width,
            height,
            channels: pixel.len(),
            data,
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "buffer of {} values does not match {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn offset(&self, x: usize, y: usize) -> usize {
        (y * self.width + x) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[self.offset(x, y) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        let o = self.offset(x, y);
        self.data[o + c] = v;
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = self.offset(x, y);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Raster {
        Raster {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Copies a rectangular window.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Raster> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::Shape(format!(
                "crop {width}x{height}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        Ok(Raster::from_fn(width, height, self.channels, |x, y, c| {
            self.get(x0 + x, y0 + y, c)
        }))
    }

    /// Extends to `width × height` by mirroring about the last row and column
    /// (the edge pixel is not repeated). The original occupies the top-left corner.
    pub fn pad_reflect(&self, width: usize, height: usize) -> Result<Raster> {
        if width < self.width || height < self.height {
            return Err(Error::Shape(format!(
                "cannot pad {}x{} down to {width}x{height}",
                self.width, self.height
            )));
        }
        if (width > self.width && width - self.width >= self.width)
            || (height > self.height && height - self.height >= self.height)
        {
            return Err(Error::Shape(format!(
                "reflect padding {}x{} to {width}x{height} needs more than one mirror",
                self.width, self.height
            )));
        }
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        Ok(Raster::from_fn(width, height, self.channels, |x, y, c| {
            self.get(reflect(x, self.width), reflect(y, self.height), c)
        }))
    }

    /// Replicates a single-channel raster into `channels` channels.
    pub fn expand_channels(&self, channels: usize) -> Raster {
        debug_assert_eq!(self.channels, 1);
        Raster::from_fn(self.width, self.height, channels, |x, y, _| self.get(x, y, 0))
    }

    /// Flips left/right.
    pub fn mirror_horizontal(&self) -> Raster {
        Raster::from_fn(self.width, self.height, self.channels, |x, y, c| {
            self.get(self.width - 1 - x, y, c)
        })
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Per-channel means.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut sums = vec![0.0f64; self.channels];
        for px in self.data.chunks_exact(self.channels.max(1)) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        let n = (self.width * self.height).max(1) as f64;
        sums.into_iter().map(|s| s / n).collect()
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &Raster) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Albedo, normal, roughness and specular maps over one pixel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MaterialMaps {
    pub diffuse: Raster,
    /// Encoded tangent-space normals, `(n + 1) / 2`.
    pub normal: Raster,
    pub roughness: Raster,
    /// Fresnel reflectance at normal incidence.
    pub specular: Raster,
}

/// Shading inputs at a single pixel, normals decoded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfacePoint {
    pub diffuse: [f64; 3],
    pub normal: Vec3,
    pub roughness: f64,
    pub specular: [f64; 3],
}

impl MaterialMaps {
    /// Builds a map set, checking that grids and channel counts agree.
    pub fn new(diffuse: Raster, normal: Raster, roughness: Raster, specular: Raster) -> Result<Self> {
        let maps = Self {
            diffuse,
            normal,
            roughness,
            specular,
        };
        let (h, w) = maps.diffuse.resolution();
        for kind in MapKind::ALL {
            let r = maps.map(kind);
            if r.resolution() != (h, w) || r.channels() != kind.channels() {
                return Err(Error::Shape(format!(
                    "{kind} map is {}x{}x{}, expected {w}x{h}x{}",
                    r.width(),
                    r.height(),
                    r.channels(),
                    kind.channels()
                )));
            }
        }
        Ok(maps)
    }

    /// Spatially constant material.
    pub fn uniform(
        width: usize,
        height: usize,
        diffuse: [f32; 3],
        normal: Vec3,
        roughness: f32,
        specular: [f32; 3],
    ) -> Result<Self> {
        let n = encode_normal(normal)?;
        Ok(Self {
            diffuse: Raster::from_pixel(width, height, &diffuse),
            normal: Raster::from_pixel(width, height, &n.map(|v| v as f32)),
            roughness: Raster::from_pixel(width, height, &[roughness]),
            specular: Raster::from_pixel(width, height, &specular),
        })
    }

    /// `(height, width)` of the diffuse grid.
    pub fn resolution(&self) -> (usize, usize) {
        self.diffuse.resolution()
    }

    pub fn width(&self) -> usize {
        self.diffuse.width()
    }

    pub fn height(&self) -> usize {
        self.diffuse.height()
    }

    pub fn map(&self, kind: MapKind) -> &Raster {
        match kind {
            MapKind::Diffuse => &self.diffuse,
            MapKind::Normal => &self.normal,
            MapKind::Roughness => &self.roughness,
            MapKind::Specular => &self.specular,
        }
    }

    pub fn map_mut(&mut self, kind: MapKind) -> &mut Raster {
        match kind {
            MapKind::Diffuse => &mut self.diffuse,
            MapKind::Normal => &mut self.normal,
            MapKind::Roughness => &mut self.roughness,
            MapKind::Specular => &mut self.specular,
        }
    }

    /// Shading parameters at `(x, y)` with the normal decoded.
    pub fn surface_point(&self, x: usize, y: usize) -> SurfacePoint {
        let d = self.diffuse.pixel(x, y);
        let n = self.normal.pixel(x, y);
        let s = self.specular.pixel(x, y);
        SurfacePoint {
            diffuse: [d[0] as f64, d[1] as f64, d[2] as f64],
            normal: decode_normal([n[0] as f64, n[1] as f64, n[2] as f64]),
            roughness: self.roughness.get(x, y, 0) as f64,
            specular: [s[0] as f64, s[1] as f64, s[2] as f64],
        }
    }

    /// Re-encodes every normal as an exact unit vector.
    pub fn renormalize_normals(&mut self) {
        for px in self.normal.data_mut().chunks_exact_mut(3) {
            let n = decode_normal([px[0] as f64, px[1] as f64, px[2] as f64]);
            let e = encode_unchecked(n);
            px.copy_from_slice(&[e[0] as f32, e[1] as f32, e[2] as f32]);
        }
    }

    /// Clamps every stored channel into `[0, 1]`.
    pub fn clamp_unit(&mut self) {
        for kind in MapKind::ALL {
            for v in self.map_mut(kind).data_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        Ok(Self {
            diffuse: self.diffuse.crop(x0, y0, width, height)?,
            normal: self.normal.crop(x0, y0, width, height)?,
            roughness: self.roughness.crop(x0, y0, width, height)?,
            specular: self.specular.crop(x0, y0, width, height)?,
        })
    }
}

/// Maps a unit normal with positive z into `[0, 1]^3`.
pub fn encode_normal(n: Vec3) -> Result<[f64; 3]> {
    let len = n.length();
    if !len.is_finite() || (len - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::Validation(format!(
            "normal {n} has length {len}, expected 1"
        )));
    }
    if n.z <= 0.0 {
        return Err(Error::Validation(format!(
            "normal {n} must have a positive z component"
        )));
    }
    Ok(encode_unchecked(n))
}

fn encode_unchecked(n: Vec3) -> [f64; 3] {
    [(n.x + 1.0) * 0.5, (n.y + 1.0) * 0.5, (n.z + 1.0) * 0.5]
}

/// Inverse of [`encode_normal`], tolerant of quantized or unnormalized
/// encodings: z is clamped to [`MIN_NORMAL_Z`] and the result renormalized.
/// A vanishing decoded vector yields the flat normal and bumps
/// [`degenerate_normal_count`].
pub fn decode_normal(e: [f64; 3]) -> Vec3 {
    let raw = Vec3::new(2.0 * e[0] - 1.0, 2.0 * e[1] - 1.0, 2.0 * e[2] - 1.0);
    if !raw.is_finite() || raw.length() < 1e-9 {
        DEGENERATE_NORMALS.fetch_add(1, Ordering::Relaxed);
        return Vec3::Z;
    }
    Vec3::new(raw.x, raw.y, raw.z.max(MIN_NORMAL_Z)).normalize()
}

/// Options for [`validate_maps`].
#[derive(Clone, Copy, Debug)]
pub struct ValidateOptions {
    /// Allowed deviation of `|2e - 1|` from 1 for stored normals.
    pub normal_tolerance: f64,
}

impl Default for ValidateOptions {
    fn default() -> Self {
        Self {
            normal_tolerance: UNIT_TOLERANCE,
        }
    }
}

impl ValidateOptions {
    /// Tolerance that accepts normals quantized to 8 bits per channel.
    pub fn quantized_8bit() -> Self {
        Self {
            normal_tolerance: 2.0 * 3f64.sqrt() / 255.0,
        }
    }
}

/// A single validation finding.
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Shape {
        kind: MapKind,
        found: (usize, usize, usize),
        expected: (usize, usize, usize),
    },
    Range {
        kind: MapKind,
        x: usize,
        y: usize,
        channel: usize,
        value: f32,
    },
    NonUnitNormal {
        x: usize,
        y: usize,
        length: f64,
    },
    NormalFacingAway {
        x: usize,
        y: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Shape {
                kind,
                found,
                expected,
            } => write!(
                f,
                "{kind}: shape {}x{}x{} (w x h x c), expected {}x{}x{}",
                found.0, found.1, found.2, expected.0, expected.1, expected.2
            ),
            Violation::Range {
                kind,
                x,
                y,
                channel,
                value,
            } => write!(f, "{kind}[{x},{y}].{channel} = {value} outside [0,1]"),
            Violation::NonUnitNormal { x, y, length } => {
                write!(f, "normal[{x},{y}] has length {length}")
            }
            Violation::NormalFacingAway { x, y } => write!(f, "normal[{x},{y}] has z <= 0"),
        }
    }
}

/// Result of [`validate_maps`]. Range findings are capped per map so that a
/// badly broken map does not produce millions of entries; `range_count`
/// carries the full tally.
#[derive(Clone, Debug, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub range_count: usize,
    pub normal_count: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.passed() {
            return f.write_str("ok");
        }
        writeln!(
            f,
            "{} range violation(s), {} normal violation(s)",
            self.range_count, self.normal_count
        )?;
        for v in &self.violations {
            writeln!(f, "  {v}")?;
        }
        Ok(())
    }
}

const MAX_REPORTED: usize = 16;

/// Checks grid agreement, channel ranges and normal lengths.
pub fn validate_maps(m: &MaterialMaps, opts: ValidateOptions) -> ValidationReport {
    let mut report = ValidationReport::default();
    let (w, h) = (m.diffuse.width(), m.diffuse.height());
    let mut shapes_ok = true;
    for kind in MapKind::ALL {
        let r = m.map(kind);
        let found = (r.width(), r.height(), r.channels());
        let expected = (w, h, kind.channels());
        if found != expected {
            shapes_ok = false;
            report.violations.push(Violation::Shape {
                kind,
                found,
                expected,
            });
        }
    }
    for kind in MapKind::ALL {
        let r = m.map(kind);
        let ch = r.channels().max(1);
        let mut reported = 0;
        for (i, &v) in r.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                report.range_count += 1;
                if reported < MAX_REPORTED {
                    reported += 1;
                    let p = i / ch;
                    report.violations.push(Violation::Range {
                        kind,
                        x: p % r.width(),
                        y: p / r.width(),
                        channel: i % ch,
                        value: v,
                    });
                }
            }
        }
    }
    if shapes_ok || m.normal.channels() == 3 {
        let r = &m.normal;
        let mut reported = 0;
        for y in 0..r.height() {
            for x in 0..r.width() {
                let e = r.pixel(x, y);
                let raw = Vec3::new(
                    2.0 * e[0] as f64 - 1.0,
                    2.0 * e[1] as f64 - 1.0,
                    2.0 * e[2] as f64 - 1.0,
                );
                let length = raw.length();
                let finding = if raw.z <= 0.0 {
                    Some(Violation::NormalFacingAway { x, y })
                } else if !((length - 1.0).abs() <= opts.normal_tolerance) {
                    Some(Violation::NonUnitNormal { x, y, length })
                } else {
                    None
                };
                if let Some(v) = finding {
                    report.normal_count += 1;
                    if reported < MAX_REPORTED {
                        reported += 1;
                        report.violations.push(v);
                    }
                }
            }
        }
    }
    report
}

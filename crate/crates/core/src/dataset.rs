//! Dataset records, strip files, manifests, real-photo ingestion and
//! stratified splitting.
//!
//! A strip file is one 8-bit RGB PNG of width `5 × height` holding, left to
//! right, the flash render and the four maps (default order
//! `render, normal, diffuse, roughness, specular`). The render and diffuse
//! tiles are gamma encoded; normal, roughness and specular are stored
//! linearly. Roughness is replicated into three channels.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{imageops::FilterType, ImageReader, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::material::{MapKind, MaterialMaps, Raster};
use crate::procedural::{generate_procedural, Pattern};
use crate::renderer::{render_flash, LightSetup, RenderedImage, GAMMA};

/// Number of tiles in a strip.
pub const STRIP_TILES: usize = 5;

/// File name of the per-dataset manifest.
pub const MANIFEST_FILE: &str = "manifest.toml";

/// A synthetic sample: flash render plus ground-truth maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SvbrdfRecord {
    pub id: String,
    pub render: RenderedImage,
    pub maps: MaterialMaps,
}

/// An unannotated photograph.
#[derive(Clone, Debug, PartialEq)]
pub struct RealImageRecord {
    pub id: String,
    pub category: String,
    /// Linear RGB in `[0, 1]`.
    pub image: Raster,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tile {
    Render,
    Normal,
    Diffuse,
    Roughness,
    Specular,
}

impl Tile {
    fn gamma_encoded(self) -> bool {
        matches!(self, Tile::Render | Tile::Diffuse)
    }
}

impl fmt::Display for Tile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tile::Render => "render",
            Tile::Normal => "normal",
            Tile::Diffuse => "diffuse",
            Tile::Roughness => "roughness",
            Tile::Specular => "specular",
        };
        f.write_str(s)
    }
}

/// Left-to-right tile order of a strip file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileOrder(pub [Tile; STRIP_TILES]);

impl Default for TileOrder {
    fn default() -> Self {
        TileOrder([
            Tile::Render,
            Tile::Normal,
            Tile::Diffuse,
            Tile::Roughness,
            Tile::Specular,
        ])
    }
}

impl TileOrder {
    pub fn validate(&self) -> Result<()> {
        for t in [
            Tile::Render,
            Tile::Normal,
            Tile::Diffuse,
            Tile::Roughness,
            Tile::Specular,
        ] {
            if self.0.iter().filter(|&&x| x == t).count() != 1 {
                return Err(Error::Config(format!(
                    "tile order must contain `{t}` exactly once"
                )));
            }
        }
        Ok(())
    }
}

#[inline]
fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Linear albedo to the stored display encoding.
#[inline]
pub fn encode_gamma(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) as f64).powf(1.0 / GAMMA) as f32
}

#[inline]
fn decode_gamma(v: f32) -> f32 {
    (v as f64).powf(GAMMA) as f32
}

fn tile_raster<'a>(record: &'a SvbrdfRecord, tile: Tile) -> std::borrow::Cow<'a, Raster> {
    use std::borrow::Cow;
    match tile {
        Tile::Render => Cow::Borrowed(&record.render.tone_mapped),
        Tile::Normal => Cow::Borrowed(&record.maps.normal),
        Tile::Diffuse => Cow::Owned(record.maps.diffuse.map(encode_gamma)),
        Tile::Roughness => Cow::Owned(record.maps.roughness.expand_channels(3)),
        Tile::Specular => Cow::Borrowed(&record.maps.specular),
    }
}

/// Composes the strip image for a record.
pub fn strip_image(record: &SvbrdfRecord, order: TileOrder) -> Result<RgbImage> {
    order.validate()?;
    let (h, w) = record.maps.resolution();
    if record.render.tone_mapped.resolution() != (h, w) {
        return Err(Error::Shape(format!(
            "record `{}`: render is {:?}, maps are {:?}",
            record.id,
            record.render.tone_mapped.resolution(),
            (h, w)
        )));
    }
    let mut img = RgbImage::new((w * STRIP_TILES) as u32, h as u32);
    for (t, tile) in order.0.iter().enumerate() {
        let r = tile_raster(record, *tile);
        for y in 0..h {
            for x in 0..w {
                let p = r.pixel(x, y);
                img.put_pixel(
                    (t * w + x) as u32,
                    y as u32,
                    Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])]),
                );
            }
        }
    }
    Ok(img)
}

pub fn save_strip(record: &SvbrdfRecord, path: &Path, order: TileOrder) -> Result<()> {
    save_image(&strip_image(record, order)?, path)
}

/// Parses a strip image. The record id is left empty.
pub fn parse_strip(img: &RgbImage, order: TileOrder, path: &Path) -> Result<SvbrdfRecord> {
    order.validate()?;
    let (sw, h) = (img.width() as usize, img.height() as usize);
    if h == 0 || sw != STRIP_TILES * h {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "strip is {sw}x{h}; expected width = {STRIP_TILES} x height ({})",
                STRIP_TILES * h
            ),
        });
    }
    let w = h;
    let read = |t: usize, channels: usize, f: &dyn Fn(f32) -> f32| {
        Raster::from_fn(w, h, channels, |x, y, c| {
            f(img.get_pixel((t * w + x) as u32, y as u32).0[c] as f32 / 255.0)
        })
    };
    let id = |v: f32| v;
    let mut render = None;
    let mut normal = None;
    let mut diffuse = None;
    let mut roughness = None;
    let mut specular = None;
    for (t, tile) in order.0.iter().enumerate() {
        match tile {
            Tile::Render => render = Some(read(t, 3, &id)),
            Tile::Normal => normal = Some(read(t, 3, &id)),
            Tile::Diffuse => diffuse = Some(read(t, 3, &decode_gamma)),
            Tile::Roughness => roughness = Some(read(t, 1, &id)),
            Tile::Specular => specular = Some(read(t, 3, &id)),
        }
    }
    let maps = MaterialMaps::new(
        diffuse.expect("validated order"),
        normal.expect("validated order"),
        roughness.expect("validated order"),
        specular.expect("validated order"),
    )?;
    Ok(SvbrdfRecord {
        id: String::new(),
        render: RenderedImage::from_tone_mapped(render.expect("validated order")),
        maps,
    })
}

/// Loads a strip file; the id is the file stem.
pub fn load_strip(path: &Path, order: TileOrder) -> Result<SvbrdfRecord> {
    let img = open_rgb(path)?;
    let mut rec = parse_strip(&img, order, path)?;
    rec.id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(rec)
}

/// Renders the training input for `maps` under the centred flash.
///
/// `light_seed` is reserved for light jitter; the flash is always centred.
pub fn make_training_record(
    id: impl Into<String>,
    maps: MaterialMaps,
    light_seed: u64,
) -> Result<SvbrdfRecord> {
    let _ = light_seed;
    let render = render_flash(&maps, &LightSetup::centered_flash())?;
    Ok(SvbrdfRecord {
        id: id.into(),
        render,
        maps,
    })
}

/// Gamma policy recorded in a manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaPolicy {
    pub gamma: f64,
    pub encoded: Vec<Tile>,
    pub linear: Vec<Tile>,
}

impl Default for GammaPolicy {
    fn default() -> Self {
        let order = TileOrder::default();
        Self {
            gamma: GAMMA,
            encoded: order.0.iter().copied().filter(|t| t.gamma_encoded()).collect(),
            linear: order.0.iter().copied().filter(|t| !t.gamma_encoded()).collect(),
        }
    }
}

/// Key-value description of a strip dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub resolution: usize,
    pub tile_order: TileOrder,
    pub gamma: GammaPolicy,
    pub split_seed: u64,
    pub generator_seed: Option<u64>,
    pub patterns: Vec<String>,
    pub ids: Vec<String>,
}

impl DatasetManifest {
    pub fn new(resolution: usize, ids: Vec<String>) -> Self {
        Self {
            format_version: 1,
            resolution,
            tile_order: TileOrder::default(),
            gamma: GammaPolicy::default(),
            split_seed: 0,
            generator_seed: None,
            patterns: Vec::new(),
            ids,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let m: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        m.tile_order.validate()?;
        Ok(m)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_toml()?).map_err(io_err(path))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let s = fs::read_to_string(&path).map_err(io_err(&path))?;
        Self::from_toml(&s)
    }
}

/// Strip file name for a record id.
pub fn strip_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}

/// Generates `n` procedural records cycling through `patterns`.
/// Record `i` uses seed `seed * 1_000_003 + i`.
pub fn generate_records(
    n: usize,
    patterns: &[Pattern],
    resolution: usize,
    seed: u64,
) -> Result<Vec<SvbrdfRecord>> {
    if patterns.is_empty() {
        return Err(Error::Config("at least one pattern is required".into()));
    }
    (0..n)
        .map(|i| {
            let pattern = patterns[i % patterns.len()];
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let maps = generate_procedural(s, pattern, resolution)?;
            make_training_record(format!("{pattern}-{i:05}"), maps, s)
        })
        .collect()
}

/// Writes records as strips plus a manifest.
pub fn write_dataset(
    dir: &Path,
    records: &[SvbrdfRecord],
    manifest: &DatasetManifest,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for r in records {
        save_strip(r, &strip_path(dir, &r.id), manifest.tile_order)?;
    }
    manifest.save(dir)
}

/// Reads every strip listed in the directory's manifest, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SvbrdfRecord>)> {
    let manifest = DatasetManifest::load(dir)?;
    let records = manifest
        .ids
        .iter()
        .map(|id| {
            let mut r = load_strip(&strip_path(dir, id), manifest.tile_order)?;
            r.id = id.clone();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

/// Photos loaded from `<root>/<category>/<name>.<ext>`.
#[derive(Clone, Debug, Default)]
pub struct RealImageSet {
    pub records: Vec<RealImageRecord>,
    /// Files that could not be decoded.
    pub warnings: usize,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// Resizes so the shorter side equals `target`, then takes the centred
/// `target × target` window.
pub fn resize_center_crop(img: &RgbImage, target: usize) -> RgbImage {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let scale = target as f64 / w.min(h);
    let nw = ((w * scale).round() as u32).max(target as u32);
    let nh = ((h * scale).round() as u32).max(target as u32);
    let resized = if nw == img.width() && nh == img.height() {
        img.clone()
    } else {
        image::imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    let x0 = (nw - target as u32) / 2;
    let y0 = (nh - target as u32) / 2;
    image::imageops::crop_imm(&resized, x0, y0, target as u32, target as u32).to_image()
}

fn linearize(img: &RgbImage) -> Raster {
    let (w, h) = (img.width() as usize, img.height() as usize);
    Raster::from_fn(w, h, 3, |x, y, c| {
        decode_gamma(img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0)
    })
}

/// Loads every image below `root`, one category per subdirectory.
/// Undecodable files are skipped and counted.
pub fn load_real_images(root: &Path, target: usize) -> Result<RealImageSet> {
    let mut set = RealImageSet::default();
    let mut dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let category = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .collect();
        files.sort();
        for file in files {
            let decoded = ImageReader::open(&file)
                .ok()
                .and_then(|r| r.with_guessed_format().ok())
                .and_then(|r| r.decode().ok());
            let Some(img) = decoded else {
                log::warn!("skipping unreadable image {}", file.display());
                set.warnings += 1;
                continue;
            };
            let rgb = resize_center_crop(&img.to_rgb8(), target);
            let stem = file
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            set.records.push(RealImageRecord {
                id: format!("{category}/{stem}"),
                category: category.clone(),
                image: linearize(&rgb),
            });
        }
    }
    if set.records.is_empty() {
        return Err(Error::Dataset(format!(
            "no readable images below {}",
            root.display()
        )));
    }
    Ok(set)
}

/// Train/test partition of record ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

/// Splits `(id, category)` pairs per category so each category contributes
/// `round(n × train_fraction)` training items (at least one of each side).
pub fn split_dataset<'a>(
    items: impl IntoIterator<Item = (&'a str, &'a str)>,
    train_fraction: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut by_cat: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (id, cat) in items {
        by_cat.entry(cat).or_default().push(id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit {
        train: Vec::new(),
        test: Vec::new(),
        seed,
    };
    for (cat, mut ids) in by_cat {
        if ids.len() < 2 {
            return Err(Error::Dataset(format!(
                "category `{cat}` has {} record(s); at least 2 are needed to split",
                ids.len()
            )));
        }
        ids.sort_unstable();
        ids.shuffle(&mut rng);
        let n = ids.len();
        let k = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
        split.train.extend(ids[..k].iter().map(|s| s.to_string()));
        split.test.extend(ids[k..].iter().map(|s| s.to_string()));
    }
    Ok(split)
}

impl FromStr for TileOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<Tile> = s
            .split(',')
            .map(|p| match p.trim() {
                "render" => Ok(Tile::Render),
                "normal" => Ok(Tile::Normal),
                "diffuse" => Ok(Tile::Diffuse),
                "roughness" => Ok(Tile::Roughness),
                "specular" => Ok(Tile::Specular),
                other => Err(Error::Parse(format!("unknown tile `{other}`"))),
            })
            .collect::<Result<_>>()?;
        let arr: [Tile; STRIP_TILES] = parts
            .try_into()
            .map_err(|_| Error::Parse(format!("tile order needs {STRIP_TILES} entries")))?;
        let order = TileOrder(arr);
        order.validate()?;
        Ok(order)
    }
}

/// Largest per-channel difference between two map sets, measured in the
/// stored (file) encoding of each tile.
pub fn max_stored_error(a: &MaterialMaps, b: &MaterialMaps) -> f64 {
    MapKind::ALL
        .iter()
        .map(|&k| {
            if k == MapKind::Diffuse {
                a.diffuse.map(encode_gamma).max_abs_diff(&b.diffuse.map(encode_gamma))
            } else {
                a.map(k).max_abs_diff(b.map(k))
            }
        })
        .fold(0.0, f64::max)
}

/// File name of a single map inside a maps directory.
pub fn map_file_name(kind: MapKind) -> String {
    format!("{kind}.png")
}

fn raster_image(r: &Raster, gamma: bool) -> RgbImage {
    let (w, h) = r.resolution();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = r.pixel(x as usize, y as usize);
        let v = |c: usize| {
            let v = p[c.min(p.len() - 1)];
            quantize(if gamma { encode_gamma(v) } else { v })
        };
        Rgb([v(0), v(1), v(2)])
    })
}

fn save_image(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn open_rgb(path: &Path) -> Result<RgbImage> {
    Ok(ImageReader::open(path)
        .map_err(io_err(path))?
        .with_guessed_format()
        .map_err(io_err(path))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

/// Writes one 8-bit image per map (diffuse gamma encoded, single-channel
/// maps replicated to RGB) and returns the paths in [`MapKind::ALL`] order.
pub fn save_maps_dir(maps: &MaterialMaps, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    MapKind::ALL
        .iter()
        .map(|&k| {
            let path = dir.join(map_file_name(k));
            save_image(&raster_image(maps.map(k), k == MapKind::Diffuse), &path)?;
            Ok(path)
        })
        .collect()
}

/// Reads a directory written by [`save_maps_dir`].
pub fn load_maps_dir(dir: &Path) -> Result<MaterialMaps> {
    let read = |k: MapKind| -> Result<Raster> {
        let img = open_rgb(&dir.join(map_file_name(k)))?;
        let gamma = k == MapKind::Diffuse;
        Ok(Raster::from_fn(img.width() as usize, img.height() as usize, k.channels(), |x, y, c| {
            let v = img.get_pixel(x as u32, y as u32).0[c] as f32 / 255.0;
            if gamma { decode_gamma(v) } else { v }
        }))
    };
    MaterialMaps::new(
        read(MapKind::Diffuse)?,
        read(MapKind::Normal)?,
        read(MapKind::Roughness)?,
        read(MapKind::Specular)?,
    )
}

/// Writes the tone-mapped render as an 8-bit image.
pub fn save_render(image: &RenderedImage, path: &Path) -> Result<()> {
    save_image(&raster_image(&image.tone_mapped, false), path)
}

/// Loads a photograph as linear RGB without resizing.
pub fn load_photo(path: &Path) -> Result<Raster> {
    Ok(linearize(&open_rgb(path)?))
}

/// Lists image files directly inside `dir`, sorted.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    Ok(files)
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_string_lossy().to_lowercase().as_str()))
        .unwrap_or(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::material::{validate_maps, ValidateOptions};

    #[test]
    fn strip_geometry() {
        let recs = generate_records(1, &[Pattern::Bricks], 32, 3).unwrap();
        let img = strip_image(&recs[0], TileOrder::default()).unwrap();
        assert_eq!((img.width(), img.height()), (160, 32));
    }

    #[test]
    fn strip_parses_five_tiles() {
        let img = RgbImage::new(1280, 256);
        let rec = parse_strip(&img, TileOrder::default(), Path::new("x.png")).unwrap();
        assert_eq!(rec.maps.resolution(), (256, 256));
        assert_eq!(rec.render.tone_mapped.resolution(), (256, 256));
    }

    #[test]
    fn strip_rejects_bad_width() {
        let img = RgbImage::new(1000, 256);
        let err = parse_strip(&img, TileOrder::default(), Path::new("bad.png")).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1000x256"), "{msg}");
    }

    #[test]
    fn tile_order_parse() {
        let o: TileOrder = "render,normal,diffuse,roughness,specular".parse().unwrap();
        assert_eq!(o, TileOrder::default());
        assert!("render,normal,diffuse,roughness".parse::<TileOrder>().is_err());
        assert!("render,render,diffuse,roughness,specular"
            .parse::<TileOrder>()
            .is_err());
    }

    #[test]
    fn training_record_is_deterministic_and_valid() {
        let maps = generate_procedural(4, Pattern::Voronoi, 32).unwrap();
        let a = make_training_record("a", maps.clone(), 1).unwrap();
        let b = make_training_record("a", maps, 1).unwrap();
        assert_eq!(a, b);
        assert!(validate_maps(&a.maps, ValidateOptions::default()).passed());
        assert!(a.render.linear.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn split_fourteen_categories() {
        let items: Vec<(String, String)> = (0..14)
            .flat_map(|c| (0..80).map(move |i| (format!("c{c}-{i}"), format!("c{c}"))))
            .collect();
        let split = split_dataset(
            items.iter().map(|(a, b)| (a.as_str(), b.as_str())),
            65.0 / 80.0,
            1,
        )
        .unwrap();
        assert_eq!(split.train.len(), 14 * 65);
        assert_eq!(split.test.len(), 14 * 15);
        for c in 0..14 {
            let prefix = format!("c{c}-");
            assert_eq!(
                split.train.iter().filter(|s| s.starts_with(&prefix)).count(),
                65
            );
        }
    }

    #[test]
    fn split_small_and_deterministic() {
        let items = [("a", "x"), ("b", "x"), ("c", "x"), ("d", "x")];
        let s1 = split_dataset(items, 0.5, 9).unwrap();
        let s2 = split_dataset(items, 0.5, 9).unwrap();
        assert_eq!(s1, s2);
        assert_eq!((s1.train.len(), s1.test.len()), (2, 2));
        let mut all: Vec<_> = s1.train.iter().chain(&s1.test).cloned().collect();
        all.sort();
        assert_eq!(all, vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn split_errors() {
        assert!(split_dataset([("a", "x"), ("b", "x")], 1.0, 0).is_err());
        assert!(split_dataset([("a", "x"), ("b", "y"), ("c", "y")], 0.5, 0).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut m = DatasetManifest::new(64, vec!["a".into(), "b".into()]);
        m.generator_seed = Some(4);
        m.patterns = vec!["perlin".into()];
        let back = DatasetManifest::from_toml(&m.to_toml().unwrap()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn maps_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let maps = generate_procedural(3, Pattern::Voronoi, 32).unwrap();
        let paths = save_maps_dir(&maps, dir.path()).unwrap();
        assert_eq!(paths.len(), 4);
        assert!(paths[0].ends_with("diffuse.png"));
        let back = load_maps_dir(dir.path()).unwrap();
        assert!(max_stored_error(&maps, &back) <= 1.0 / 255.0 + 1e-9);
    }

    #[test]
    fn photo_listing_skips_other_files() {
        let dir = tempfile::tempdir().unwrap();
        let rec = &generate_records(1, &[Pattern::Checker], 32, 0).unwrap()[0];
        save_render(&rec.render, &dir.path().join("b.png")).unwrap();
        save_render(&rec.render, &dir.path().join("a.PNG")).unwrap();
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let files = list_images(dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert!(files[0].ends_with("a.PNG"));
        let photo = load_photo(&files[1]).unwrap();
        let clipped = rec.render.linear.map(|v| v.clamp(0.0, 1.0));
        assert!(photo.max_abs_diff(&clipped) < 0.01);
    }
}
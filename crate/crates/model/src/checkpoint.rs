//! Checkpoint archives.
//!
//! Layout: the 8-byte magic `SNETCKPT`, a little-endian `u32` format version,
//! a `u64` header length, a JSON header, then every tensor as little-endian
//! `f32` in header order. The header holds the network configs, the training
//! counters, the RNG position, a tensor directory and a checksum of the data.
//!
//! Tensor names are namespaced: `generator/…`, `discriminator/…`,
//! `optim/generator/m/…`, `optim/generator/v/…` and the same for the
//! discriminator's moments. Generator-only archives hold just `generator/…`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::discriminator::DiscriminatorConfig;
use crate::error::{ModelError, Result};
use crate::generator::{build_generator, GeneratorConfig, GeneratorNetwork};
use crate::params::{Adam, ParamStore};
use crate::tensor::{numel, Shape, Tensor};
use crate::trainer::{RunningAverages, TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"SNETCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const EXTENSION: &str = "snck";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchiveKind {
    TrainState,
    Generator,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// `u128` as decimal text.
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    running: RunningAverages,
    g_optim_step: u64,
    d_optim_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Shape,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: ArchiveKind,
    generator: GeneratorConfig,
    discriminator: Option<DiscriminatorConfig>,
    train: Option<TrainMeta>,
    tensors: Vec<Entry>,
    /// Number of `f32` values following the header.
    values: u64,
    checksum: u64,
}

fn fnv(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// `<dir>/checkpoint-<iteration>.snck`, zero-padded so names sort by iteration.
pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:09}.{EXTENSION}"))
}

/// Highest-iteration checkpoint in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|e| e == EXTENSION)
                && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("checkpoint-"))
        })
        .max()
}

struct Archive {
    header: Header,
    tensors: Vec<(String, Tensor<f32>)>,
}

fn push_store(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>) {
    out.extend(store.iter().map(|(n, t)| (format!("{prefix}/{n}"), t.clone())));
}

fn push_moments(out: &mut Vec<(String, Tensor<f32>)>, prefix: &str, store: &ParamStore<f32>, opt: &Adam<f32>) {
    for (i, (name, _)) in store.iter().enumerate() {
        out.push((format!("optim/{prefix}/m/{name}"), opt.m[i].clone()));
    }
    for (i, (name, _)) in store.iter().enumerate() {
        out.push((format!("optim/{prefix}/v/{name}"), opt.v[i].clone()));
    }
}

fn write_archive(path: &Path, kind: ArchiveKind, g: &GeneratorConfig, d: Option<&DiscriminatorConfig>, train: Option<TrainMeta>, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    let ck_err = |message: String| ModelError::Checkpoint { path: path.to_path_buf(), message };
    let mut data = Vec::with_capacity(tensors.iter().map(|(_, t)| t.len() * 4).sum());
    for (_, t) in tensors {
        for v in t.data() {
            data.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        kind,
        generator: g.clone(),
        discriminator: d.cloned(),
        train,
        tensors: tensors.iter().map(|(n, t)| Entry { name: n.clone(), shape: t.shape() }).collect(),
        values: (data.len() / 4) as u64,
        checksum: fnv(&data),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ck_err(e.to_string()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ck_err(e.to_string()))?;
    }
    // Write beside the target and rename, so readers never see a half-written file.
    let tmp = path.with_extension(format!("{EXTENSION}.tmp"));
    let io = |e: std::io::Error| ModelError::Io { path: tmp.clone(), source: e };
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&json).map_err(io)?;
    f.write_all(&data).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })
}

fn read_archive(path: &Path) -> Result<Archive> {
    let ck_err = |message: String| ModelError::Checkpoint { path: path.to_path_buf(), message };
    let bytes = fs::read(path).map_err(|e| ModelError::Io { path: path.to_path_buf(), source: e })?;
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(ck_err("not a checkpoint archive (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ck_err(format!("format version {version} is not supported (expected {FORMAT_VERSION})")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if hlen > body.len() {
        return Err(ck_err(format!("truncated header: {} of {hlen} bytes", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| ck_err(format!("bad header: {e}")))?;
    let data = &body[hlen..];
    let want = header.values as usize * 4;
    if data.len() != want {
        let what = if data.len() < want { "truncated" } else { "oversized" };
        return Err(ck_err(format!("{what} data: {} bytes, expected {want}", data.len())));
    }
    if fnv(data) != header.checksum {
        return Err(ck_err("data checksum mismatch".into()));
    }
    let listed: usize = header.tensors.iter().map(|e| numel(e.shape)).sum();
    if listed != header.values as usize {
        return Err(ck_err(format!("tensor directory covers {listed} values, archive holds {}", header.values)));
    }
    let mut floats = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let tensors = header
        .tensors
        .iter()
        .map(|e| (e.name.clone(), Tensor::from_vec(e.shape, floats.by_ref().take(numel(e.shape)).collect())))
        .collect();
    Ok(Archive { header, tensors })
}

/// Collects `expected` (name, shape) pairs from the archive, reporting every mismatch.
struct Restore<'a> {
    path: &'a Path,
    found: std::collections::HashMap<&'a str, &'a Tensor<f32>>,
    used: std::collections::HashSet<String>,
    problems: Vec<String>,
}

impl<'a> Restore<'a> {
    fn new(path: &'a Path, archive: &'a Archive) -> Self {
        Restore {
            path,
            found: archive.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect(),
            used: Default::default(),
            problems: Vec::new(),
        }
    }

    fn take(&mut self, name: &str, shape: Shape) -> Option<Tensor<f32>> {
        self.used.insert(name.to_string());
        match self.found.get(name) {
            None => {
                self.problems.push(format!("{name}: missing from checkpoint (expected {shape:?})"));
                None
            }
            Some(t) if t.shape() != shape => {
                self.problems.push(format!("{name}: checkpoint has {:?}, network expects {shape:?}", t.shape()));
                None
            }
            Some(t) => Some((*t).clone()),
        }
    }

    fn store(&mut self, prefix: &str, store: &mut ParamStore<f32>) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = format!("{prefix}/{}", store.name(id));
            if let Some(t) = self.take(&name, store.get(id).shape()) {
                *store.get_mut(id) = t;
            }
        }
    }

    fn moments(&mut self, prefix: &str, store: &ParamStore<f32>, opt: &mut Adam<f32>) {
        for part in ["m", "v"] {
            for (i, (name, t)) in store.iter().enumerate() {
                if let Some(v) = self.take(&format!("optim/{prefix}/{part}/{name}"), t.shape()) {
                    if part == "m" {
                        opt.m[i] = v;
                    } else {
                        opt.v[i] = v;
                    }
                }
            }
        }
    }

    fn finish(mut self, namespaces: &[&str]) -> Result<()> {
        let mut extra: Vec<&str> = self
            .found
            .keys()
            .copied()
            .filter(|n| !self.used.contains(*n) && namespaces.iter().any(|p| n.starts_with(p)))
            .collect();
        extra.sort_unstable();
        self.problems.extend(extra.into_iter().map(|n| format!("{n}: not part of the network")));
        if self.problems.is_empty() {
            return Ok(());
        }
        Err(ModelError::Checkpoint {
            path: self.path.to_path_buf(),
            message: format!(
                "{} tensor mismatch(es) against the current configuration: {}",
                self.problems.len(),
                self.problems.join("; ")
            ),
        })
    }
}

/// Writes parameters, optimizer moments, counters and RNG position.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    push_store(&mut tensors, "generator", &state.generator.params);
    push_store(&mut tensors, "discriminator", &state.discriminator.params);
    push_moments(&mut tensors, "generator", &state.generator.params, &state.g_optim);
    push_moments(&mut tensors, "discriminator", &state.discriminator.params, &state.d_optim);
    let meta = TrainMeta {
        config: state.config.clone(),
        iteration: state.iteration,
        rng: RngState {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        running: state.running,
        g_optim_step: state.g_optim.step,
        d_optim_step: state.d_optim.step,
    };
    write_archive(
        path,
        ArchiveKind::TrainState,
        &state.generator.config,
        Some(&state.discriminator.config),
        Some(meta),
        &tensors,
    )
}

/// Restores a training state with the configurations stored in the archive.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let archive = read_archive(path)?;
    let d = archive.header.discriminator.clone().ok_or_else(|| ModelError::Checkpoint {
        path: path.to_path_buf(),
        message: "generator-only archive holds no training state".into(),
    })?;
    restore_state(path, &archive, &archive.header.generator.clone(), &d)
}

/// Restores a training state into networks built from the given configurations.
/// Any name or shape mismatch is an error listing every offending tensor, first one first.
pub fn load_checkpoint_for(path: &Path, generator: &GeneratorConfig, discriminator: &DiscriminatorConfig) -> Result<TrainState> {
    let archive = read_archive(path)?;
    restore_state(path, &archive, generator, discriminator)
}

fn restore_state(path: &Path, archive: &Archive, g: &GeneratorConfig, d: &DiscriminatorConfig) -> Result<TrainState> {
    let ck_err = |message: String| ModelError::Checkpoint { path: path.to_path_buf(), message };
    let meta = match (&archive.header.kind, &archive.header.train) {
        (ArchiveKind::TrainState, Some(m)) => m.clone(),
        _ => return Err(ck_err("generator-only archive holds no training state".into())),
    };
    let mut state = TrainState::new(meta.config.clone(), g, d)?;
    let mut r = Restore::new(path, archive);
    r.store("generator", &mut state.generator.params);
    r.store("discriminator", &mut state.discriminator.params);
    r.moments("generator", &state.generator.params, &mut state.g_optim);
    r.moments("discriminator", &state.discriminator.params, &mut state.d_optim);
    r.finish(&["generator/", "discriminator/", "optim/"])?;
    let word_pos: u128 = meta.rng.word_pos.parse().map_err(|_| ck_err(format!("bad RNG position {}", meta.rng.word_pos)))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(meta.rng.seed);
    rng.set_stream(meta.rng.stream);
    rng.set_word_pos(word_pos);
    state.rng = rng;
    state.iteration = meta.iteration;
    state.running = meta.running;
    state.g_optim.step = meta.g_optim_step;
    state.d_optim.step = meta.d_optim_step;
    Ok(state)
}

/// Inference archive holding only the generator.
pub fn save_generator(net: &GeneratorNetwork<f32>, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    push_store(&mut tensors, "generator", &net.params);
    write_archive(path, ArchiveKind::Generator, &net.config, None, None, &tensors)
}

/// The generator from either archive kind, built from its stored configuration.
pub fn load_generator(path: &Path) -> Result<GeneratorNetwork<f32>> {
    let archive = read_archive(path)?;
    let config = archive.header.generator.clone();
    load_generator_from(path, &archive, &config)
}

/// The generator from either archive kind, built from `config`.
pub fn load_generator_for(path: &Path, config: &GeneratorConfig) -> Result<GeneratorNetwork<f32>> {
    let archive = read_archive(path)?;
    load_generator_from(path, &archive, config)
}

fn load_generator_from(path: &Path, archive: &Archive, config: &GeneratorConfig) -> Result<GeneratorNetwork<f32>> {
    let mut net = build_generator::<f32>(config)?;
    let mut r = Restore::new(path, archive);
    r.store("generator", &mut net.params);
    r.finish(&["generator/"])?;
    Ok(net)
}

/// Kind and configurations stored in an archive, without loading tensors into networks.
pub fn inspect(path: &Path) -> Result<(ArchiveKind, GeneratorConfig, Option<DiscriminatorConfig>, Option<u64>)> {
    let a = read_archive(path)?;
    let it = a.header.train.as_ref().map(|t| t.iteration);
    Ok((a.header.kind, a.header.generator, a.header.discriminator, it))
}

//! `surfacenet`: data generation, training, inference, rendering, evaluation
//! and ablation from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use surfacenet_core::dataset::{
    generate_records, list_images, load_maps_dir, load_photo, load_real_images, load_strip, read_dataset,
    save_maps_dir, save_render, save_strip, split_dataset, write_dataset, DatasetManifest, SvbrdfRecord, TileOrder,
};
use surfacenet_core::renderer::{load_environment, EVALUATION_FLASH_POSITIONS};
use surfacenet_core::{render, LightSetup, MaterialMaps, Pattern, RenderedImage, Vec3};
use surfacenet_model::checkpoint::{latest_checkpoint, load_checkpoint_for, save_generator, load_generator};
use surfacenet_model::evaluation::{evaluate_dataset, format_table, run_ablation, to_csv, AblationData, AblationPlan};
use surfacenet_model::trainer::{train, TrainOptions, TrainState};
use surfacenet_model::ModelError;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "surfacenet", version, about = "Single-image SVBRDF estimation")]
struct Cli {
    /// TOML file with [data], [train], [generator] and [discriminator] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base configuration the file and overrides apply to: desk, large or tiny.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Dotted override, e.g. `--set train.learning_rate=1e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed for data generation, initialization, batching and scheduling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a procedural strip dataset.
    GenData(GenDataArgs),
    /// Train generator and discriminator.
    Train(TrainArgs),
    /// Estimate maps from photographs.
    Infer(InferArgs),
    /// Relight a set of maps.
    Render(RenderArgs),
    /// Score a checkpoint on a strip dataset.
    Eval(EvalArgs),
    /// Train and score each row of an ablation plan.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(short = 'n', long)]
    count: usize,
    /// Comma-separated pattern names; all patterns when omitted.
    #[arg(long, value_delimiter = ',')]
    patterns: Vec<String>,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
    #[arg(long)]
    out: PathBuf,
    /// Write into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Strip dataset; defaults to data.synthetic, then $SURFACENET_DATA_DIR.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Photo root for the adversarial-only stream.
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the newest checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// An image file or a directory of images.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Reflect-pad to the network's size multiple and crop the outputs back.
    #[arg(long)]
    pad: bool,
}

#[derive(Args)]
struct RenderArgs {
    /// A maps directory or a strip file.
    #[arg(long)]
    maps: PathBuf,
    /// Flash position `x,y,z`; centred flash when no light is given.
    #[arg(long, value_delimiter = ',', num_args = 3, conflicts_with_all = ["env", "five_lights"])]
    flash: Option<Vec<f64>>,
    /// Environment file with `dx dy dz r g b` lines.
    #[arg(long, conflicts_with = "five_lights")]
    env: Option<PathBuf>,
    /// Render under the five evaluation flash positions.
    #[arg(long)]
    five_lights: bool,
    /// Output image; with --five-lights a suffix is added per position.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// `architecture`, `losses` or a TOML file with [[rows]].
    #[arg(long)]
    plan: String,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out dataset; otherwise data.test or a split of --data.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    real: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<surfacenet_core::Error> for Failure {
    fn from(e: surfacenet_core::Error) -> Self {
        match e {
            surfacenet_core::Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let cfg = RunConfig::load(&cli.preset, cli.config.as_deref(), &cli.overrides, cli.seed).map_err(Failure::Config)?;
    match cli.command {
        Command::GenData(a) => gen_data(a, cli.seed.unwrap_or(0)),
        Command::Train(a) => train_cmd(a, cfg),
        Command::Infer(a) => infer(a),
        Command::Render(a) => render_cmd(a),
        Command::Eval(a) => eval(a, cfg),
        Command::Ablate(a) => ablate(a, cfg),
    }
}

fn is_nonempty_dir(p: &Path) -> bool {
    fs::read_dir(p).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn check_out_dir(out: &Path, force: bool) -> Outcome {
    if out.exists() && !out.is_dir() {
        return Err(config_err(format!("{} exists and is not a directory", out.display())));
    }
    if is_nonempty_dir(out) && !force {
        return Err(config_err(format!("{} is not empty; pass --force to write into it", out.display())));
    }
    Ok(())
}

fn dataset_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = flag.or_else(|| cfg.synthetic_dir()).ok_or_else(|| {
        config_err(format!("no dataset given: pass --data, set data.synthetic or {}", config::DATA_DIR_ENV))
    })?;
    if !dir.join(surfacenet_core::dataset::MANIFEST_FILE).is_file() {
        return Err(config_err(format!("{} is not a dataset directory (no manifest)", dir.display())));
    }
    Ok(dir)
}

fn gen_data(a: GenDataArgs, seed: u64) -> Outcome {
    if a.count == 0 {
        return Err(config_err("--count must be at least 1"));
    }
    let patterns: Vec<Pattern> = if a.patterns.is_empty() {
        Pattern::ALL.to_vec()
    } else {
        a.patterns.iter().map(|p| p.trim().parse::<Pattern>()).collect::<Result<_, _>>().map_err(|e| config_err(e.to_string()))?
    };
    if !(a.resolution >= 32 && a.resolution.is_power_of_two()) {
        return Err(config_err(format!("--resolution must be a power of two >= 32, got {}", a.resolution)));
    }
    check_out_dir(&a.out, a.force)?;
    let records = generate_records(a.count, &patterns, a.resolution, seed)?;
    let mut manifest = DatasetManifest::new(a.resolution, records.iter().map(|r| r.id.clone()).collect());
    manifest.generator_seed = Some(seed);
    manifest.split_seed = seed;
    manifest.patterns = patterns.iter().map(|p| p.to_string()).collect();
    write_dataset(&a.out, &records, &manifest)?;
    println!("wrote {} records ({}x{}) to {}", records.len(), a.resolution, a.resolution, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs, mut cfg: RunConfig) -> Outcome {
    let data = dataset_dir(a.data, &cfg)?;
    let real_root = a.real.or(cfg.data.real.clone());
    if let Some(r) = &real_root {
        if !r.is_dir() {
            return Err(config_err(format!("real image root {} is not a directory", r.display())));
        }
    }
    let resume_from = if a.resume { latest_checkpoint(&a.out) } else { None };
    if a.resume && resume_from.is_none() {
        return Err(config_err(format!("--resume: no checkpoint in {}", a.out.display())));
    }
    if !a.resume {
        check_out_dir(&a.out, a.force)?;
    }

    let (manifest, synthetic) = read_dataset(&data)?;
    let real = match &real_root {
        Some(root) => {
            let set = load_real_images(root, manifest.resolution)?;
            if set.warnings > 0 {
                log::warn!("{} unreadable photo(s) skipped", set.warnings);
            }
            Some(set.records)
        }
        None => None,
    };
    cfg.data.synthetic = Some(data.clone());
    cfg.data.real = real_root;
    fs::create_dir_all(&a.out).map_err(io_fail(&a.out))?;
    let cfg_path = a.out.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(io_fail(&cfg_path))?;

    let state = match &resume_from {
        Some(path) => {
            let mut s = load_checkpoint_for(path, &cfg.generator, &cfg.discriminator)?;
            println!("resuming from {} at step {}", path.display(), s.iteration);
            s.config = cfg.train.clone();
            s
        }
        None => TrainState::new(cfg.train.clone(), &cfg.generator, &cfg.discriminator)?,
    };
    let log_path = a.out.join("train.log");
    let mut log_file = fs::OpenOptions::new().create(true).append(true).open(&log_path).map_err(io_fail(&log_path))?;
    let opts = TrainOptions { checkpoint_dir: Some(&a.out), log: Some(&mut log_file), stop_at: None };
    let out = train(state, &synthetic, real.as_deref(), opts)?;
    for n in &out.notices {
        println!("note: {n}");
    }
    let gen_path = a.out.join("generator.snck");
    save_generator(&out.state.generator, &gen_path)?;
    if let Some(last) = out.steps.last() {
        println!("{last}");
    }
    println!("trained to step {}; generator saved to {}", out.state.iteration, gen_path.display());
    Ok(())
}

fn input_images(input: &Path) -> Outcome<Vec<PathBuf>> {
    if input.is_dir() {
        let files = list_images(input)?;
        if files.is_empty() {
            return Err(config_err(format!("no images in {}", input.display())));
        }
        Ok(files)
    } else if input.is_file() {
        Ok(vec![input.to_path_buf()])
    } else {
        Err(config_err(format!("{} does not exist", input.display())))
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

fn infer(a: InferArgs) -> Outcome {
    let net = load_generator(&a.checkpoint)?;
    let multiple = net.config.input_multiple;
    let files = input_images(&a.input)?;
    let mut photos = Vec::new();
    for f in &files {
        let img = load_photo(f)?;
        let (w, h) = (img.width(), img.height());
        if (w % multiple != 0 || h % multiple != 0) && !a.pad {
            return Err(config_err(format!(
                "{} is {w}x{h}; width and height must be multiples of {multiple} (use --pad)",
                f.display()
            )));
        }
        photos.push(img);
    }
    for (f, img) in files.iter().zip(photos) {
        let (w, h) = (img.width(), img.height());
        let padded = img.pad_reflect(round_up(w, multiple), round_up(h, multiple))?;
        let pred = net.predict(&[&padded])?.remove(0).crop(0, 0, w, h)?;
        let stem = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
        let dir = a.out.join(&stem);
        let paths = save_maps_dir(&pred, &dir)?;
        let strip = dir.join("strip.png");
        let record = SvbrdfRecord { id: stem, render: RenderedImage::from_linear(img), maps: pred };
        save_strip(&record, &strip, TileOrder::default())?;
        for p in paths.iter().chain(std::iter::once(&strip)) {
            println!("{}", p.display());
        }
    }
    Ok(())
}

fn load_maps(path: &Path) -> Outcome<MaterialMaps> {
    if path.is_dir() {
        Ok(load_maps_dir(path)?)
    } else if path.is_file() {
        let mut maps = load_strip(path, TileOrder::default())?.maps;
        maps.renormalize_normals();
        Ok(maps)
    } else {
        Err(config_err(format!("{} does not exist", path.display())))
    }
}

fn suffixed(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "render".into());
    let ext = out.extension().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "png".into());
    out.with_file_name(format!("{stem}-{suffix}.{ext}"))
}

fn render_cmd(a: RenderArgs) -> Outcome {
    let mut jobs: Vec<(PathBuf, LightSetup)> = Vec::new();
    if a.five_lights {
        for (name, pos) in EVALUATION_FLASH_POSITIONS {
            jobs.push((suffixed(&a.out, name), LightSetup::flash_at(pos)));
        }
    } else if let Some(env) = &a.env {
        jobs.push((a.out.clone(), load_environment(env).map_err(|e| config_err(e.to_string()))?));
    } else if let Some(p) = &a.flash {
        let setup = LightSetup::flash_at(Vec3::new(p[0], p[1], p[2]));
        setup.validate().map_err(|e| config_err(e.to_string()))?;
        jobs.push((a.out.clone(), setup));
    } else {
        jobs.push((a.out.clone(), LightSetup::centered_flash()));
    }
    let maps = load_maps(&a.maps)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_fail(parent))?;
    }
    for (path, setup) in jobs {
        save_render(&render(&maps, &setup)?, &path)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn write_report(out: &Path, table: &[(String, Result<surfacenet_model::evaluation::MetricsReport, String>)]) -> Outcome {
    fs::create_dir_all(out).map_err(io_fail(out))?;
    let (txt, csv) = (out.join("report.txt"), out.join("report.csv"));
    fs::write(&txt, format_table(table)).map_err(io_fail(&txt))?;
    fs::write(&csv, to_csv(table)).map_err(io_fail(&csv))?;
    Ok(())
}

fn eval(a: EvalArgs, cfg: RunConfig) -> Outcome {
    let data = dataset_dir(a.data, &cfg)?;
    let net = load_generator(&a.checkpoint)?;
    let (_, records) = read_dataset(&data)?;
    let label = a.checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let report = evaluate_dataset(&label, &net, &records)?;
    let table = vec![(label, Ok(report))];
    write_report(&a.out, &table)?;
    print!("{}", format_table(&table));
    Ok(())
}

fn load_plan(spec: &str) -> Outcome<AblationPlan> {
    let plan = match spec {
        "architecture" => AblationPlan::architecture(),
        "losses" => AblationPlan::losses(),
        path => {
            let text = fs::read_to_string(path).map_err(|e| config_err(format!("{path}: {e}")))?;
            toml::from_str(&text).map_err(|e| config_err(format!("{path}: {e}")))?
        }
    };
    plan.validate().map_err(|e| config_err(e.to_string()))?;
    Ok(plan)
}

fn ablate(a: AblateArgs, cfg: RunConfig) -> Outcome {
    let plan = load_plan(&a.plan)?;
    let data = dataset_dir(a.data, &cfg)?;
    let test_dir = a.test.or(cfg.data.test.clone());
    if let Some(t) = &test_dir {
        dataset_dir(Some(t.clone()), &cfg)?;
    }
    let real_root = a.real.or(cfg.data.real.clone());
    check_out_dir(&a.out, a.force)?;

    let (manifest, records) = read_dataset(&data)?;
    let (train_set, test_set) = match &test_dir {
        Some(t) => (records, read_dataset(t)?.1),
        None => {
            let cats: Vec<(String, String)> =
                records.iter().map(|r| (r.id.clone(), r.id.split('-').next().unwrap_or("").to_string())).collect();
            let split = split_dataset(cats.iter().map(|(i, c)| (i.as_str(), c.as_str())), 1.0 - cfg.data.test_fraction, cfg.train.seed)?;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for r in records {
                if split.test.contains(&r.id) { te.push(r) } else { tr.push(r) }
            }
            (tr, te)
        }
    };
    let real = match &real_root {
        Some(root) => Some(load_real_images(root, manifest.resolution)?.records),
        None => None,
    };
    let data = AblationData { train: &train_set, real: real.as_deref(), test: &test_set };
    let table = run_ablation(&plan, &cfg.experiment(), &data, Some(&a.out))?;
    print!("{}", format_table(&table));
    let failed = table.iter().filter(|(_, r)| r.is_err()).count();
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} ablation row(s) failed")));
    }
    let _ = std::io::stdout().flush();
    Ok(())
}

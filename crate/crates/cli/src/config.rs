//! Run configuration: a preset, an optional TOML file and dotted overrides,
//! merged in that order and checked against the schema in one place.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surfacenet_model::discriminator::DiscriminatorConfig;
use surfacenet_model::evaluation::ExperimentConfig;
use surfacenet_model::generator::GeneratorConfig;
use surfacenet_model::trainer::TrainConfig;
use toml::{Table, Value};

/// Default dataset root when no path is configured.
pub const DATA_DIR_ENV: &str = "SURFACENET_DATA_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    /// Strip dataset directory.
    pub synthetic: Option<PathBuf>,
    /// Photo root with one subdirectory per category.
    pub real: Option<PathBuf>,
    /// Held-out strip dataset for ablations.
    pub test: Option<PathBuf>,
    /// Used when no test set is given.
    pub test_fraction: f64,
}

impl Default for DataPaths {
    fn default() -> Self {
        DataPaths { synthetic: None, real: None, test: None, test_fraction: 0.2 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataPaths,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, String> {
        let e = match name {
            "desk" => ExperimentConfig::desk(),
            "large" => ExperimentConfig::large(),
            // a few channels per layer; for smoke tests
            "tiny" => ExperimentConfig {
                generator: GeneratorConfig::tiny(),
                discriminator: DiscriminatorConfig::tiny(),
                ..ExperimentConfig::desk()
            },
            other => return Err(format!("unknown preset `{other}` (expected desk, large or tiny)")),
        };
        Ok(RunConfig { data: DataPaths::default(), train: e.train, generator: e.generator, discriminator: e.discriminator })
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            train: self.train.clone(),
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
        }
    }

    /// Preset, then `file`, then `overrides`, then `seed`; validated.
    pub fn load(preset: &str, file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self, String> {
        let mut tree = Value::try_from(Self::preset(preset)?).map_err(|e| e.to_string())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let user: Table = text.parse().map_err(|e| format!("{}: {e}", path.display()))?;
            merge(&mut tree, Value::Table(user));
        }
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let mut cfg: RunConfig = tree.try_into().map_err(|e: toml::de::Error| format!("config: {}", e.message()))?;
        if let Some(s) = seed {
            let e = cfg.experiment().with_seed(s);
            cfg.train = e.train;
            cfg.generator = e.generator;
            cfg.discriminator = e.discriminator;
        }
        cfg.experiment().validate().map_err(|e| e.to_string())?;
        if !(cfg.data.test_fraction > 0.0 && cfg.data.test_fraction < 1.0) {
            return Err(format!("data.test_fraction must lie in (0, 1), got {}", cfg.data.test_fraction));
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// `data.synthetic`, falling back to the environment default.
    pub fn synthetic_dir(&self) -> Option<PathBuf> {
        self.data.synthetic.clone().or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal when it parses
/// as one and as a bare string otherwise.
pub fn apply_override(tree: &mut Value, spec: &str) -> Result<(), String> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| format!("override `{spec}` is not key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(format!("override `{spec}` has an empty key segment"));
    }
    let value = format!("v = {}", raw.trim())
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    let mut node = tree;
    for seg in &path[..path.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| format!("override `{key}`: `{seg}` is not a table"))?;
        node = table.entry(seg.to_string()).or_insert_with(|| Value::Table(Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| format!("override `{key}` does not name a table entry"))?;
    table.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_are_typed_and_checked() {
        let c = RunConfig::load("desk", None, &["train.learning_rate=0.01".into(), "train.batch_size=2".into()], None).unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.batch_size, 2);
        let c = RunConfig::load("desk", None, &["data.synthetic=some/dir".into()], None).unwrap();
        assert_eq!(c.data.synthetic, Some(PathBuf::from("some/dir")));
        assert!(RunConfig::load("desk", None, &["train.nope=1".into()], None).is_err());
        assert!(RunConfig::load("desk", None, &["train.batch_size=\"x\"".into()], None).is_err());
        assert!(RunConfig::load("desk", None, &["train.learning_rate=-1".into()], None).is_err());
        assert!(RunConfig::load("desk", None, &["train".into()], None).is_err());
    }

    #[test]
    fn file_then_overrides_then_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[train]\nbatch_size = 3\nseed = 5\n[generator]\nstem_channels = 8\n").unwrap();
        let c = RunConfig::load("desk", Some(&path), &["train.batch_size=7".into()], Some(9)).unwrap();
        assert_eq!(c.train.batch_size, 7);
        assert_eq!(c.generator.stem_channels, 8);
        assert_eq!((c.train.seed, c.generator.seed, c.discriminator.seed), (9, 9, 10));
        assert_eq!(c.generator.aspp_channels, GeneratorConfig::desk().aspp_channels);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::load("large", None, &[], None).unwrap();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }
}

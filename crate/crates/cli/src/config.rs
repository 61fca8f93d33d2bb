use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use tokalign::{benchmark_config, Ablation, ExperimentConfig, Objective};

/// Sources for the experiment config, applied in order: defaults (or the
/// pinned benchmark), the config file, `--set` assignments, then the named
/// flags.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Start from the pinned synthetic benchmark instead of the defaults.
    #[arg(long, global = true)]
    pub benchmark: bool,
    /// Override any config field by dotted path, e.g. `lm.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    #[arg(long, global = true)]
    pub objective: Option<Objective>,
    #[arg(long, global = true)]
    pub ablation: Option<Ablation>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    #[arg(long, global = true)]
    pub interactions: Option<PathBuf>,
    #[arg(long, global = true)]
    pub items: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        if self.config.is_some() && self.benchmark {
            bail!("--config and --benchmark are exclusive");
        }
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None if self.benchmark => benchmark_config(0),
            None => ExperimentConfig::default(),
        };
        if !self.sets.is_empty() {
            let mut value = toml::Value::try_from(&cfg)?;
            for s in &self.sets {
                apply_set(&mut value, s)?;
            }
            cfg = value.try_into().context("config after --set overrides")?;
            let check = toml::Value::try_from(&cfg)?;
            for s in &self.sets {
                let key = s.split_once('=').map_or(s.as_str(), |(k, _)| k.trim());
                if lookup(&check, key).is_none() {
                    bail!("unknown config field {key:?}");
                }
            }
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.objective {
            cfg.objective = v;
        }
        if let Some(v) = self.ablation {
            cfg.ablation = v;
        }
        if let Some(v) = self.temperature {
            cfg.temperature = v;
        }
        if let Some(v) = &self.interactions {
            cfg.paths.interactions = Some(v.clone());
        }
        if let Some(v) = &self.items {
            cfg.paths.items = Some(v.clone());
        }
        if let Some(v) = &self.output_dir {
            cfg.paths.output_dir = Some(v.clone());
        }
        Ok(cfg)
    }
}

/// Sets `key=value` in a TOML table. The value is parsed as a TOML value
/// and falls back to a bare string.
pub fn apply_set(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("expected KEY=VALUE, got {assignment:?}"))?;
    let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_owned()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, path) = parts.split_last().expect("split yields one part");
    let mut node = root;
    for p in path {
        let table = node
            .as_table_mut()
            .with_context(|| format!("{key}: {p} is not a table"))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().with_context(|| format!("{key}: parent is not a table"))?;
    table.insert(last.to_string(), parsed);
    Ok(())
}

fn lookup<'a>(root: &'a toml::Value, key: &str) -> Option<&'a toml::Value> {
    key.split('.').try_fold(root, |node, p| node.get(p))
}

//! End-to-end experiment orchestration: data preparation, CF training, LM
//! training under an objective/ablation, evaluation and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::catalog::{read_items, Catalog, RawItem, TokenizerMode};
use crate::cf::{train_cf, CfBackend, CfConfig, CfModel};
use crate::checkpoint::{config_hash, file_hash};
use crate::collab::{precompute_target_distributions, uniform_target_distributions};
use crate::data::{prepare_data, read_interactions, write_jsonl, Case, DataConfig, DatasetStats, RawInteraction, SplitDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalConfig, EvalReport, Evaluation};
use crate::lm::{encode_prompt, train_lm, DecoderModel, LmConfig, LmExample, TrainReport, ValidationMetrics};
use crate::loss::{check_alpha, Objective};
use crate::rng::{stream, sub_seed};
use crate::synth::{generate, SynthConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Collaborative distributions replaced by uniform ones over the
    /// candidate next tokens.
    UniformCt,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "uniform_ct" | "uniform-ct" => Ok(Ablation::UniformCt),
            other => Err(Error::InvalidConfig(format!("unknown ablation {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub interactions: Option<PathBuf>,
    pub items: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub paths: PathsConfig,
    /// Used when no input paths are given.
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub cf: CfConfig,
    pub lm: LmConfig,
    pub objective: Objective,
    pub alpha: f64,
    pub ablation: Ablation,
    /// Temperature of the candidate softmax.
    pub temperature: f64,
    pub eval: EvalConfig,
    /// Keep only the most recent training examples.
    pub max_train_examples: Option<usize>,
    /// Random subset of validation cases used for early stopping.
    pub max_val_cases: Option<usize>,
    /// Drives the cf, lm and eval streams; component seeds in `cf` and `lm`
    /// are overwritten from it.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            paths: PathsConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            cf: CfConfig::default(),
            lm: LmConfig::default(),
            objective: Objective::SoftNtp,
            alpha: 0.4,
            ablation: Ablation::None,
            temperature: 1.0,
            eval: EvalConfig::default(),
            max_train_examples: None,
            max_val_cases: None,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        check_alpha(self.alpha)?;
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.eval.ks.is_empty() || self.eval.beam_width < self.eval.k_max() {
            return Err(Error::InvalidConfig("beam width must cover every k".into()));
        }
        match (&self.paths.interactions, &self.paths.items) {
            (Some(a), Some(b)) => {
                for p in [a, b] {
                    if !p.exists() {
                        return Err(Error::InvalidConfig(format!("{} does not exist", p.display())));
                    }
                }
            }
            (None, None) => self.synth.validate()?,
            _ => return Err(Error::InvalidConfig("give both input paths or neither".into())),
        }
        Ok(())
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }

    /// Run label used in reports.
    pub fn label(&self) -> &'static str {
        match (self.objective, self.ablation) {
            (Objective::Ntp, _) => "NTP",
            (Objective::SoftNtp, Ablation::None) => "TCA",
            (Objective::SoftNtp, Ablation::UniformCt) => "w/o CT",
            (Objective::AuxKl, Ablation::None) => "w/o SA",
            (Objective::AuxKl, Ablation::UniformCt) => "w/o SA, w/o CT",
        }
    }

    fn cf_config(&self) -> CfConfig {
        CfConfig {
            seed: sub_seed(self.seed, "cf"),
            ..self.cf.clone()
        }
    }

    fn lm_config(&self) -> LmConfig {
        LmConfig {
            seed: sub_seed(self.seed, "lm"),
            ..self.lm.clone()
        }
    }
}

/// Pinned synthetic benchmark: about 2000 users and 500 items from the
/// planted generator, with model sizes small enough for one CPU core.
pub fn benchmark_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        synth: SynthConfig::default(),
        cf: CfConfig {
            dim: 64,
            n_blocks: 1,
            epochs: 20,
            ..CfConfig::default()
        },
        lm: LmConfig {
            d_model: 32,
            n_blocks: 1,
            n_heads: 2,
            max_len: 64,
            lr: 3e-3,
            batch_size: 32,
            max_epochs: 10,
            ..LmConfig::default()
        },
        max_train_examples: Some(8000),
        max_val_cases: Some(400),
        temperature: 0.5,
        seed,
        ..ExperimentConfig::default()
    }
}

/// Prepared data with the hashes of the inputs it came from.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: SplitDataset,
    pub catalog: Catalog,
    pub input_hashes: BTreeMap<String, String>,
}

const PREPARED_FILE: &str = "dataset.json";
const CATALOG_FILE: &str = "items.jsonl";

#[derive(Serialize, Deserialize)]
struct PreparedRecord {
    dataset: SplitDataset,
    input_hashes: BTreeMap<String, String>,
    tokenizer_mode: TokenizerMode,
}

impl Prepared {
    /// Writes `dataset.json` and the catalog's `items.jsonl` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join(CATALOG_FILE), &self.catalog.raw_items())?;
        let record = PreparedRecord {
            dataset: self.dataset.clone(),
            input_hashes: self.input_hashes.clone(),
            tokenizer_mode: self.catalog.vocab().mode(),
        };
        let p = dir.join(PREPARED_FILE);
        std::fs::write(&p, serde_json::to_vec(&record)?).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join(PREPARED_FILE);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        let record: PreparedRecord = serde_json::from_slice(&bytes)?;
        let catalog = Catalog::from_raw(read_items(&dir.join(CATALOG_FILE))?, record.tokenizer_mode)?;
        Ok(Prepared {
            dataset: record.dataset,
            catalog,
            input_hashes: record.input_hashes,
        })
    }
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<(Vec<RawInteraction>, Vec<RawItem>, BTreeMap<String, String>)> {
    let mut hashes = BTreeMap::new();
    match (&cfg.paths.interactions, &cfg.paths.items) {
        (Some(ip), Some(tp)) => {
            hashes.insert("interactions".into(), file_hash(ip)?);
            hashes.insert("items".into(), file_hash(tp)?);
            Ok((read_interactions(ip)?, read_items(tp)?, hashes))
        }
        _ => {
            let data = generate(&cfg.synth)?;
            hashes.insert("synthetic".into(), config_hash(&cfg.synth)?);
            Ok((data.interactions, data.items, hashes))
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (raw, items, input_hashes) = load_inputs(cfg)?;
    let (dataset, catalog) = prepare_data(raw, items, &cfg.data)?;
    log::info!("dataset\n{}", dataset.stats.table());
    Ok(Prepared {
        dataset,
        catalog,
        input_hashes,
    })
}

/// Trains the CF model on the training split's per-user histories.
pub fn train_cf_stage(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<CfModel> {
    let histories: Vec<_> = prepared
        .dataset
        .train
        .histories()
        .into_values()
        .filter(|h| h.len() >= 2)
        .collect();
    train_cf(&histories, prepared.catalog.len(), &cfg.cf_config())
}

/// The most recent training cases, capped by `max_train_examples`.
pub fn training_cases<'a>(cfg: &ExperimentConfig, prepared: &'a Prepared) -> &'a [Case] {
    let all = &prepared.dataset.train_examples;
    let keep = cfg.max_train_examples.unwrap_or(all.len()).min(all.len());
    &all[all.len() - keep..]
}

/// Prompts plus the label distributions the objective and ablation need.
pub fn build_examples(
    cfg: &ExperimentConfig,
    catalog: &Catalog,
    cases: &[Case],
    cf: Option<&dyn CfBackend>,
) -> Result<Vec<LmExample>> {
    use rayon::prelude::*;
    cases
        .par_iter()
        .map(|c| {
            let prompt = encode_prompt(&c.history, c.target, catalog, cfg.lm.max_len)?;
            let collab = match (cfg.objective, cfg.ablation) {
                (Objective::Ntp, _) => Vec::new(),
                (_, Ablation::UniformCt) => uniform_target_distributions(catalog, c.target)?,
                (_, Ablation::None) => {
                    let cf = cf.ok_or_else(|| Error::InvalidConfig("soft labels need a CF model".into()))?;
                    let z = cf.user_logits(&c.history)?;
                    precompute_target_distributions(catalog, &z.z, c.target, cfg.temperature)?
                }
            };
            Ok(LmExample { prompt, collab })
        })
        .collect()
}

fn validation_subset(cfg: &ExperimentConfig, cases: &[Case]) -> Vec<Case> {
    match cfg.max_val_cases {
        Some(m) if m < cases.len() => {
            let mut rng = stream(cfg.seed, "eval");
            let mut idx = sample(&mut rng, cases.len(), m).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| cases[i].clone()).collect()
        }
        _ => cases.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub objective: Objective,
    pub alpha: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub config_hash: String,
    pub input_hashes: BTreeMap<String, String>,
    pub split_policy: String,
    pub stats: DatasetStats,
    pub cf_final_loss: Option<f64>,
    pub lm_parameters: usize,
    pub training: TrainReport,
    pub validation: Option<ValidationMetrics>,
    pub test: EvalReport,
}

/// Holds data and the CF model so several LM runs can share them.
pub struct Runner {
    pub base: ExperimentConfig,
    pub prepared: Prepared,
    pub cf: CfModel,
}

impl Runner {
    /// Prepares data and trains (or reloads) the CF model. With an output
    /// directory the CF model is cached there, keyed by everything it
    /// depends on.
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let prepared = prepare(cfg).map_err(|e| e.in_stage("prepare-data"))?;
        let cf = Self::cf_model(cfg, &prepared).map_err(|e| e.in_stage("train-cf"))?;
        Ok(Runner {
            base: cfg.clone(),
            prepared,
            cf,
        })
    }

    pub fn from_parts(cfg: &ExperimentConfig, prepared: Prepared, cf: CfModel) -> Self {
        Runner {
            base: cfg.clone(),
            prepared,
            cf,
        }
    }

    fn cf_model(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<CfModel> {
        let Some(dir) = &cfg.paths.output_dir else {
            return train_cf_stage(cfg, prepared);
        };
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let key = config_hash(&(&cfg.data, &cfg.cf_config(), &prepared.input_hashes))?;
        let path = dir.join(format!("cf-{}.ckpt", &key[..16]));
        if path.exists() {
            if let Ok(m) = CfModel::load(&path) {
                log::info!("reusing CF model {}", path.display());
                return Ok(m);
            }
        }
        let m = train_cf_stage(cfg, prepared)?;
        m.save(&path)?;
        Ok(m)
    }

    /// One LM training and evaluation with `cfg`'s objective, alpha and
    /// ablation. Data and CF settings come from the runner.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunReport> {
        cfg.validate()?;
        let hash = cfg.hash()?;
        let out_dir = cfg.paths.output_dir.as_ref().map(|d| d.join(run_dir_name(cfg)));
        if let Some(d) = &out_dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let result = self.run_inner(cfg, out_dir.as_deref());
        if let (Err(e), Some(d)) = (&result, &out_dir) {
            let failure = serde_json::json!({ "config_hash": hash, "error": e.to_string() });
            let _ = std::fs::write(d.join("failure.json"), failure.to_string());
        }
        result
    }

    /// Builds labels and trains a decoder with `cfg`'s objective, alpha and
    /// ablation, early-stopping on the validation subset.
    pub fn train(&self, cfg: &ExperimentConfig) -> Result<(DecoderModel, TrainReport)> {
        let hash = cfg.hash()?;
        let catalog = &self.prepared.catalog;
        let cases = training_cases(cfg, &self.prepared);
        let examples = build_examples(cfg, catalog, cases, Some(&self.cf)).map_err(|e| e.in_stage("export-logits"))?;
        let mut model = DecoderModel::new(catalog.vocab().len(), cfg.lm_config())?;
        let val_cases = validation_subset(cfg, &self.prepared.dataset.validation_cases);
        let val_eval = EvalConfig {
            beam_width: cfg.eval.beam_width,
            ks: vec![5],
        };
        let mut validate = |m: &DecoderModel| -> Result<ValidationMetrics> {
            Ok(evaluate(m, Some(&self.cf), &val_cases, catalog, &val_eval, &hash)?
                .report
                .validation())
        };
        let v: Option<&mut crate::lm::Validator<'_>> = if val_cases.is_empty() { None } else { Some(&mut validate) };
        let report = train_lm(&mut model, &examples, cfg.objective, cfg.alpha, v).map_err(|e| e.in_stage("train-lm"))?;
        Ok((model, report))
    }

    /// Evaluates `model` on the test cases.
    pub fn test(&self, cfg: &ExperimentConfig, model: &DecoderModel) -> Result<Evaluation> {
        evaluate(
            model,
            Some(&self.cf),
            &self.prepared.dataset.test_cases,
            &self.prepared.catalog,
            &cfg.eval,
            &cfg.hash()?,
        )
        .map_err(|e| e.in_stage("evaluate"))
    }

    /// Report for a trained model and its test evaluation.
    pub fn report(&self, cfg: &ExperimentConfig, model: &DecoderModel, training: TrainReport, test: EvalReport) -> Result<RunReport> {
        Ok(RunReport {
            label: cfg.label().to_owned(),
            objective: cfg.objective,
            alpha: cfg.alpha,
            ablation: cfg.ablation,
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            input_hashes: self.prepared.input_hashes.clone(),
            split_policy: self.prepared.dataset.split_policy.clone(),
            stats: self.prepared.dataset.stats.clone(),
            cf_final_loss: self.cf.final_loss(),
            lm_parameters: model.param_count(),
            validation: training.best_validation,
            training,
            test,
        })
    }

    fn run_inner(&self, cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<RunReport> {
        let (model, training) = self.train(cfg)?;
        if let Some(d) = out_dir {
            write_training_log(&d.join("training_log.jsonl"), &training)?;
            model.save(&d.join("lm.ckpt"))?;
        }
        let test = self.test(cfg, &model)?;
        let report = self.report(cfg, &model, training, test.report)?;
        if let Some(d) = out_dir {
            write_jsonl(&d.join("test_trace.jsonl"), &test.traces)?;
            write_json(&d.join("report.json"), &report)?;
        }
        Ok(report)
    }
}

/// One JSON line per epoch.
pub fn write_training_log(path: &Path, training: &TrainReport) -> Result<()> {
    write_jsonl(path, &training.epochs)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run_dir_name(cfg: &ExperimentConfig) -> String {
    format!(
        "{}-{:?}-a{:.2}-s{}",
        cfg.objective,
        cfg.ablation,
        cfg.alpha,
        cfg.seed
    )
    .to_lowercase()
}

/// Full experiment: prepare, train CF, build labels, train LM, evaluate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    Runner::new(cfg)?.run(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    #[serde(rename = "HR@5")]
    pub hr_at_5: f64,
    #[serde(rename = "NDCG@5")]
    pub ndcg_at_5: f64,
    #[serde(rename = "CC")]
    pub cc: f64,
}

/// Soft-NTP runs over `alphas` sharing data and the CF model. With an
/// output directory finished rows are cached and reused.
pub fn alpha_sweep(cfg: &ExperimentConfig, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    for &a in alphas {
        check_alpha(a)?;
    }
    let runner = Runner::new(cfg)?;
    alphas
        .iter()
        .map(|&alpha| {
            let run_cfg = ExperimentConfig {
                alpha,
                ..cfg.clone()
            };
            let cache = match &cfg.paths.output_dir {
                Some(d) => Some(d.join(format!("sweep-{}.json", &run_cfg.hash()?[..16]))),
                None => None,
            };
            if let Some(p) = cache.as_ref().filter(|p| p.exists()) {
                if let Ok(row) = std::fs::read(p).map_err(|e| Error::io(p, e)).and_then(|b| Ok(serde_json::from_slice(&b)?)) {
                    return Ok(row);
                }
            }
            let r = runner.run(&run_cfg)?;
            let row = SweepRow {
                alpha,
                hr_at_5: r.test.hr(5),
                ndcg_at_5: r.test.ndcg(5),
                cc: r.test.cc.unwrap_or(f64::NAN),
            };
            if let Some(p) = &cache {
                std::fs::write(p, serde_json::to_vec(&row)?).map_err(|e| Error::io(p, e))?;
            }
            Ok(row)
        })
        .collect()
}

/// Tab-separated sweep table.
pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("alpha\tHR@5\tNDCG@5\tCC\n");
    for r in rows {
        s.push_str(&format!("{:.2}\t{:.4}\t{:.4}\t{:.4}\n", r.alpha, r.hr_at_5, r.ndcg_at_5, r.cc));
    }
    s
}

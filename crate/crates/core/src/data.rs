//! Interaction logs: ingestion, k-core filtering, the global chronological
//! 8:1:1 split and construction of (history, next item) cases.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ItemIdx, RawItem, TokenizerMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawInteraction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: String,
    pub item: ItemIdx,
    pub timestamp: i64,
}

/// Interactions in stream order (chronological, ties by input order).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

impl InteractionLog {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Per-user item sequences in stream order, keyed by user id.
    pub fn histories(&self) -> BTreeMap<&str, Vec<ItemIdx>> {
        let mut out: BTreeMap<&str, Vec<ItemIdx>> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.user.as_str()).or_default().push(r.item);
        }
        out
    }
}

/// One prediction context: the user's most recent items before `target`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Case {
    pub user: String,
    pub history: Vec<ItemIdx>,
    pub target: ItemIdx,
    pub timestamp: i64,
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::format(format!("{}:{}", path.display(), n + 1), e.to_string())
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_interactions(path: &Path) -> Result<Vec<RawInteraction>> {
    read_jsonl(path)
}

/// Repeatedly drops users and items with fewer than `k` interactions until
/// every remaining user and item has at least `k`. Input order is kept.
pub fn k_core(mut records: Vec<RawInteraction>, k: usize) -> Vec<RawInteraction> {
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for r in &records {
            *users.entry(&r.user_id).or_default() += 1;
            *items.entry(&r.item_id).or_default() += 1;
        }
        let keep: Vec<bool> = records
            .iter()
            .map(|r| users[r.user_id.as_str()] >= k && items[r.item_id.as_str()] >= k)
            .collect();
        if keep.iter().all(|&b| b) {
            return records;
        }
        let mut it = keep.into_iter();
        records.retain(|_| it.next().unwrap_or(false));
    }
}

/// Sizes of the train/validation/test parts of `n` records at 8:1:1.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.8).round() as usize;
    let val = ((n as f64 * 0.1).round() as usize).min(n - train);
    (train, val, n - train - val)
}

/// Builds a case for every stream position in `range` whose user has at
/// least `min_history` earlier interactions; histories keep the last
/// `history_len` items.
pub fn build_cases(
    stream: &[Interaction],
    range: std::ops::Range<usize>,
    history_len: usize,
    min_history: usize,
) -> Vec<Case> {
    let mut seen: HashMap<&str, Vec<ItemIdx>> = HashMap::new();
    let mut out = Vec::new();
    for (pos, r) in stream.iter().enumerate().take(range.end) {
        let hist = seen.entry(r.user.as_str()).or_default();
        if pos >= range.start && hist.len() >= min_history.max(1) {
            let from = hist.len().saturating_sub(history_len);
            out.push(Case {
                user: r.user.clone(),
                history: hist[from..].to_vec(),
                target: r.item,
                timestamp: r.timestamp,
            });
        }
        hist.push(r.item);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
    pub train_examples: usize,
    pub validation_cases: usize,
    pub test_cases: usize,
}

impl DatasetStats {
    /// Tab-separated table: one header line, one value line.
    pub fn table(&self) -> String {
        format!(
            "#Users\t#Items\t#Interactions\t#Density\t#Train\t#Valid\t#Test\n{}\t{}\t{}\t{:.6}\t{}\t{}\t{}\n",
            self.users,
            self.items,
            self.interactions,
            self.density,
            self.train,
            self.validation,
            self.test
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DataConfig {
    pub k_core: usize,
    /// Items per history window (prompt and CF context).
    pub history_len: usize,
    /// Evaluation cases need at least this many earlier interactions.
    pub min_eval_history: usize,
    /// Training examples need at least this many earlier interactions.
    pub min_train_history: usize,
    pub tokenizer_mode: TokenizerMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            k_core: 5,
            history_len: 10,
            min_eval_history: 10,
            min_train_history: 1,
            tokenizer_mode: TokenizerMode::Word,
        }
    }
}

/// Chronologically split interactions plus the derived cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub train: InteractionLog,
    pub validation: InteractionLog,
    pub test: InteractionLog,
    pub train_examples: Vec<Case>,
    pub validation_cases: Vec<Case>,
    pub test_cases: Vec<Case>,
    pub stats: DatasetStats,
    /// How the split was cut, recorded for audit.
    pub split_policy: String,
}

pub const SPLIT_POLICY: &str = "global chronological 8:1:1 over the time-sorted stream";

/// k-core filtering, catalog construction, chronological split and case
/// extraction.
pub fn prepare_data(
    raw_interactions: Vec<RawInteraction>,
    raw_items: Vec<RawItem>,
    cfg: &DataConfig,
) -> Result<(SplitDataset, Catalog)> {
    let titled: HashSet<&str> = raw_items
        .iter()
        .filter(|r| !crate::catalog::split_title(&r.title, cfg.tokenizer_mode).is_empty())
        .map(|r| r.item_id.as_str())
        .collect();
    let before = raw_interactions.len();
    let known: Vec<RawInteraction> = raw_interactions
        .into_iter()
        .filter(|r| titled.contains(r.item_id.as_str()))
        .collect();
    if known.len() < before {
        log::warn!(
            "dropped {} interactions with unknown or untitled items",
            before - known.len()
        );
    }
    let mut core = k_core(known, cfg.k_core);
    if core.is_empty() {
        return Err(Error::DatasetTooSparse(format!(
            "{}-core filtering removed every interaction",
            cfg.k_core
        )));
    }
    // stable: ties keep input order
    core.sort_by_key(|r| r.timestamp);

    let surviving: HashSet<&str> = core.iter().map(|r| r.item_id.as_str()).collect();
    let items: Vec<RawItem> = raw_items
        .iter()
        .filter(|r| surviving.contains(r.item_id.as_str()))
        .cloned()
        .collect();
    let catalog = Catalog::from_raw(items, cfg.tokenizer_mode)?;

    let stream: Vec<Interaction> = core
        .iter()
        .map(|r| {
            Ok(Interaction {
                user: r.user_id.clone(),
                item: catalog
                    .lookup(&r.item_id)
                    .ok_or_else(|| Error::UnknownItem(r.item_id.clone()))?,
                timestamp: r.timestamp,
            })
        })
        .collect::<Result<_>>()?;
    let n = stream.len();
    let (n_train, n_val, _) = split_counts(n);
    let train_examples = build_cases(&stream, 0..n_train, cfg.history_len, cfg.min_train_history);
    let validation_cases = build_cases(
        &stream,
        n_train..n_train + n_val,
        cfg.history_len,
        cfg.min_eval_history,
    );
    let test_cases = build_cases(&stream, n_train + n_val..n, cfg.history_len, cfg.min_eval_history);
    if train_examples.is_empty() || test_cases.is_empty() {
        return Err(Error::DatasetTooSparse(format!(
            "{} training examples and {} test cases after filtering",
            train_examples.len(),
            test_cases.len()
        )));
    }
    let users: HashSet<&str> = stream.iter().map(|r| r.user.as_str()).collect();
    let stats = DatasetStats {
        users: users.len(),
        items: catalog.len(),
        interactions: n,
        density: n as f64 / (users.len() as f64 * catalog.len() as f64),
        train: n_train,
        validation: n_val,
        test: n - n_train - n_val,
        train_examples: train_examples.len(),
        validation_cases: validation_cases.len(),
        test_cases: test_cases.len(),
    };
    let mut rest = stream;
    let test = rest.split_off(n_train + n_val);
    let validation = rest.split_off(n_train);
    Ok((
        SplitDataset {
            train: InteractionLog { records: rest },
            validation: InteractionLog { records: validation },
            test: InteractionLog { records: test },
            train_examples,
            validation_cases,
            test_cases,
            stats,
            split_policy: SPLIT_POLICY.to_owned(),
        },
        catalog,
    ))
}

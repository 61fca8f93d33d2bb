//! Sequential collaborative-filtering model producing raw per-user item
//! logits.
//!
//! The encoder is a small causal self-attention stack over item ids whose
//! item table doubles as the scoring table: the user embedding is the
//! encoder output at the last history position and `z[i] = <e_u, e_i>`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::catalog::ItemIdx;
use crate::checkpoint;
use crate::data::Case;
use crate::error::{Error, Result};
use crate::nn::{batch_gradient, below, Adam, LayoutBuilder, Transformer, TransformerConfig};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CfConfig {
    pub dim: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate is multiplied by `lr_decay` every `lr_decay_every`
    /// epochs.
    pub lr_decay_every: usize,
    pub lr_decay: f64,
    pub negatives: usize,
    /// Catalogs up to this size train with the full softmax.
    pub full_softmax_max_items: usize,
    pub weight_decay: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            dim: 64,
            max_len: 10,
            n_blocks: 2,
            n_heads: 1,
            epochs: 20,
            batch_size: 128,
            lr: 1e-3,
            lr_decay_every: 10,
            lr_decay: 0.5,
            negatives: 128,
            full_softmax_max_items: 5000,
            weight_decay: 0.0,
            init_std: 0.1,
            seed: 0,
        }
    }
}

/// Raw, unnormalized scores over the whole catalog for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct UserLogits {
    pub z: Vec<f64>,
}

impl UserLogits {
    /// Highest-scoring item; ties go to the smallest index.
    pub fn argmax(&self) -> ItemIdx {
        let mut best = 0;
        for (i, &v) in self.z.iter().enumerate() {
            if v > self.z[best] {
                best = i;
            }
        }
        ItemIdx(best as u32)
    }

    /// Items ranked by score, ties by index.
    pub fn ranking(&self) -> Vec<ItemIdx> {
        let mut idx: Vec<usize> = (0..self.z.len()).collect();
        idx.sort_by(|&a, &b| self.z[b].total_cmp(&self.z[a]).then(a.cmp(&b)));
        idx.into_iter().map(|i| ItemIdx(i as u32)).collect()
    }
}

/// Any model that maps a history to a user embedding and scores items
/// against it.
pub trait CfBackend: Sync {
    fn n_items(&self) -> usize;

    fn user_embedding(&self, history: &[ItemIdx]) -> Result<Vec<f64>>;

    fn score_items(&self, e_u: &[f64]) -> UserLogits;

    fn user_logits(&self, history: &[ItemIdx]) -> Result<UserLogits> {
        Ok(self.score_items(&self.user_embedding(history)?))
    }
}

#[derive(Clone, Debug)]
pub struct CfModel {
    pub config: CfConfig,
    n_items: usize,
    net: Transformer,
    params: Vec<f64>,
    /// Mean per-position training loss of each epoch.
    pub loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CfCheckpointConfig {
    config: CfConfig,
    n_items: usize,
    loss_history: Vec<f64>,
}

const CHECKPOINT_KIND: &str = "cf";

impl CfModel {
    pub fn new(n_items: usize, config: CfConfig) -> Result<Self> {
        if n_items == 0 {
            return Err(Error::NoTrainingData);
        }
        let mut lb = LayoutBuilder::default();
        let net = Transformer::new(
            TransformerConfig {
                vocab: n_items,
                d_model: config.dim,
                n_blocks: config.n_blocks,
                n_heads: config.n_heads,
                max_len: config.max_len,
                ffn_mult: 4,
                init_std: config.init_std,
            },
            &mut lb,
        )?;
        let mut params = vec![0.0; lb.len()];
        net.init(&mut params, &mut stream(config.seed, "cf-init"));
        Ok(CfModel {
            config,
            n_items,
            net,
            params,
            loss_history: Vec::new(),
        })
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_history.last().copied()
    }

    pub fn item_embedding(&self, item: ItemIdx) -> &[f64] {
        self.net.token_embedding(&self.params, item.index())
    }

    fn truncate<'a>(&self, history: &'a [ItemIdx]) -> &'a [ItemIdx] {
        &history[history.len().saturating_sub(self.config.max_len)..]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = CfCheckpointConfig {
            config: self.config.clone(),
            n_items: self.n_items,
            loss_history: self.loss_history.clone(),
        };
        checkpoint::save(path, CHECKPOINT_KIND, &cfg, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params): (CfCheckpointConfig, Vec<f64>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut m = CfModel::new(cfg.n_items, cfg.config)?;
        if params.len() != m.params.len() {
            return Err(Error::format("cf checkpoint", "parameter count does not match config"));
        }
        m.params = params;
        m.loss_history = cfg.loss_history;
        Ok(m)
    }

    /// Loss over one window and its gradient; returns (loss sum, positions).
    fn window_loss(&self, window: &[ItemIdx], negatives: &[Vec<usize>], g: &mut [f64]) -> Result<f64> {
        let d = self.config.dim;
        let inputs: Vec<usize> = window[..window.len() - 1].iter().map(|i| i.index()).collect();
        let trace = self.net.forward(&self.params, &inputs)?;
        let emb = self.net.tok_emb.of(&self.params);
        let mut d_hidden = vec![0.0; trace.hidden.len()];
        let mut d_emb: Vec<(usize, usize, f64)> = Vec::new();
        let mut loss = 0.0;
        for t in 0..inputs.len() {
            let h = &trace.hidden[t * d..(t + 1) * d];
            let target = window[t + 1].index();
            // candidate rows: everything, or the target followed by negatives
            let cands: Vec<usize> = if negatives.is_empty() {
                (0..self.n_items).collect()
            } else {
                std::iter::once(target).chain(negatives[t].iter().copied()).collect()
            };
            let scores: Vec<f64> = cands
                .iter()
                .map(|&i| emb[i * d..(i + 1) * d].iter().zip(h).map(|(a, b)| a * b).sum())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            let tpos = cands.iter().position(|&c| c == target).expect("target is a candidate");
            loss += lse - scores[tpos];
            let dh = &mut d_hidden[t * d..(t + 1) * d];
            for (k, (&i, &s)) in cands.iter().zip(&scores).enumerate() {
                let mut gs = (s - lse).exp();
                if k == tpos {
                    gs -= 1.0;
                }
                if gs == 0.0 {
                    continue;
                }
                for (o, e) in dh.iter_mut().zip(&emb[i * d..(i + 1) * d]) {
                    *o += gs * e;
                }
                d_emb.push((i, t, gs));
            }
        }
        {
            let ge = self.net.tok_emb.of_mut(g);
            for (i, t, gs) in d_emb {
                let h = &trace.hidden[t * d..(t + 1) * d];
                for (o, x) in ge[i * d..(i + 1) * d].iter_mut().zip(h) {
                    *o += gs * x;
                }
            }
        }
        self.net.backward(&self.params, &trace, &d_hidden, g);
        Ok(loss)
    }
}

impl CfBackend for CfModel {
    fn n_items(&self) -> usize {
        self.n_items
    }

    fn user_embedding(&self, history: &[ItemIdx]) -> Result<Vec<f64>> {
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let h = self.truncate(history);
        let tokens: Vec<usize> = h.iter().map(|i| i.index()).collect();
        let trace = self.net.forward(&self.params, &tokens)?;
        let d = self.config.dim;
        Ok(trace.hidden[(tokens.len() - 1) * d..].to_vec())
    }

    fn score_items(&self, e_u: &[f64]) -> UserLogits {
        let d = self.config.dim;
        let emb = self.net.tok_emb.of(&self.params);
        let mut z = vec![0.0; self.n_items];
        crate::nn::matmul(&mut z, emb, e_u, self.n_items, d, 1, false, false, false);
        UserLogits { z }
    }
}

/// Splits each history into windows of at most `max_len + 1` items, from
/// the end backwards, so every position after the first is a target once.
pub fn training_windows(histories: &[Vec<ItemIdx>], max_len: usize) -> Vec<Vec<ItemIdx>> {
    let mut out = Vec::new();
    for h in histories {
        let mut end = h.len();
        while end >= 2 {
            let start = end.saturating_sub(max_len + 1);
            out.push(h[start..end].to_vec());
            if start == 0 {
                break;
            }
            end = start + 1;
        }
    }
    out
}

/// Trains on per-user chronological histories with next-item cross-entropy.
pub fn train_cf(histories: &[Vec<ItemIdx>], n_items: usize, config: &CfConfig) -> Result<CfModel> {
    let windows = training_windows(histories, config.max_len);
    if windows.is_empty() {
        return Err(Error::NoTrainingData);
    }
    if windows.iter().flatten().any(|i| i.index() >= n_items) {
        return Err(Error::ContractViolation("history references unknown item".into()));
    }
    let mut model = CfModel::new(n_items, config.clone())?;
    let mut opt = Adam::new(model.params.len(), config.weight_decay);
    let mut rng = stream(config.seed, "cf-train");
    let sampled = n_items > config.full_softmax_max_items;
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut lr = config.lr;
    for epoch in 0..config.epochs {
        if epoch > 0 && config.lr_decay_every > 0 && epoch % config.lr_decay_every == 0 {
            lr *= config.lr_decay;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_positions = 0usize;
        for batch in order.chunks(config.batch_size.max(1)) {
            // negatives are drawn up front so the gradient pass stays pure
            let jobs: Vec<(&[ItemIdx], Vec<Vec<usize>>)> = batch
                .iter()
                .map(|&w| {
                    let win = windows[w].as_slice();
                    let negs = if sampled {
                        win[1..]
                            .iter()
                            .map(|target| {
                                (0..config.negatives)
                                    .map(|_| loop {
                                        let c = below(&mut rng, n_items);
                                        if c != target.index() {
                                            break c;
                                        }
                                    })
                                    .collect()
                            })
                            .collect()
                    } else {
                        Vec::new()
                    };
                    (win, negs)
                })
                .collect();
            let positions: usize = jobs.iter().map(|(w, _)| w.len() - 1).sum();
            let (mut g, loss) = batch_gradient(model.params.len(), &jobs, |(w, negs), g| {
                model.window_loss(w, negs, g)
            })?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: epoch_positions,
                    position: 0,
                });
            }
            let scale = 1.0 / positions as f64;
            g.iter_mut().for_each(|v| *v *= scale);
            opt.step(&mut model.params, &g, lr);
            epoch_loss += loss;
            epoch_positions += positions;
        }
        let mean = epoch_loss / epoch_positions as f64;
        log::debug!("cf epoch {epoch}: loss {mean:.4}");
        model.loss_history.push(mean);
    }
    Ok(model)
}

const LOGITS_MAGIC: &[u8; 4] = b"ZLOG";
const LOGITS_VERSION: u32 = 1;

/// One exported context, in file order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitsContext {
    pub user: String,
    pub timestamp: i64,
    pub target: ItemIdx,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogitsManifest {
    pub n_items: usize,
    pub count: usize,
    pub contexts: Vec<LogitsContext>,
}

/// Little-endian `magic, version u32, n_items u32, count u32` header
/// followed by `count * n_items` f32 values.
pub fn encode_logits(n_items: usize, rows: &[UserLogits]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + rows.len() * n_items * 4);
    out.extend_from_slice(LOGITS_MAGIC);
    out.extend_from_slice(&LOGITS_VERSION.to_le_bytes());
    out.extend_from_slice(&(n_items as u32).to_le_bytes());
    out.extend_from_slice(&(rows.len() as u32).to_le_bytes());
    for r in rows {
        if r.z.len() != n_items {
            return Err(Error::ContractViolation(format!(
                "logit row of length {} in a file of width {n_items}",
                r.z.len()
            )));
        }
        for &v in &r.z {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_logits(bytes: &[u8]) -> Result<(usize, Vec<Vec<f32>>)> {
    let bad = |r: &str| Error::format("logits file", r);
    if bytes.len() < 16 || &bytes[..4] != LOGITS_MAGIC {
        return Err(bad("bad header"));
    }
    let word = |k: usize| u32::from_le_bytes(bytes[k..k + 4].try_into().expect("4 bytes")) as usize;
    if word(4) != LOGITS_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (n_items, count) = (word(8), word(12));
    let body = &bytes[16..];
    if body.len() != n_items * count * 4 {
        return Err(bad("body size does not match header"));
    }
    let rows = body
        .chunks_exact(n_items.max(1) * 4)
        .take(count)
        .map(|row| {
            row.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect()
        })
        .collect();
    Ok((n_items, rows))
}

/// Scores every case and writes the logits file plus a JSON manifest
/// (`<path>.manifest.json`). Rows are ordered by user id, then timestamp.
pub fn export_logits<B: CfBackend + ?Sized>(model: &B, cases: &[Case], path: &Path) -> Result<LogitsManifest> {
    let mut order: Vec<&Case> = cases.iter().collect();
    order.sort_by(|a, b| a.user.cmp(&b.user).then(a.timestamp.cmp(&b.timestamp)));
    let rows = order
        .iter()
        .map(|c| model.user_logits(&c.history))
        .collect::<Result<Vec<_>>>()?;
    let bytes = encode_logits(model.n_items(), &rows)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))?;
    let manifest = LogitsManifest {
        n_items: model.n_items(),
        count: rows.len(),
        contexts: order
            .iter()
            .map(|c| LogitsContext {
                user: c.user.clone(),
                timestamp: c.timestamp,
                target: c.target,
            })
            .collect(),
    };
    let mpath = manifest_path(path);
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.json");
    s.into()
}

pub fn read_logits(path: &Path) -> Result<(usize, Vec<Vec<f32>>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_logits(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> CfConfig {
        CfConfig {
            dim: 8,
            max_len: 4,
            n_blocks: 1,
            epochs: 3,
            batch_size: 4,
            ..CfConfig::default()
        }
    }

    fn hist(ids: &[u32]) -> Vec<ItemIdx> {
        ids.iter().map(|&i| ItemIdx(i)).collect()
    }

    #[test]
    fn windows_cover_each_target_once() {
        let w = training_windows(&[hist(&[0, 1, 2, 3, 4, 5, 6])], 3);
        assert_eq!(w, vec![hist(&[3, 4, 5, 6]), hist(&[0, 1, 2, 3])]);
        let w = training_windows(&[hist(&[7])], 3);
        assert!(w.is_empty());
    }

    #[test]
    fn empty_log_rejected() {
        assert!(matches!(train_cf(&[], 5, &tiny_config()), Err(Error::NoTrainingData)));
        assert!(matches!(
            train_cf(&[hist(&[1])], 5, &tiny_config()),
            Err(Error::NoTrainingData)
        ));
    }

    #[test]
    fn minimal_log_trains() {
        let m = train_cf(&[hist(&[0, 1])], 3, &tiny_config()).unwrap();
        assert_eq!(m.loss_history.len(), 3);
        assert!(m.final_loss().unwrap().is_finite());
    }

    #[test]
    fn training_is_deterministic() {
        let data = vec![hist(&[0, 1, 2, 3]), hist(&[3, 2, 1]), hist(&[4, 0, 4])];
        let a = train_cf(&data, 5, &tiny_config()).unwrap();
        let b = train_cf(&data, 5, &tiny_config()).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn sampled_softmax_path_trains() {
        let cfg = CfConfig {
            full_softmax_max_items: 0,
            negatives: 3,
            ..tiny_config()
        };
        let data = vec![hist(&[0, 1, 2, 3]), hist(&[3, 2, 1, 0])];
        let m = train_cf(&data, 6, &cfg).unwrap();
        assert!(m.loss_history.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn user_embedding_contracts() {
        let m = CfModel::new(6, tiny_config()).unwrap();
        assert!(matches!(m.user_embedding(&[]), Err(Error::EmptyHistory)));
        let long = hist(&[0, 1, 2, 3, 4, 5]);
        assert_eq!(m.user_embedding(&long).unwrap(), m.user_embedding(&long[2..]).unwrap());
        let single = m.user_embedding(&hist(&[3])).unwrap();
        assert_eq!(single.len(), 8);
    }

    #[test]
    fn zero_embedding_scores_zero() {
        let m = CfModel::new(6, tiny_config()).unwrap();
        let z = m.score_items(&[0.0; 8]);
        assert!(z.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ranking_ties_by_index() {
        let z = UserLogits { z: vec![1.0, 3.0, 3.0, -1.0] };
        assert_eq!(z.argmax(), ItemIdx(1));
        assert_eq!(z.ranking(), hist(&[1, 2, 0, 3]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = train_cf(&[hist(&[0, 1, 2])], 3, &tiny_config()).unwrap();
        let path = dir.path().join("cf.bin");
        m.save(&path).unwrap();
        let back = CfModel::load(&path).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.loss_history, m.loss_history);
    }

    #[test]
    fn logits_header_validation() {
        let rows = vec![UserLogits { z: vec![1.0, 2.0] }];
        let bytes = encode_logits(2, &rows).unwrap();
        assert_eq!(bytes.len(), 16 + 8);
        let (n, back) = decode_logits(&bytes).unwrap();
        assert_eq!(n, 2);
        assert_eq!(back, vec![vec![1.0f32, 2.0]]);
        assert!(decode_logits(&bytes[..20]).is_err());
        assert!(encode_logits(3, &rows).is_err());
    }
}

//! Small causal decoder over title tokens, trained with teacher forcing on
//! the target item's tokens only.
//!
//! The decoder vocabulary is the catalog vocabulary plus two structural
//! tokens, BOS and SEP. A prompt is
//! `[BOS, title_1, SEP, ..., title_k, SEP, target tokens..., <eos>]` and the
//! logits at position `p - 1` predict the token at `p`.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ItemIdx, TokenId};
use crate::checkpoint;
use crate::collab::TokenDistribution;
use crate::error::{Error, Result};
use crate::loss::{aux_kl_position, check_alpha, make_soft_label, ntp_position, soft_ntp_position, Objective};
use crate::nn::{batch_gradient, clip_grad_norm, matmul, Adam, KvCache, LayoutBuilder, Span, Transformer, TransformerConfig};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub max_len: usize,
    /// Share the output projection with the token embedding table.
    pub tied: bool,
    /// Initial learning rate, decayed linearly to zero over all steps.
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub weight_decay: f64,
    /// Gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            d_model: 64,
            n_blocks: 2,
            n_heads: 2,
            max_len: 256,
            tied: true,
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 10,
            eval_every: 2,
            patience: 2,
            weight_decay: 0.0,
            clip_norm: 1.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

/// Decoder vocabulary size for a catalog vocabulary of `n` tokens.
pub fn lm_vocab_size(n: usize) -> usize {
    n + 2
}

pub fn bos_id(catalog_vocab: usize) -> usize {
    catalog_vocab
}

pub fn sep_id(catalog_vocab: usize) -> usize {
    catalog_vocab + 1
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptEncoding {
    pub tokens: Vec<usize>,
    /// True exactly on target token positions.
    pub mask: Vec<bool>,
    pub target_start: usize,
    /// History items that survived truncation.
    pub history_items: usize,
}

impl PromptEncoding {
    /// The prompt without its target, as fed to generation.
    pub fn context(&self) -> &[usize] {
        &self.tokens[..self.target_start]
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[self.target_start..]
    }
}

fn check_item(catalog: &Catalog, item: ItemIdx) -> Result<()> {
    if item.index() < catalog.len() {
        Ok(())
    } else {
        Err(Error::UnknownItem(format!("item index {}", item.index())))
    }
}

fn history_tokens(history: &[ItemIdx], catalog: &Catalog, budget: usize) -> Result<(Vec<usize>, usize)> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let sep = sep_id(catalog.vocab().len());
    let mut parts: Vec<Vec<usize>> = Vec::new();
    // BOS takes one slot
    let mut used = 1;
    for &item in history.iter().rev() {
        check_item(catalog, item)?;
        let toks = catalog.tokens(item);
        // title without its eos, then SEP
        let part: Vec<usize> = toks[..toks.len() - 1]
            .iter()
            .map(|&t| t as usize)
            .chain(std::iter::once(sep))
            .collect();
        if used + part.len() > budget {
            break;
        }
        used += part.len();
        parts.push(part);
    }
    let kept = parts.len();
    let mut out = Vec::with_capacity(used);
    out.push(bos_id(catalog.vocab().len()));
    for p in parts.into_iter().rev() {
        out.extend(p);
    }
    Ok((out, kept))
}

/// Builds the training layout, dropping the oldest history items until the
/// prompt fits in `max_len`.
pub fn encode_prompt(history: &[ItemIdx], target: ItemIdx, catalog: &Catalog, max_len: usize) -> Result<PromptEncoding> {
    check_item(catalog, target)?;
    let target_toks: Vec<usize> = catalog.tokens(target).iter().map(|&t| t as usize).collect();
    if target_toks.len() + 1 > max_len {
        return Err(Error::ContractViolation(format!(
            "target of {} tokens does not fit in {max_len}",
            target_toks.len()
        )));
    }
    let (mut tokens, kept) = history_tokens(history, catalog, max_len - target_toks.len())?;
    let target_start = tokens.len();
    tokens.extend(target_toks);
    let mask = (0..tokens.len()).map(|p| p >= target_start).collect();
    Ok(PromptEncoding {
        tokens,
        mask,
        target_start,
        history_items: kept,
    })
}

/// Generation-time prompt: room is reserved for the longest catalog item.
pub fn encode_context(history: &[ItemIdx], catalog: &Catalog, max_len: usize) -> Result<Vec<usize>> {
    let reserve = catalog.trie().max_depth();
    if reserve + 1 > max_len {
        return Err(Error::ContractViolation("catalog items longer than the context".into()));
    }
    Ok(history_tokens(history, catalog, max_len - reserve)?.0)
}

/// One training example: prompt plus the collaborative distributions along
/// the gold path (empty for plain NTP).
#[derive(Clone, Debug, PartialEq)]
pub struct LmExample {
    pub prompt: PromptEncoding,
    pub collab: Vec<TokenDistribution>,
}

#[derive(Clone, Debug)]
pub struct DecoderModel {
    pub config: LmConfig,
    catalog_vocab: usize,
    net: Transformer,
    out: Option<Span>,
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LmCheckpointConfig {
    config: LmConfig,
    catalog_vocab: usize,
}

const CHECKPOINT_KIND: &str = "lm";

impl DecoderModel {
    pub fn new(catalog_vocab: usize, config: LmConfig) -> Result<Self> {
        let vocab = lm_vocab_size(catalog_vocab);
        let mut lb = LayoutBuilder::default();
        let net = Transformer::new(
            TransformerConfig {
                vocab,
                d_model: config.d_model,
                n_blocks: config.n_blocks,
                n_heads: config.n_heads,
                max_len: config.max_len,
                ffn_mult: 4,
                init_std: config.init_std,
            },
            &mut lb,
        )?;
        let out = (!config.tied).then(|| lb.alloc(vocab * config.d_model));
        let mut params = vec![0.0; lb.len()];
        let mut rng = stream(config.seed, "lm-init");
        net.init(&mut params, &mut rng);
        if let Some(o) = out {
            let std = config.init_std;
            let normal = rand_distr::Normal::new(0.0, std).expect("finite std");
            for v in o.of_mut(&mut params) {
                *v = rand_distr::Distribution::sample(&normal, &mut rng);
            }
        }
        Ok(DecoderModel {
            config,
            catalog_vocab,
            net,
            out,
            params,
        })
    }

    pub fn vocab_size(&self) -> usize {
        lm_vocab_size(self.catalog_vocab)
    }

    pub fn catalog_vocab(&self) -> usize {
        self.catalog_vocab
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn transformer(&self) -> &Transformer {
        &self.net
    }

    fn out_span(&self) -> Span {
        self.out.unwrap_or(self.net.tok_emb)
    }

    /// `rows x vocab` logits for `rows` hidden states.
    fn project(&self, p: &[f64], hidden: &[f64], rows: usize) -> Vec<f64> {
        let v = self.vocab_size();
        let mut z = vec![0.0; rows * v];
        matmul(&mut z, hidden, self.out_span().of(p), rows, self.config.d_model, v, false, true, false);
        z
    }

    /// One logit vector per input position.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let trace = self.net.forward(&self.params, tokens)?;
        let v = self.vocab_size();
        let z = self.project(&self.params, &trace.hidden, tokens.len());
        Ok(z.chunks(v).map(<[f64]>::to_vec).collect())
    }

    pub fn encode(&self, context: &[usize]) -> Result<KvCache> {
        self.net.encode(&self.params, context)
    }

    /// Logits for the token after `context ++ suffix`, reusing the cached
    /// context.
    pub fn next_logits(&self, cache: &KvCache, suffix: &[usize]) -> Result<Vec<f64>> {
        let h = self.net.extend(&self.params, cache, suffix)?;
        Ok(self.project(&self.params, &h, 1))
    }

    /// Masked loss of one example under `params`, accumulating its parameter
    /// gradient into `g`. Returns the summed per-position loss.
    pub fn example_loss(
        &self,
        params: &[f64],
        ex: &LmExample,
        objective: Objective,
        alpha: f64,
        g: &mut [f64],
    ) -> Result<f64> {
        let prompt = &ex.prompt;
        let d = self.config.d_model;
        let v = self.vocab_size();
        let n = prompt.tokens.len() - prompt.target_start;
        if n == 0 || prompt.target_start == 0 {
            return Err(Error::ContractViolation("prompt has no target positions".into()));
        }
        if objective != Objective::Ntp && ex.collab.len() != n {
            return Err(Error::ContractViolation(format!(
                "{} collaborative distributions for {n} target tokens",
                ex.collab.len()
            )));
        }
        let trace = self.net.forward(params, &prompt.tokens)?;
        // hidden states that predict the target tokens
        let rows = prompt.target_start - 1..prompt.tokens.len() - 1;
        let hsel = &trace.hidden[rows.start * d..rows.end * d];
        let z = self.project(params, hsel, n);
        let mut dz = vec![0.0; n * v];
        let mut total = 0.0;
        for j in 0..n {
            let gold = prompt.tokens[prompt.target_start + j];
            let zj = &z[j * v..(j + 1) * v];
            let gj = &mut dz[j * v..(j + 1) * v];
            let loss = match objective {
                Objective::Ntp => ntp_position(gold as TokenId, zj, gj),
                Objective::SoftNtp => {
                    let label = make_soft_label(gold as TokenId, &ex.collab[j], alpha, v)?;
                    soft_ntp_position(&label.probs, zj, gj, None).loss
                }
                Objective::AuxKl => {
                    let label = make_soft_label(gold as TokenId, &ex.collab[j], alpha, v)?;
                    aux_kl_position(&label.probs, zj, gj).0
                }
            };
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { batch: 0, position: j });
            }
            total += loss;
        }
        let mut dh = vec![0.0; n * d];
        matmul(&mut dh, &dz, self.out_span().of(params), n, v, d, false, false, false);
        matmul(self.out_span().of_mut(g), &dz, hsel, v, n, d, true, false, true);
        let mut d_hidden = vec![0.0; trace.hidden.len()];
        d_hidden[rows.start * d..rows.end * d].copy_from_slice(&dh);
        self.net.backward(params, &trace, &d_hidden, g);
        Ok(total)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cfg = LmCheckpointConfig {
            config: self.config.clone(),
            catalog_vocab: self.catalog_vocab,
        };
        checkpoint::save(path, CHECKPOINT_KIND, &cfg, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (cfg, params): (LmCheckpointConfig, Vec<f64>) = checkpoint::load(path, CHECKPOINT_KIND)?;
        let mut m = DecoderModel::new(cfg.catalog_vocab, cfg.config)?;
        if params.len() != m.params.len() {
            return Err(Error::format("lm checkpoint", "parameter count does not match config"));
        }
        m.params = params;
        Ok(m)
    }
}

/// Validation summary handed back to the training loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationMetrics {
    #[serde(rename = "val_HR@5")]
    pub hr_at_5: f64,
    #[serde(rename = "val_NDCG@5")]
    pub ndcg_at_5: f64,
    #[serde(rename = "CC")]
    pub cc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(flatten)]
    pub validation: Option<ValidationMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Mean per-example loss of every optimizer step.
    pub step_losses: Vec<f64>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub best_validation: Option<ValidationMetrics>,
    pub stopped_early: bool,
}

pub type Validator<'a> = dyn FnMut(&DecoderModel) -> Result<ValidationMetrics> + 'a;

/// Mini-batch training with linear learning-rate decay. With a validator,
/// evaluates every `eval_every` epochs, stops after `patience` evaluations
/// without a better HR@5 and restores the best parameters.
pub fn train_lm(
    model: &mut DecoderModel,
    examples: &[LmExample],
    objective: Objective,
    alpha: f64,
    mut validate: Option<&mut Validator<'_>>,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::NoTrainingData);
    }
    check_alpha(alpha)?;
    let cfg = model.config.clone();
    let batch_size = cfg.batch_size.max(1);
    let n_batches = examples.len().div_ceil(batch_size);
    let total_steps = (n_batches * cfg.max_epochs).max(1);
    let mut opt = Adam::new(model.params.len(), cfg.weight_decay);
    let mut rng = stream(cfg.seed, "lm-train");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        best_validation: None,
        stopped_early: false,
    };
    let mut best_params: Option<Vec<f64>> = None;
    let mut stale = 0;
    let mut step = 0usize;
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&LmExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let params = &model.params;
            let m = &*model;
            let (mut g, loss) = batch_gradient(params.len(), &batch, |ex, g| {
                m.example_loss(params, ex, objective, alpha, g).map_err(|e| match e {
                    Error::NonFiniteLoss { position, .. } => Error::NonFiniteLoss {
                        batch: (epoch - 1) * n_batches + b,
                        position,
                    },
                    e => e,
                })
            })?;
            let scale = 1.0 / batch.len() as f64;
            g.iter_mut().for_each(|v| *v *= scale);
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut g, cfg.clip_norm);
            }
            let lr = cfg.lr * (1.0 - step as f64 / total_steps as f64);
            opt.step(&mut model.params, &g, lr);
            step += 1;
            report.step_losses.push(loss * scale);
            epoch_loss += loss;
        }
        let train_loss = epoch_loss / examples.len() as f64;
        let mut record = EpochRecord {
            epoch,
            train_loss,
            validation: None,
        };
        let due = cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs);
        if let (Some(v), true) = (validate.as_deref_mut(), due) {
            let metrics = v(model)?;
            record.validation = Some(metrics);
            let improved = report.best_validation.is_none_or(|b| metrics.hr_at_5 > b.hr_at_5);
            if improved {
                report.best_validation = Some(metrics);
                report.best_epoch = epoch;
                best_params = Some(model.params.clone());
                stale = 0;
            } else {
                stale += 1;
            }
        }
        log::info!(
            "{}",
            serde_json::to_string(&record).unwrap_or_else(|_| format!("epoch {epoch}"))
        );
        report.epochs.push(record);
        if stale >= cfg.patience.max(1) && report.best_validation.is_some() {
            report.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    match best_params {
        Some(p) => model.params = p,
        None => report.best_epoch = report.epochs.len(),
    }
    Ok(report)
}

/// `exp` of the mean masked NTP loss per target token.
pub fn perplexity(model: &DecoderModel, prompts: &[PromptEncoding]) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::NoTrainingData);
    }
    let (loss, count) = prompt_ntp_losses(model, prompts)?
        .iter()
        .fold((0.0, 0usize), |(s, c), l| (s + l.iter().sum::<f64>(), c + l.len()));
    Ok((loss / count as f64).exp())
}

/// Per-position NTP losses of each prompt's target tokens.
pub fn prompt_ntp_losses(model: &DecoderModel, prompts: &[PromptEncoding]) -> Result<Vec<Vec<f64>>> {
    let v = model.vocab_size();
    prompts
        .iter()
        .map(|p| {
            let logits = model.forward_logits(&p.tokens)?;
            let mut scratch = vec![0.0; v];
            Ok((p.target_start..p.tokens.len())
                .map(|pos| ntp_position(p.tokens[pos] as TokenId, &logits[pos - 1], &mut scratch))
                .collect())
        })
        .collect()
}

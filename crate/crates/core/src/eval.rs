//! Trie-constrained beam search and ranking metrics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, ItemIdx, NodeId, PrefixTrie, TokenId};
use crate::cf::CfBackend;
use crate::data::Case;
use crate::error::{Error, Result};
use crate::lm::{encode_context, DecoderModel, ValidationMetrics};

/// A partial decoding: its tokens, trie node and summed log-probability.
#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    pub tokens: Vec<TokenId>,
    pub node: NodeId,
    pub logp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub item: ItemIdx,
    pub tokens: Vec<TokenId>,
    pub logp: f64,
}

/// Completed items by decreasing log-probability, ties by item index.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn items(&self) -> Vec<ItemIdx> {
        self.entries.iter().map(|e| e.item).collect()
    }

    pub fn top1(&self) -> Option<ItemIdx> {
        self.entries.first().map(|e| e.item)
    }

    /// 1-based rank of `item`.
    pub fn rank_of(&self, item: ItemIdx) -> Option<usize> {
        self.entries.iter().position(|e| e.item == item).map(|p| p + 1)
    }
}

/// Source of next-token logits for a decoding prefix.
pub trait NextTokenScorer {
    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>>;
}

/// Decoder with its context already encoded.
pub struct PromptScorer<'a> {
    model: &'a DecoderModel,
    cache: crate::nn::KvCache,
}

impl<'a> PromptScorer<'a> {
    pub fn new(model: &'a DecoderModel, context: &[usize]) -> Result<Self> {
        Ok(PromptScorer {
            model,
            cache: model.encode(context)?,
        })
    }
}

impl NextTokenScorer for PromptScorer<'_> {
    fn next_logits(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        let suffix: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
        self.model.next_logits(&self.cache, &suffix)
    }
}

/// Log-softmax of `z` restricted to the node's outgoing tokens.
pub fn masked_log_probs(z: &[f64], trie: &PrefixTrie, node: NodeId) -> Vec<(TokenId, NodeId, f64)> {
    let kids = trie.node(node).children();
    let m = kids.iter().map(|&(t, _)| z[t as usize]).fold(f64::NEG_INFINITY, f64::max);
    let lse = m + kids.iter().map(|&(t, _)| (z[t as usize] - m).exp()).sum::<f64>().ln();
    kids.iter().map(|&(t, c)| (t, c, z[t as usize] - lse)).collect()
}

fn better(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search whose every step is masked to the trie. Completed items are
/// ranked by summed log-probability without length normalization.
pub fn constrained_beam_search<S: NextTokenScorer + ?Sized>(
    scorer: &S,
    catalog: &Catalog,
    beam_width: usize,
    k: usize,
) -> Result<RankedList> {
    if beam_width < k || beam_width == 0 {
        return Err(Error::InvalidConfig(format!("beam width {beam_width} below k = {k}")));
    }
    let trie = catalog.trie();
    let eos = catalog.vocab().eos_id();
    if catalog.is_empty() {
        return Ok(RankedList::default());
    }
    let mut beams = vec![Beam {
        tokens: Vec::new(),
        node: PrefixTrie::ROOT,
        logp: 0.0,
    }];
    let mut done: Vec<RankedEntry> = Vec::new();
    while !beams.is_empty() {
        let mut next: Vec<Beam> = Vec::new();
        for b in &beams {
            let z = scorer.next_logits(&b.tokens)?;
            for (t, child, lp) in masked_log_probs(&z, trie, b.node) {
                let mut tokens = b.tokens.clone();
                tokens.push(t);
                let logp = b.logp + lp;
                if t == eos {
                    // duplicate titles share a leaf; it holds sorted indices
                    let item = trie.node(child).items()[0];
                    done.push(RankedEntry { item, tokens, logp });
                } else {
                    next.push(Beam { tokens, node: child, logp });
                }
            }
        }
        next.sort_by(|a, b| better((a.logp, &a.tokens), (b.logp, &b.tokens)));
        next.truncate(beam_width);
        beams = next;
        // log-probabilities only fall, so no live beam can enter the top k
        if done.len() >= k && !beams.is_empty() {
            let mut scores: Vec<f64> = done.iter().map(|e| e.logp).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            if beams[0].logp < scores[k - 1] {
                break;
            }
        }
    }
    done.sort_by(|a, b| b.logp.total_cmp(&a.logp).then(a.item.cmp(&b.item)));
    done.truncate(k);
    Ok(RankedList { entries: done })
}

/// Masked log-probability of each item's full token sequence.
pub fn exhaustive_scores<S: NextTokenScorer + ?Sized>(scorer: &S, catalog: &Catalog) -> Result<Vec<f64>> {
    let trie = catalog.trie();
    (0..catalog.len())
        .map(|i| {
            let toks = catalog.tokens(ItemIdx(i as u32));
            let mut node = PrefixTrie::ROOT;
            let mut total = 0.0;
            for j in 0..toks.len() {
                let z = scorer.next_logits(&toks[..j])?;
                let (_, child, lp) = masked_log_probs(&z, trie, node)
                    .into_iter()
                    .find(|&(t, _, _)| t == toks[j])
                    .expect("item path exists in trie");
                total += lp;
                node = child;
            }
            Ok(total)
        })
        .collect()
}

pub fn hit_ratio(ranked: &[ItemIdx], gold: ItemIdx, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == gold) {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg(ranked: &[ItemIdx], gold: ItemIdx, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == gold) {
        Some(p) => 1.0 / ((p + 2) as f64).log2(),
        None => 0.0,
    }
}

pub fn collaborative_consistency(lm_top1: &[ItemIdx], cf_top1: &[ItemIdx]) -> Result<f64> {
    if lm_top1.len() != cf_top1.len() {
        return Err(Error::ContractViolation(format!(
            "{} generated top-1 items but {} CF top-1 items",
            lm_top1.len(),
            cf_top1.len()
        )));
    }
    if lm_top1.is_empty() {
        return Ok(0.0);
    }
    let same = lm_top1.iter().zip(cf_top1).filter(|(a, b)| a == b).count();
    Ok(same as f64 / lm_top1.len() as f64)
}

/// Mean HR@k and NDCG@k over cases, summed in case order.
pub fn mean_metrics(ranked: &[Vec<ItemIdx>], gold: &[ItemIdx], k: usize) -> (f64, f64) {
    let n = ranked.len().max(1) as f64;
    let (mut hr, mut nd) = (0.0, 0.0);
    for (r, &g) in ranked.iter().zip(gold) {
        hr += hit_ratio(r, g, k);
        nd += ndcg(r, g, k);
    }
    (hr / n, nd / n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beam_width: 20,
            ks: vec![5, 10],
        }
    }
}

impl EvalConfig {
    pub fn k_max(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseTrace {
    pub user: String,
    pub timestamp: i64,
    pub target: String,
    pub ranked: Vec<(String, f64)>,
    pub rank: Option<usize>,
    pub cf_top1: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `HR@k` and `NDCG@k` for every configured k.
    #[serde(flatten)]
    pub metrics: BTreeMap<String, f64>,
    #[serde(rename = "CC")]
    pub cc: Option<f64>,
    pub n_cases: usize,
    /// Generated items whose tokens are not exactly a catalog title.
    pub invalid_generations: usize,
    pub generations: usize,
    pub config_hash: String,
}

impl EvalReport {
    pub fn hr(&self, k: usize) -> f64 {
        self.metrics.get(&format!("HR@{k}")).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg(&self, k: usize) -> f64 {
        self.metrics.get(&format!("NDCG@{k}")).copied().unwrap_or(f64::NAN)
    }

    pub fn validation(&self) -> ValidationMetrics {
        ValidationMetrics {
            hr_at_5: self.hr(5),
            ndcg_at_5: self.ndcg(5),
            cc: self.cc.unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: EvalReport,
    pub traces: Vec<CaseTrace>,
    pub ranked: Vec<RankedList>,
}

/// Generates a ranked list for every case and aggregates the metrics. CC is
/// reported when a CF model is given.
pub fn evaluate(
    model: &DecoderModel,
    cf: Option<&dyn CfBackend>,
    cases: &[Case],
    catalog: &Catalog,
    cfg: &EvalConfig,
    config_hash: &str,
) -> Result<Evaluation> {
    let k_max = cfg.k_max();
    let per_case: Vec<(RankedList, Option<ItemIdx>)> = cases
        .par_iter()
        .map(|c| {
            let context = encode_context(&c.history, catalog, model.config.max_len)?;
            let scorer = PromptScorer::new(model, &context)?;
            let ranked = constrained_beam_search(&scorer, catalog, cfg.beam_width, k_max)?;
            let cf_top = match cf {
                Some(b) => Some(b.user_logits(&c.history)?.argmax()),
                None => None,
            };
            Ok((ranked, cf_top))
        })
        .collect::<Result<_>>()?;

    let gold: Vec<ItemIdx> = cases.iter().map(|c| c.target).collect();
    let lists: Vec<Vec<ItemIdx>> = per_case.iter().map(|(r, _)| r.items()).collect();
    let mut metrics = BTreeMap::new();
    for &k in &cfg.ks {
        let (hr, nd) = mean_metrics(&lists, &gold, k);
        metrics.insert(format!("HR@{k}"), hr);
        metrics.insert(format!("NDCG@{k}"), nd);
    }
    let mut invalid = 0;
    let mut generations = 0;
    for (r, _) in &per_case {
        for e in &r.entries {
            generations += 1;
            if catalog.resolve(&e.tokens) != Some(e.item) || catalog.tokens(e.item) != e.tokens.as_slice() {
                invalid += 1;
            }
        }
    }
    let cc = if cf.is_some() {
        // an empty list only happens on an empty catalog; count it as a miss
        let lm: Vec<ItemIdx> = per_case
            .iter()
            .map(|(r, _)| r.top1().unwrap_or(ItemIdx(u32::MAX)))
            .collect();
        let cft: Vec<ItemIdx> = per_case.iter().map(|(_, c)| c.expect("cf given")).collect();
        Some(collaborative_consistency(&lm, &cft)?)
    } else {
        None
    };
    let id = |i: ItemIdx| catalog.item(i).id.clone();
    let traces = cases
        .iter()
        .zip(&per_case)
        .map(|(c, (r, cf_top))| CaseTrace {
            user: c.user.clone(),
            timestamp: c.timestamp,
            target: id(c.target),
            ranked: r.entries.iter().map(|e| (id(e.item), e.logp)).collect(),
            rank: r.rank_of(c.target),
            cf_top1: cf_top.map(id),
        })
        .collect();
    Ok(Evaluation {
        report: EvalReport {
            metrics,
            cc,
            n_cases: cases.len(),
            invalid_generations: invalid,
            generations,
            config_hash: config_hash.to_owned(),
        },
        traces,
        ranked: per_case.into_iter().map(|(r, _)| r).collect(),
    })
}

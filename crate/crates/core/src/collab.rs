//! Projection of item-level CF logits onto next-token distributions.
//!
//! At a decoding prefix the candidate items are the trie node's item set.
//! Their logits are softmax-normalized over that set only, and the resulting
//! item probabilities are summed per next token.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::catalog::{Catalog, ItemIdx, ItemTokenization, NodeId, PrefixTrie, TokenId, Vocabulary};
use crate::error::{Error, Result};

/// Access to an item's token sequence.
pub trait ItemTokens {
    fn item_tokens(&self, item: ItemIdx) -> Option<&[TokenId]>;
}

impl ItemTokens for Catalog {
    fn item_tokens(&self, item: ItemIdx) -> Option<&[TokenId]> {
        (item.index() < self.len()).then(|| self.tokens(item))
    }
}

impl ItemTokens for [ItemTokenization] {
    fn item_tokens(&self, item: ItemIdx) -> Option<&[TokenId]> {
        self.iter()
            .find(|t| t.item == item)
            .map(|t| t.tokens.as_slice())
    }
}

/// Next-token distribution at one decoding position. An empty `probs`
/// marks an off-catalog prefix (dead branch).
#[derive(Clone, Debug, PartialEq)]
pub struct TokenDistribution {
    /// 1-based position of the token being predicted.
    pub position: usize,
    pub prefix: Vec<TokenId>,
    /// Sorted by token id; every probability is positive.
    pub probs: Vec<(TokenId, f64)>,
}

impl TokenDistribution {
    pub fn empty(prefix: &[TokenId]) -> Self {
        TokenDistribution {
            position: prefix.len() + 1,
            prefix: prefix.to_vec(),
            probs: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs
            .binary_search_by_key(&token, |&(t, _)| t)
            .map(|k| self.probs[k].1)
            .unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().map(|&(_, p)| p).sum()
    }

    pub fn support(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.probs.iter().map(|&(t, _)| t)
    }
}

/// Softmax over the candidates' logits, computed with max subtraction.
pub fn normalize_candidates(z: &[f64], candidates: &[ItemIdx]) -> Result<Vec<(ItemIdx, f64)>> {
    normalize_candidates_tempered(z, candidates, 1.0)
}

/// Softmax of `z / temperature` restricted to `candidates`.
pub fn normalize_candidates_tempered(
    z: &[f64],
    candidates: &[ItemIdx],
    temperature: f64,
) -> Result<Vec<(ItemIdx, f64)>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logit = |i: ItemIdx| -> Result<f64> {
        z.get(i.index()).map(|&v| v / temperature).ok_or_else(|| {
            Error::ContractViolation(format!("item {} outside logit vector of {}", i.0, z.len()))
        })
    };
    let mut max = f64::NEG_INFINITY;
    for &c in candidates {
        max = max.max(logit(c)?);
    }
    let mut out = Vec::with_capacity(candidates.len());
    let mut sum = 0.0;
    for &c in candidates {
        let e = (logit(c)? - max).exp();
        sum += e;
        out.push((c, e));
    }
    for (_, p) in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Sums item probabilities onto each item's token at 1-based `position`.
pub fn aggregate_to_tokens<T: ItemTokens + ?Sized>(
    pi: &[(ItemIdx, f64)],
    items: &T,
    position: usize,
    prefix: &[TokenId],
) -> Result<TokenDistribution> {
    if position == 0 {
        return Err(Error::ContractViolation("positions are 1-based".into()));
    }
    let mut acc: BTreeMap<TokenId, f64> = BTreeMap::new();
    for &(item, p) in pi {
        let toks = items
            .item_tokens(item)
            .ok_or_else(|| Error::UnknownItem(item.0.to_string()))?;
        let tok = *toks.get(position - 1).ok_or_else(|| {
            Error::ContractViolation(format!(
                "item {} has {} tokens, position {position} requested",
                item.0,
                toks.len()
            ))
        })?;
        *acc.entry(tok).or_insert(0.0) += p;
    }
    Ok(TokenDistribution {
        position,
        prefix: prefix.to_vec(),
        probs: acc.into_iter().filter(|&(_, p)| p > 0.0).collect(),
    })
}

fn distribution_at_node(
    catalog: &Catalog,
    node: NodeId,
    z: &[f64],
    prefix: &[TokenId],
    temperature: f64,
) -> Result<TokenDistribution> {
    let n = catalog.trie().node(node);
    if n.is_leaf() || n.items().is_empty() {
        return Ok(TokenDistribution::empty(prefix));
    }
    let pi = normalize_candidates_tempered(z, n.items(), temperature)?;
    aggregate_to_tokens(&pi, catalog, prefix.len() + 1, prefix)
}

/// Collaborative next-token distribution after `prefix`; flagged-empty when
/// the prefix is off-catalog or already terminated.
pub fn distribution_for_prefix(catalog: &Catalog, z: &[f64], prefix: &[TokenId]) -> Result<TokenDistribution> {
    distribution_for_prefix_tempered(catalog, z, prefix, 1.0)
}

pub fn distribution_for_prefix_tempered(
    catalog: &Catalog,
    z: &[f64],
    prefix: &[TokenId],
    temperature: f64,
) -> Result<TokenDistribution> {
    match catalog.trie().locate(prefix) {
        Some(node) => distribution_at_node(catalog, node, z, prefix, temperature),
        None => Ok(TokenDistribution::empty(prefix)),
    }
}

fn gold_path(catalog: &Catalog, target: ItemIdx) -> Result<(&[TokenId], Vec<NodeId>)> {
    if target.index() >= catalog.len() {
        return Err(Error::UnknownItem(target.0.to_string()));
    }
    let toks = catalog.tokens(target);
    let trie = catalog.trie();
    let mut nodes = Vec::with_capacity(toks.len());
    let mut cur = PrefixTrie::ROOT;
    for &t in toks {
        nodes.push(cur);
        cur = trie
            .child(cur, t)
            .ok_or_else(|| Error::ContractViolation("gold item missing from trie".into()))?;
    }
    Ok((toks, nodes))
}

/// Distributions at every gold prefix of `target`, one per target token.
pub fn precompute_target_distributions(
    catalog: &Catalog,
    z: &[f64],
    target: ItemIdx,
    temperature: f64,
) -> Result<Vec<TokenDistribution>> {
    let (toks, nodes) = gold_path(catalog, target)?;
    nodes
        .iter()
        .enumerate()
        .map(|(j, &node)| distribution_at_node(catalog, node, z, &toks[..j], temperature))
        .collect()
}

/// Uniform distribution over the distinct next tokens along the gold path,
/// the "no collaborative tokenizer" ablation.
pub fn uniform_target_distributions(catalog: &Catalog, target: ItemIdx) -> Result<Vec<TokenDistribution>> {
    let (toks, nodes) = gold_path(catalog, target)?;
    let trie = catalog.trie();
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(j, &node)| {
            let kids = trie.node(node).children();
            let p = 1.0 / kids.len() as f64;
            TokenDistribution {
                position: j + 1,
                prefix: toks[..j].to_vec(),
                probs: kids.iter().map(|&(t, _)| (t, p)).collect(),
            }
        })
        .collect())
}

/// Text dump, one line per position: position, prefix, then `token=prob`
/// pairs in token order.
pub fn debug_dump(dists: &[TokenDistribution], vocab: &Vocabulary) -> String {
    let name = |t: TokenId| vocab.token(t).unwrap_or("<unk>").to_owned();
    let mut s = String::new();
    for d in dists {
        let prefix: Vec<String> = d.prefix.iter().map(|&t| name(t)).collect();
        let probs: Vec<String> = d
            .probs
            .iter()
            .map(|&(t, p)| format!("{}={:.6}", name(t), p))
            .collect();
        let _ = writeln!(s, "{}\t{}\t{}", d.position, prefix.join(" "), probs.join(" "));
    }
    s
}

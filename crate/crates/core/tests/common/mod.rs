//! Generators and brute-force references shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};

use rand::Rng as _;
use tokalign::catalog::TokenId;
use tokalign::eval::NextTokenScorer;
use tokalign::rng::{stream, Rng};
use tokalign::lm::{encode_prompt, LmExample};
use tokalign::loss::{fd_check_coords, FdReport, Objective};
use tokalign::{Catalog, DecoderModel, ItemIdx, LmConfig, RawItem, TokenizerMode};

const WORDS: &[&str] = &[
    "red", "blue", "green", "ball", "kite", "hat", "big", "small", "toy", "car", "box", "lamp", "soft", "hard",
    "mini", "pro", "max", "set", "kit", "pack",
];

/// Catalog of `n` items with titles built from a small pool so prefixes are
/// heavily shared. Word titles carry punctuation and mixed case; char
/// titles are strings over a four-letter alphabet.
pub fn random_catalog(rng: &mut Rng, n: usize, mode: TokenizerMode, unique: bool) -> Catalog {
    let mut seen = std::collections::HashSet::new();
    let mut raw = Vec::with_capacity(n);
    while raw.len() < n {
        let title = match mode {
            TokenizerMode::Word => {
                let len = rng.random_range(1..=4);
                let words: Vec<String> = (0..len)
                    .map(|_| {
                        let w = WORDS[rng.random_range(0..WORDS.len())];
                        if rng.random_bool(0.2) { w.to_uppercase() } else { w.to_owned() }
                    })
                    .collect();
                let sep = if rng.random_bool(0.3) { ", " } else { " " };
                words.join(sep)
            }
            TokenizerMode::Char => {
                let len = rng.random_range(1..=6);
                (0..len).map(|_| ['a', 'b', 'c', 'd'][rng.random_range(0..4)]).collect()
            }
        };
        let key = reference_split(&title, mode);
        if unique && !seen.insert(key) {
            continue;
        }
        raw.push(RawItem {
            item_id: format!("item{:05}", raw.len()),
            title,
        });
    }
    Catalog::from_raw(raw, mode).expect("generated titles are non-empty")
}

/// Tokenization written independently of the library: lowercase alphanumeric
/// runs for words, characters of the trimmed title otherwise.
pub fn reference_split(title: &str, mode: TokenizerMode) -> Vec<String> {
    match mode {
        TokenizerMode::Word => {
            let mut out = Vec::new();
            let mut cur = String::new();
            for c in title.chars() {
                if c.is_alphanumeric() {
                    cur.extend(c.to_lowercase());
                } else if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
            }
            if !cur.is_empty() {
                out.push(cur);
            }
            out
        }
        TokenizerMode::Char => title.trim().chars().map(String::from).collect(),
    }
}

/// Each item's title as strings, ending with the sentinel string.
pub fn reference_sequences(catalog: &Catalog) -> Vec<Vec<String>> {
    let eos = catalog.vocab().token(catalog.vocab().eos_id()).unwrap().to_owned();
    catalog
        .items()
        .iter()
        .map(|it| {
            let mut s = reference_split(&it.title, catalog.vocab().mode());
            s.push(eos.clone());
            s
        })
        .collect()
}

pub fn to_strings(catalog: &Catalog, prefix: &[TokenId]) -> Vec<String> {
    prefix.iter().map(|&t| catalog.vocab().token(t).unwrap().to_owned()).collect()
}

/// Items whose string sequence starts with `prefix`, by linear scan.
pub fn brute_candidates(seqs: &[Vec<String>], prefix: &[String]) -> Vec<ItemIdx> {
    seqs.iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= prefix.len() && s[..prefix.len()] == *prefix)
        .map(|(i, _)| ItemIdx(i as u32))
        .collect()
}

/// Every prefix of every item sequence, including the empty and full ones.
pub fn reachable_prefixes(catalog: &Catalog) -> Vec<Vec<TokenId>> {
    let mut set = std::collections::BTreeSet::new();
    for it in catalog.items() {
        for j in 0..=it.tokens.len() {
            set.insert(it.tokens[..j].to_vec());
        }
    }
    set.into_iter().collect()
}

/// The three-step projection done naively: filter items by prefix, softmax
/// of the tempered logits with a plain exp-sum, sum onto next tokens.
pub fn brute_distribution(catalog: &Catalog, z: &[f64], prefix: &[TokenId], temperature: f64) -> BTreeMap<TokenId, f64> {
    let cands: Vec<usize> = (0..catalog.len())
        .filter(|&i| {
            let t = catalog.tokens(ItemIdx(i as u32));
            t.len() > prefix.len() && t[..prefix.len()] == *prefix
        })
        .collect();
    let mut out = BTreeMap::new();
    if cands.is_empty() {
        return out;
    }
    let total: f64 = cands.iter().map(|&i| (z[i] / temperature).exp()).sum();
    for &i in &cands {
        let tok = catalog.tokens(ItemIdx(i as u32))[prefix.len()];
        *out.entry(tok).or_insert(0.0) += (z[i] / temperature).exp() / total;
    }
    out
}

/// Scorer whose logits are a fixed random function of the prefix.
pub struct TableScorer {
    pub vocab: usize,
    pub seed: u64,
    pub scale: f64,
}

impl NextTokenScorer for TableScorer {
    fn next_logits(&self, prefix: &[TokenId]) -> tokalign::Result<Vec<f64>> {
        let mut name = String::from("table");
        for t in prefix {
            name.push_str(&format!(":{t}"));
        }
        let mut rng = stream(self.seed, &name);
        Ok((0..self.vocab).map(|_| self.scale * (rng.random::<f64>() - 0.5)).collect())
    }
}

/// Exhaustive ranking: every item's masked log-probability computed from
/// the scorer directly, duplicates resolved to the smallest index, then
/// sorted by score and index.
pub fn exhaustive_ranking<S: NextTokenScorer>(scorer: &S, catalog: &Catalog) -> Vec<(ItemIdx, f64)> {
    let mut by_seq: HashMap<Vec<TokenId>, (ItemIdx, f64)> = HashMap::new();
    for i in 0..catalog.len() {
        let toks = catalog.tokens(ItemIdx(i as u32));
        let mut total = 0.0;
        for j in 0..toks.len() {
            let z = scorer.next_logits(&toks[..j]).unwrap();
            let allowed: std::collections::BTreeSet<TokenId> = (0..catalog.len())
                .map(|k| catalog.tokens(ItemIdx(k as u32)))
                .filter(|t| t.len() > j && t[..j] == toks[..j])
                .map(|t| t[j])
                .collect();
            let norm: f64 = allowed.iter().map(|&t| z[t as usize].exp()).sum();
            total += z[toks[j] as usize] - norm.ln();
        }
        by_seq.entry(toks.to_vec()).or_insert((ItemIdx(i as u32), total));
    }
    let mut out: Vec<(ItemIdx, f64)> = by_seq.into_values().collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// HR@k and NDCG@k for one case from the gold item's 1-based rank.
pub fn hand_metrics(rank: Option<usize>, k: usize) -> (f64, f64) {
    match rank {
        Some(r) if r <= k => (1.0, 1.0 / ((r + 1) as f64).log2()),
        _ => (0.0, 0.0),
    }
}

pub fn micro_catalog() -> Catalog {
    // 17 distinct words plus the sentinel: 20 decoder tokens with BOS and SEP
    let titles = [
        "alpha beta", "alpha gamma", "delta", "epsilon zeta eta", "theta iota", "kappa lambda", "mu nu xi",
        "omicron pi", "pi sigma",
    ];
    let raw = titles
        .iter()
        .enumerate()
        .map(|(i, t)| RawItem {
            item_id: format!("m{i}"),
            title: t.to_string(),
        })
        .collect();
    Catalog::from_raw(raw, TokenizerMode::Word).unwrap()
}

pub fn micro_model(cat: &Catalog, seed: u64) -> DecoderModel {
    DecoderModel::new(
        cat.vocab().len(),
        LmConfig {
            d_model: 8,
            n_blocks: 1,
            n_heads: 2,
            max_len: 48,
            init_std: 0.3,
            seed,
            ..LmConfig::default()
        },
    )
    .unwrap()
}

pub fn micro_example(cat: &Catalog, objective: Objective) -> LmExample {
    let prompt = encode_prompt(&[ItemIdx(0), ItemIdx(3)], ItemIdx(6), cat, 48).unwrap();
    let collab = match objective {
        Objective::Ntp => Vec::new(),
        _ => {
            let z: Vec<f64> = (0..cat.len()).map(|i| (i as f64 * 0.7).sin()).collect();
            tokalign::collab::precompute_target_distributions(cat, &z, ItemIdx(6), 1.0).unwrap()
        }
    };
    LmExample { prompt, collab }
}

/// Central differences of one example's loss on 300 random parameter
/// coordinates of the micro decoder.
pub fn micro_fd(objective: Objective) -> FdReport {
    let cat = micro_catalog();
    let m = micro_model(&cat, 1);
    let ex = micro_example(&cat, objective);
    let p = m.params().to_vec();
    let mut g = vec![0.0; p.len()];
    m.example_loss(&p, &ex, objective, 0.5, &mut g).unwrap();
    let f = |q: &[f64]| {
        let mut scratch = vec![0.0; q.len()];
        m.example_loss(q, &ex, objective, 0.5, &mut scratch).unwrap()
    };
    let mut rng = stream(11, "coords");
    let coords = rand::seq::index::sample(&mut rng, p.len(), 300.min(p.len())).into_vec();
    fd_check_coords(f, &p, &g, 1e-5, coords).unwrap()
}

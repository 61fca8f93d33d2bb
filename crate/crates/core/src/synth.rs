//! Planted latent-factor generator for interaction logs with item titles.
//!
//! Items are grouped into latent clusters; a user's next item is drawn from
//! a softmax over taste affinity, affinity to the previous item, and item
//! popularity, with a small uniform exploration rate. Titles start with the
//! cluster's category word, followed by an item word and sometimes a
//! modifier, so the title trie mirrors the latent structure.

use std::collections::HashSet;

use rand::Rng as _;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::catalog::RawItem;
use crate::data::RawInteraction;
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_clusters: usize,
    pub latent_dim: usize,
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Clusters mixed into each user's taste vector.
    pub user_clusters: usize,
    pub taste_weight: f64,
    pub transition_weight: f64,
    /// Standard deviation of log-popularity.
    pub popularity_std: f64,
    pub item_noise: f64,
    pub user_noise: f64,
    /// Probability of a uniformly random pick.
    pub explore: f64,
    /// Probability that a title carries a trailing modifier word.
    pub modifier_rate: f64,
    pub horizon: i64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            n_items: 500,
            n_clusters: 25,
            latent_dim: 8,
            min_interactions: 12,
            max_interactions: 18,
            user_clusters: 2,
            taste_weight: 6.0,
            transition_weight: 3.0,
            popularity_std: 0.8,
            item_noise: 0.5,
            user_noise: 0.3,
            explore: 0.05,
            modifier_rate: 0.3,
            horizon: 1_000_000,
            seed: 2024,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("synth: {m}")));
        if self.n_users == 0 || self.n_items == 0 || self.n_clusters == 0 || self.latent_dim == 0 {
            return bad("sizes must be positive");
        }
        if self.n_clusters > self.n_items {
            return bad("more clusters than items");
        }
        if self.min_interactions == 0 || self.min_interactions > self.max_interactions {
            return bad("interaction range is empty");
        }
        if self.max_interactions > self.n_items {
            return bad("users cannot interact with more distinct items than exist");
        }
        if !(0.0..=1.0).contains(&self.explore) || !(0.0..=1.0).contains(&self.modifier_rate) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.horizon <= 0 {
            return bad("horizon must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub interactions: Vec<RawInteraction>,
    pub items: Vec<RawItem>,
}

pub fn item_id(i: usize) -> String {
    format!("i{i:05}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:05}")
}

fn unit_gaussian(dim: usize, rng: &mut Rng) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Distinct pronounceable pseudo-words.
fn words(n: usize, syllables: usize, taken: &mut HashSet<String>, rng: &mut Rng) -> Vec<String> {
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.random_range(0..ONSETS.len())],
                    VOWELS[rng.random_range(0..VOWELS.len())]
                )
            })
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn sample_softmax(scores: &[f64], rng: &mut Rng) -> usize {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scores.iter().map(|&s| (s - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &x) in w.iter().enumerate() {
        if x > 0.0 {
            if r < x {
                return i;
            }
            r -= x;
        }
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "synth");
    let k = cfg.latent_dim;

    let centers: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| {
            let mut c = unit_gaussian(k, &mut rng);
            normalize(&mut c);
            c
        })
        .collect();
    let mut cluster_of: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_clusters).collect();
    cluster_of.shuffle(&mut rng);
    let factors: Vec<Vec<f64>> = cluster_of
        .iter()
        .map(|&c| {
            let noise = unit_gaussian(k, &mut rng);
            let mut v: Vec<f64> = centers[c]
                .iter()
                .zip(&noise)
                .map(|(a, b)| a + cfg.item_noise * b / (k as f64).sqrt())
                .collect();
            normalize(&mut v);
            v
        })
        .collect();
    let log_pop: Vec<f64> = (0..cfg.n_items)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.popularity_std * z
        })
        .collect();

    // titles
    let mut taken = HashSet::new();
    let categories = words(cfg.n_clusters, 3, &mut taken, &mut rng);
    let per_cluster = cfg.n_items.div_ceil(cfg.n_clusters);
    let item_words = words(per_cluster * 2, 2, &mut taken, &mut rng);
    let modifiers = words(8, 2, &mut taken, &mut rng);
    let mut used: Vec<HashSet<usize>> = vec![HashSet::new(); cfg.n_clusters];
    let items: Vec<RawItem> = (0..cfg.n_items)
        .map(|i| {
            let c = cluster_of[i];
            let w = loop {
                let w = rng.random_range(0..item_words.len());
                if used[c].insert(w) {
                    break w;
                }
            };
            let mut title = format!("{} {}", categories[c], item_words[w]);
            if rng.random::<f64>() < cfg.modifier_rate {
                title.push(' ');
                title.push_str(&modifiers[rng.random_range(0..modifiers.len())]);
            }
            RawItem {
                item_id: item_id(i),
                title,
            }
        })
        .collect();

    let mut interactions = Vec::new();
    for u in 0..cfg.n_users {
        let mut clusters: Vec<usize> = (0..cfg.n_clusters).collect();
        clusters.shuffle(&mut rng);
        let noise = unit_gaussian(k, &mut rng);
        let mut taste: Vec<f64> = (0..k)
            .map(|d| {
                clusters[..cfg.user_clusters.clamp(1, cfg.n_clusters)]
                    .iter()
                    .map(|&c| centers[c][d])
                    .sum::<f64>()
                    + cfg.user_noise * noise[d]
            })
            .collect();
        normalize(&mut taste);

        let n = rng.random_range(cfg.min_interactions..=cfg.max_interactions);
        let mut stamps: Vec<i64> = (0..n).map(|_| rng.random_range(0..cfg.horizon)).collect();
        stamps.sort_unstable();
        let mut consumed = vec![false; cfg.n_items];
        let mut prev: Option<usize> = None;
        for &ts in &stamps {
            let pick = if rng.random::<f64>() < cfg.explore {
                loop {
                    let i = rng.random_range(0..cfg.n_items);
                    if !consumed[i] {
                        break i;
                    }
                }
            } else {
                let scores: Vec<f64> = (0..cfg.n_items)
                    .map(|i| {
                        if consumed[i] {
                            return f64::NEG_INFINITY;
                        }
                        let mut s = cfg.taste_weight * dot(&taste, &factors[i]) + log_pop[i];
                        if let Some(p) = prev {
                            s += cfg.transition_weight * dot(&factors[p], &factors[i]);
                        }
                        s
                    })
                    .collect();
                sample_softmax(&scores, &mut rng)
            };
            consumed[pick] = true;
            prev = Some(pick);
            interactions.push(RawInteraction {
                user_id: user_id(u),
                item_id: item_id(pick),
                timestamp: ts,
            });
        }
    }
    Ok(SynthData {
        interactions,
        items,
    })
}

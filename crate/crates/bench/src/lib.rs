//! Fixtures for the criterion benchmarks.

use rand::Rng as _;
use tokalign::catalog::TokenId;
use tokalign::eval::NextTokenScorer;
use tokalign::loss::{make_soft_label, SoftLabel};
use tokalign::rng::stream;
use tokalign::synth::{generate, SynthConfig};
use tokalign::{distribution_for_prefix, Catalog, ItemIdx, TokenizerMode};

/// Catalog of the pinned synthetic benchmark's items.
pub fn catalog() -> Catalog {
    let data = generate(&SynthConfig::default()).expect("default synth config is valid");
    Catalog::from_raw(data.items, TokenizerMode::Word).expect("synthetic titles are non-empty")
}

pub fn random_logits(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream(seed, "bench-logits");
    (0..n).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect()
}

/// Soft labels and logits along one item's title, as built for training.
pub fn labels_for(catalog: &Catalog, item: ItemIdx, alpha: f64) -> (Vec<SoftLabel>, Vec<Vec<f64>>) {
    let z = random_logits(catalog.len(), 1);
    let v = catalog.vocab().len();
    let toks = catalog.tokens(item);
    let labels = (0..toks.len())
        .map(|j| {
            let d = distribution_for_prefix(catalog, &z, &toks[..j]).expect("gold prefix");
            make_soft_label(toks[j], &d, alpha, v).expect("valid label")
        })
        .collect();
    let logits = (0..toks.len()).map(|j| random_logits(v, 10 + j as u64)).collect();
    (labels, logits)
}

/// Next-token logits that depend only on the last token, cheap enough that
/// search overhead dominates.
pub struct BigramScorer {
    table: Vec<Vec<f64>>,
}

impl BigramScorer {
    pub fn new(vocab: usize) -> Self {
        BigramScorer {
            table: (0..=vocab).map(|t| random_logits(vocab, 100 + t as u64)).collect(),
        }
    }
}

impl NextTokenScorer for BigramScorer {
    fn next_logits(&self, prefix: &[TokenId]) -> tokalign::Result<Vec<f64>> {
        let row = prefix.last().map_or(self.table.len() - 1, |&t| t as usize);
        Ok(self.table[row].clone())
    }
}

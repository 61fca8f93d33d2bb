use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tokalign::catalog::PrefixTrie;
use tokalign::eval::constrained_beam_search;
use tokalign::loss::{aux_kl_loss, soft_ntp_loss};
use tokalign::{distribution_for_prefix, ItemIdx};
use tokalign_bench::{catalog, labels_for, random_logits, BigramScorer};

fn trie(c: &mut Criterion) {
    let cat = catalog();
    let toks = cat.tokenizations();
    c.bench_function("trie_build_500_items", |b| b.iter(|| PrefixTrie::build(black_box(&toks))));
}

fn token_distribution(c: &mut Criterion) {
    let cat = catalog();
    let z = random_logits(cat.len(), 0);
    let item = cat.tokens(ItemIdx(7)).to_vec();
    let mut g = c.benchmark_group("distribution_for_prefix");
    for depth in 0..item.len().min(3) {
        g.bench_with_input(BenchmarkId::from_parameter(depth), &depth, |b, &d| {
            b.iter(|| distribution_for_prefix(&cat, black_box(&z), &item[..d]).unwrap())
        });
    }
    g.finish();
}

fn losses(c: &mut Criterion) {
    let cat = catalog();
    let (labels, logits) = labels_for(&cat, ItemIdx(3), 0.4);
    c.bench_function("soft_ntp_loss_and_grad", |b| {
        b.iter(|| soft_ntp_loss(black_box(&labels), black_box(&logits)).unwrap())
    });
    c.bench_function("aux_kl_loss_and_grad", |b| {
        b.iter(|| aux_kl_loss(black_box(&labels), black_box(&logits)).unwrap())
    });
}

fn beam(c: &mut Criterion) {
    let cat = catalog();
    let scorer = BigramScorer::new(cat.vocab().len());
    let mut g = c.benchmark_group("constrained_beam_search");
    for width in [5, 20, 50] {
        g.bench_with_input(BenchmarkId::from_parameter(width), &width, |b, &w| {
            b.iter(|| constrained_beam_search(&scorer, &cat, w, 5).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, trie, token_distribution, losses, beam);
criterion_main!(benches);

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use edgekit::edge::{EdgeScorer, DEFAULT_TAU};
use edgekit::encoder::EncoderConfig;
use edgekit::infer::{decode_cle, IndexEntry};
use edgekit::synthetic::ToyGrammar;
use edgekit::treebank::build_vocab;
use edgekit::{
    ExplainIndex, Model, ModelConfig, ScoringMode, Sentence, Similarity, SupportSummary, Tensor, Treebank,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 100;

fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn support(n: usize, rng: &mut ChaCha8Rng) -> (EdgeScorer, SupportSummary, ExplainIndex) {
    let mut tb = Treebank::new(vec![Sentence::from_triples(&[("w", 0, "a")])]);
    tb.labels = vec!["a".into(), "b".into()];
    let vocab = build_vocab(&tb, 1).unwrap();
    let vectors: Vec<Vec<f64>> = (0..n).map(|_| random_vec(rng, D)).collect();
    let scorer =
        EdgeScorer::from_parts(Similarity::Cos, DEFAULT_TAU, Tensor::zeros(D, D), vec![0.0; D], Tensor::zeros(2, D), "h")
            .unwrap();
    let summary =
        SupportSummary::from_edges(&scorer, vectors.iter().enumerate().map(|(k, v)| (v.as_slice(), Some(k % 2))))
            .unwrap();
    let entries = (0..n)
        .map(|k| IndexEntry {
            sentence: k,
            head: 0,
            dep: 1,
            label: if k % 2 == 0 { "a" } else { "b" }.into(),
            head_form: String::new(),
            dep_form: String::new(),
        })
        .collect();
    let index = ExplainIndex::from_parts("h", D, vectors, entries, &vocab).unwrap();
    (scorer, summary, index)
}

fn scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (scorer, summary, index) = support(10_000, &mut rng);
    let q = random_vec(&mut rng, D);
    let mut g = c.benchmark_group("head_score_10k");
    g.bench_function("fast", |b| {
        b.iter(|| scorer.score_head(black_box(&q), ScoringMode::Instance, Some(&summary)).unwrap())
    });
    g.bench_function("explainable", |b| {
        b.iter(|| index.explicit_head(black_box(&q), Similarity::Cos, DEFAULT_TAU).unwrap())
    });
    g.bench_function("knn_10", |b| b.iter(|| index.knn(black_box(&q), 10, Similarity::Cos, DEFAULT_TAU).unwrap()));
    g.finish();
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = c.benchmark_group("matmul");
    for n in [32usize, 128] {
        let a = Tensor::new(vec![n, n], random_vec(&mut rng, n * n)).unwrap();
        let b = Tensor::new(vec![n, n], random_vec(&mut rng, n * n)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bn, _| bn.iter(|| a.matmul(black_box(&b)).unwrap()));
    }
    g.finish();
}

fn decoding(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = c.benchmark_group("decode_cle");
    for n in [10usize, 40] {
        let scores: Vec<Vec<f64>> = (0..=n)
            .map(|i| {
                (0..=n)
                    .map(|j| if i == 0 || i == j { f64::NEG_INFINITY } else { rng.gen_range(-5.0..5.0) })
                    .collect()
            })
            .collect();
        g.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| b.iter(|| decode_cle(black_box(s), false).unwrap()));
    }
    g.finish();
}

fn features(c: &mut Criterion) {
    let tb = ToyGrammar::default().treebank(50, 1);
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            word_dim: 32,
            lstm_hidden: 32,
            out_dim: 32,
            lstm_layers: 1,
            ..EncoderConfig::default()
        },
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, build_vocab(&tb, 1).unwrap(), 1, None).unwrap();
    let refs: Vec<&Sentence> = tb.sentences.iter().collect();
    c.bench_function("features_50_sentences", |b| b.iter(|| model.features(black_box(&refs)).unwrap()));
}

criterion_group!(benches, scoring, matmul, decoding, features);
criterion_main!(benches);

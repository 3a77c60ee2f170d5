//! Encoder and edge parameters bundled with their vocabulary.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edge::{EdgeParams, EdgeScorer, Similarity, SupportSummary, DEFAULT_TAU};
use crate::encoder::{Encoder, EncoderConfig, TokenFeatures};
use crate::error::{Error, Result};
use crate::infer::ExplainIndex;
use crate::tensor::ParamStore;
use crate::treebank::{Sentence, Treebank, Vocabulary, WordVectors};

/// Sentences per inference batch. Fixed so results do not depend on the
/// thread count.
const FEATURE_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub similarity: Similarity,
    pub tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            similarity: Similarity::Cos,
            tau: DEFAULT_TAU,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub edge: EdgeParams,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64, pretrained: Option<&WordVectors>) -> Result<Self> {
        if config.similarity == Similarity::Cos && config.tau <= 0.0 {
            return Err(Error::Config(format!("τ must be positive for cosine, got {}", config.tau)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &vocab, &mut params, &mut rng, pretrained)?;
        let edge = EdgeParams::new(encoder.config.out_dim, vocab.num_labels(), &mut params, &mut rng);
        let config = ModelConfig {
            encoder: encoder.config.clone(),
            ..config
        };
        Ok(Model {
            config,
            vocab,
            params,
            encoder,
            edge,
        })
    }

    /// Attaches loaded parameters to a configuration.
    pub fn bind(config: ModelConfig, vocab: Vocabulary, params: ParamStore) -> Result<Self> {
        let encoder = Encoder::bind(config.encoder.clone(), &params)?;
        let edge = EdgeParams::bind(&params)?;
        Ok(Model {
            config,
            vocab,
            params,
            encoder,
            edge,
        })
    }

    pub fn param_hash(&self) -> String {
        self.params.hash()
    }

    /// Inference-mode features, computed in parallel over fixed chunks.
    pub fn features(&self, sentences: &[&Sentence]) -> Result<Vec<TokenFeatures>> {
        let parts: Vec<Vec<TokenFeatures>> = sentences
            .par_chunks(FEATURE_CHUNK)
            .map(|c| self.encoder.features(&self.params, &self.vocab, c))
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    pub fn scorer(&self) -> Result<EdgeScorer> {
        EdgeScorer::from_store(&self.params, &self.edge, self.config.similarity, self.config.tau)
    }

    /// Encodes every sentence of `tb` once and sums its gold edges.
    pub fn precompute_support(&self, tb: &Treebank) -> Result<SupportSummary> {
        let refs: Vec<&Sentence> = tb.sentences.iter().collect();
        let feats = self.features(&refs)?;
        SupportSummary::build(&self.scorer()?, &refs, &feats, &self.vocab)
    }

    /// Stores every gold edge of `tb` for explainable inference.
    pub fn precompute_index(&self, tb: &Treebank) -> Result<ExplainIndex> {
        let refs: Vec<&Sentence> = tb.sentences.iter().collect();
        let feats = self.features(&refs)?;
        ExplainIndex::build(&self.scorer()?, &refs, &feats, &self.vocab)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::build_vocab;

    fn tiny() -> (Treebank, Model) {
        let tb = Treebank::new(vec![
            Sentence::from_triples(&[("the", 2, "det"), ("dog", 3, "nsubj"), ("barks", 0, "root")]),
            Sentence::from_triples(&[("a", 2, "det"), ("cat", 0, "root")]),
        ]);
        let vocab = build_vocab(&tb, 1).unwrap();
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                word_dim: 4,
                char_dim: 3,
                char_filters: 5,
                lstm_hidden: 4,
                out_dim: 6,
                ..EncoderConfig::default()
            },
            ..ModelConfig::default()
        };
        let m = Model::new(cfg, vocab, 3, None).unwrap();
        (tb, m)
    }

    #[test]
    fn same_seed_same_parameters() {
        let (_, a) = tiny();
        let (_, b) = tiny();
        assert_eq!(a.param_hash(), b.param_hash());
    }

    #[test]
    fn bind_restores_identical_features() {
        let (tb, m) = tiny();
        let again = Model::bind(m.config.clone(), m.vocab.clone(), m.params.clone()).unwrap();
        let refs: Vec<&Sentence> = tb.sentences.iter().collect();
        assert_eq!(m.features(&refs).unwrap(), again.features(&refs).unwrap());
    }

    #[test]
    fn support_counts_cover_every_gold_edge() {
        let (tb, m) = tiny();
        let s = m.precompute_support(&tb).unwrap();
        assert_eq!(s.head_count, tb.num_tokens());
        assert_eq!(s.label_counts, tb.label_counts());
        assert_eq!(s.param_hash, m.param_hash());
    }
}

//! Query/support mini-batches, the head and label losses, and the training
//! loop with per-epoch dev selection.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::edge::{ScoringMode, Similarity, SupportSummary, DEFAULT_TAU};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::infer::{self, Support};
use crate::model::{Model, ModelConfig};
use crate::tensor::{clip_by_global_norm, io, Adam, Graph, ParamStore, Var};
use crate::treebank::{build_vocab, Sentence, Treebank, Vocabulary, WordVectors};

/// Which of the two independently trained models a run produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Head selection (unlabeled edges).
    Edge,
    /// Label classification on gold edges.
    Label,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge" => Ok(Task::Edge),
            "label" => Ok(Task::Label),
            _ => Err(Error::Config(format!("unknown task {s:?} (edge|label)"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Edge => "edge",
            Task::Label => "label",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    /// Learning-time scoring; inference may use either mode.
    pub scoring: ScoringMode,
    pub similarity: Similarity,
    pub tau: f64,
    /// Query sentences per step (N).
    pub queries: usize,
    /// Support sentences per step for the edge task (M).
    pub support_sentences: usize,
    /// Support edges per label for the label task (U).
    pub support_per_label: usize,
    /// Use every training sentence as support on every step.
    pub full_support: bool,
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub clip: f64,
    /// Overrides `encoder.dropout`.
    pub dropout: f64,
    pub min_freq: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::Edge,
            scoring: ScoringMode::Instance,
            similarity: Similarity::Cos,
            tau: DEFAULT_TAU,
            queries: 32,
            support_sentences: 10,
            support_per_label: 1,
            full_support: false,
            lr: 0.001,
            decay: 0.05,
            epochs: 100,
            clip: 5.0,
            dropout: 0.1,
            min_freq: 2,
            seed: 1,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.queries == 0 || self.support_sentences == 0 || self.support_per_label == 0 {
            return bad("queries, support_sentences and support_per_label must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.lr <= 0.0 || self.decay < 0.0 || self.clip <= 0.0 || self.epochs == 0 {
            return bad("lr and clip must be positive, decay non-negative, epochs at least 1");
        }
        if self.similarity == Similarity::Cos && self.tau <= 0.0 {
            return bad("tau must be positive for cosine similarity");
        }
        if self.min_freq == 0 {
            return bad("min_freq must be at least 1");
        }
        self.model_config().encoder.validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                dropout: self.dropout,
                ..self.encoder.clone()
            },
            similarity: self.similarity,
            tau: self.tau,
        }
    }

    /// Applies one `key=value` override. Dotted keys reach nested fields
    /// (`encoder.lstm_hidden`); values are parsed as JSON, falling back to
    /// a plain string.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut root = serde_json::to_value(&*self)?;
        let mut slot = &mut root;
        for part in key.split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown configuration key {key:?}")))?;
        }
        *slot = if slot.is_string() {
            Value::String(value.to_string())
        } else {
            serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()))
        };
        let next: TrainConfig =
            serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}={value}: {e}")))?;
        next.validate()?;
        *self = next;
        Ok(())
    }
}

/// `η_t = η_0 / (1 + ρ t)`.
pub fn lr_schedule(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 / (1.0 + decay * epoch as f64)
}

/// Query order for one epoch: a shuffled pass split into batches of `n`.
pub fn epoch_batches<R: Rng>(num_sentences: usize, n: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..num_sentences).collect();
    order.shuffle(rng);
    order.chunks(n.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeBatch {
    pub queries: Vec<usize>,
    pub supports: Vec<usize>,
}

/// Draws `m` distinct support sentences (or all of them with `full`).
pub fn sample_edge_batch<R: Rng>(
    queries: Vec<usize>,
    num_sentences: usize,
    m: usize,
    full: bool,
    rng: &mut R,
) -> EdgeBatch {
    let supports = if full || m >= num_sentences {
        (0..num_sentences).collect()
    } else {
        rand::seq::index::sample(rng, num_sentences, m).into_vec()
    };
    EdgeBatch { queries, supports }
}

/// Gold edges grouped by label id: `(sentence, dependent)` pairs.
#[derive(Clone, Debug)]
pub struct LabelIndex {
    pub edges: Vec<Vec<(usize, usize)>>,
}

impl LabelIndex {
    pub fn new(tb: &Treebank, vocab: &Vocabulary) -> Self {
        let mut edges = vec![Vec::new(); vocab.num_labels()];
        for (s, sent) in tb.sentences.iter().enumerate() {
            for tok in &sent.tokens {
                if let Some(r) = vocab.label_id(&tok.deprel) {
                    edges[r].push((s, tok.index));
                }
            }
        }
        for (r, e) in edges.iter().enumerate() {
            if e.is_empty() {
                log::warn!("label {} has no training edges and is excluded from the label loss", vocab.label(r));
            }
        }
        LabelIndex { edges }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SupportEdge {
    /// Position in [`LabelBatch::sentences`].
    pub slot: usize,
    pub dep: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelBatch {
    pub queries: Vec<usize>,
    /// Queries followed by the distinct source sentences of the support
    /// edges, as treebank indices.
    pub sentences: Vec<usize>,
    pub support: Vec<SupportEdge>,
}

/// Samples `u` gold edges for every label that has any.
pub fn sample_label_batch<R: Rng>(queries: Vec<usize>, index: &LabelIndex, u: usize, rng: &mut R) -> LabelBatch {
    let mut sentences = queries.clone();
    let nq = queries.len();
    let mut support = Vec::new();
    for (label, edges) in index.edges.iter().enumerate() {
        if edges.is_empty() {
            continue;
        }
        for k in rand::seq::index::sample(rng, edges.len(), u.min(edges.len())) {
            let (s, dep) = edges[k];
            let slot = match sentences[nq..].iter().position(|&x| x == s) {
                Some(p) => nq + p,
                None => {
                    sentences.push(s);
                    sentences.len() - 1
                }
            };
            support.push(SupportEdge { slot, dep, label });
        }
    }
    LabelBatch {
        queries,
        sentences,
        support,
    }
}

/// Summed head-selection NLL over the first `n_queries` sentences. In
/// instance mode the gold edges of the remaining sentences form the support
/// set. Returns the loss and the number of scored dependents.
pub fn head_loss(
    g: &mut Graph,
    model: &Model,
    sentences: &[&Sentence],
    n_queries: usize,
    scoring: ScoringMode,
) -> Result<(Var, usize)> {
    let feats = model.encoder.forward(g, &model.params, &model.vocab, sentences)?;
    let lay = &feats.layout;
    let cols = sentences[..n_queries].iter().map(|s| s.len()).max().unwrap_or(0) + 1;
    let mut pairs = Vec::new();
    let mut slots = Vec::new();
    let mut mask = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in sentences[..n_queries].iter().enumerate() {
        for tok in &s.tokens {
            let i = tok.index;
            for j in 0..cols {
                if j <= s.len() && j != i {
                    slots.push(Some(pairs.len()));
                    pairs.push(Some((lay.row(b, i), lay.row(b, j))));
                    mask.push(true);
                } else {
                    slots.push(None);
                    mask.push(false);
                }
            }
            targets.push(tok.head);
        }
    }
    if targets.is_empty() {
        return Err(Error::Config("head loss over an empty batch".into()));
    }
    let support = match scoring {
        ScoringMode::Weight => None,
        ScoringMode::Instance => {
            let sp: Vec<Option<(usize, usize)>> = sentences
                .iter()
                .enumerate()
                .skip(n_queries)
                .flat_map(|(b, s)| s.tokens.iter().map(move |t| Some((lay.row(b, t.index), lay.row(b, t.head)))))
                .collect();
            if sp.is_empty() {
                return Err(Error::Config("instance scoring needs at least one support edge".into()));
            }
            Some(model.edge.compose_graph(g, &model.params, feats.dep, feats.head, &sp)?)
        }
    };
    let cands = model.edge.compose_graph(g, &model.params, feats.dep, feats.head, &pairs)?;
    let (kind, tau) = (model.config.similarity, model.config.tau);
    let scores = model
        .edge
        .head_scores_graph(g, &model.params, cands, support, kind, scoring, tau)?;
    let laid = g.gather_rows(scores, &slots)?;
    let logits = g.reshape(laid, targets.len(), cols)?;
    Ok((g.nll(logits, &mask, &targets)?, targets.len()))
}

/// Summed label NLL over the gold edges of the first `n_queries`
/// sentences. In instance mode only labels with a support edge in this
/// batch compete; query edges with other labels are skipped.
pub fn label_loss(
    g: &mut Graph,
    model: &Model,
    sentences: &[&Sentence],
    n_queries: usize,
    support: &[SupportEdge],
    scoring: ScoringMode,
) -> Result<(Var, usize)> {
    let r = model.vocab.num_labels();
    let mut allowed = vec![scoring == ScoringMode::Weight; r];
    for e in support {
        allowed[e.label] = true;
    }
    let feats = model.encoder.forward(g, &model.params, &model.vocab, sentences)?;
    let lay = &feats.layout;
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for (b, s) in sentences[..n_queries].iter().enumerate() {
        for tok in &s.tokens {
            if let Some(l) = model.vocab.label_id(&tok.deprel).filter(|&l| allowed[l]) {
                pairs.push(Some((lay.row(b, tok.index), lay.row(b, tok.head))));
                targets.push(l);
            }
        }
    }
    if targets.is_empty() {
        return Err(Error::Config("label loss over an empty batch".into()));
    }
    let sup = match scoring {
        ScoringMode::Weight => None,
        ScoringMode::Instance => {
            if support.is_empty() {
                return Err(Error::Config("instance scoring needs at least one support edge".into()));
            }
            let sp: Vec<Option<(usize, usize)>> = support
                .iter()
                .map(|e| {
                    let head = sentences[e.slot].tokens[e.dep - 1].head;
                    Some((lay.row(e.slot, e.dep), lay.row(e.slot, head)))
                })
                .collect();
            Some(model.edge.compose_graph(g, &model.params, feats.dep, feats.head, &sp)?)
        }
    };
    let labels: Vec<usize> = support.iter().map(|e| e.label).collect();
    let cands = model.edge.compose_graph(g, &model.params, feats.dep, feats.head, &pairs)?;
    let (kind, tau) = (model.config.similarity, model.config.tau);
    let logits = model.edge.label_scores_graph(
        g,
        &model.params,
        cands,
        sup.map(|v| (v, labels.as_slice())),
        r,
        kind,
        scoring,
        tau,
    )?;
    let mask: Vec<bool> = (0..targets.len()).flat_map(|_| allowed.iter().copied()).collect();
    Ok((g.nll(logits, &mask, &targets)?, targets.len()))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean NLL per scored dependent (edge task) or edge (label task).
    pub loss: f64,
    pub dev_score: f64,
    pub lr: f64,
}

/// Best parameters of a run plus everything needed to reload them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub task: Task,
    pub train_config: TrainConfig,
    pub model: Model,
    pub dev_score: f64,
    pub epoch: usize,
}

const CHECKPOINT_FORMAT: &str = "edgekit-checkpoint";
const CHECKPOINT_VERSION: u64 = 1;

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let frozen: Vec<&str> = self
            .model
            .params
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(_, p)| p.name.as_str())
            .collect();
        let meta = json!({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "task": self.task,
            "train_config": self.train_config,
            "model_config": self.model.config,
            "vocab": self.model.vocab,
            "vocab_hash": self.model.vocab.hash(),
            "param_hash": self.model.param_hash(),
            "dev_score": self.dev_score,
            "epoch": self.epoch,
            "frozen": frozen,
        });
        let tensors: Vec<_> = self
            .model
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.clone()))
            .collect();
        io::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = io::load(path)?;
        if meta["format"] != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("{} is not an edgekit checkpoint", path.display())));
        }
        if meta["version"] != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {}", meta["version"])));
        }
        let field = |k: &str| meta.get(k).cloned().ok_or_else(|| Error::Format(format!("checkpoint lacks {k}")));
        let frozen: Vec<String> = serde_json::from_value(field("frozen")?)?;
        let mut vocab: Vocabulary = serde_json::from_value(field("vocab")?)?;
        vocab.reindex();
        let vocab_hash: String = serde_json::from_value(field("vocab_hash")?)?;
        if vocab.hash() != vocab_hash {
            return Err(Error::Stale {
                artifact: "checkpoint vocabulary",
                expected: vocab_hash,
                found: vocab.hash(),
            });
        }
        let mut params = ParamStore::new();
        for (name, t) in tensors {
            let trainable = !frozen.contains(&name);
            params.add(name, t, trainable);
        }
        let param_hash: String = serde_json::from_value(field("param_hash")?)?;
        if params.hash() != param_hash {
            return Err(Error::Stale {
                artifact: "checkpoint parameters",
                expected: param_hash,
                found: params.hash(),
            });
        }
        let config: ModelConfig = serde_json::from_value(field("model_config")?)?;
        Ok(Checkpoint {
            task: serde_json::from_value(field("task")?)?,
            train_config: serde_json::from_value(field("train_config")?)?,
            model: Model::bind(config, vocab, params)?,
            dev_score: serde_json::from_value(field("dev_score")?)?,
            epoch: serde_json::from_value(field("epoch")?)?,
        })
    }
}

/// Dev metric used for checkpoint selection: UAS for the edge task, label
/// accuracy on gold edges for the label task, both in percent. Inference
/// uses the learning-time scoring mode with a support summary over all of
/// `train`.
pub fn dev_score(model: &Model, task: Task, scoring: ScoringMode, train: &Treebank, dev: &Treebank) -> Result<f64> {
    let summary: Option<SupportSummary> = match scoring {
        ScoringMode::Weight => None,
        ScoringMode::Instance => Some(model.precompute_support(train)?),
    };
    let support = match &summary {
        Some(s) => Support::Fast(s),
        None => Support::Weight,
    };
    let scorer = model.scorer()?;
    let refs: Vec<&Sentence> = dev.sentences.iter().collect();
    let feats = model.features(&refs)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for (s, f) in refs.iter().zip(&feats) {
        match task {
            Task::Edge => {
                let scores = infer::head_score_matrix(&scorer, f, support)?;
                let heads = infer::decode_greedy(&scores);
                for tok in &s.tokens {
                    correct += usize::from(heads[tok.index] == tok.head);
                    total += 1;
                }
            }
            Task::Label => {
                for tok in &s.tokens {
                    let h = scorer.edge_rep(f, tok.head, tok.index, 0)?.vector;
                    let scores = infer::label_scores(&scorer, &h, support)?;
                    let best = infer::argmax(&scores);
                    correct += usize::from(best.map(|r| model.vocab.label(r)) == Some(tok.deprel.as_str()));
                    total += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyTreebank);
    }
    Ok(100.0 * correct as f64 / total as f64)
}

fn diverged(epoch: usize, step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } | Error::ZeroVector(_) => Error::Diverged(format!("epoch {epoch}, step {step}: {e}")),
        other => other,
    }
}

/// Builds a vocabulary and a fresh model, then trains it.
pub fn train(
    train_tb: &Treebank,
    dev: &Treebank,
    cfg: &TrainConfig,
    pretrained: Option<&WordVectors>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    let vocab = build_vocab(train_tb, cfg.min_freq)?;
    let model = Model::new(cfg.model_config(), vocab, cfg.seed, pretrained)?;
    train_model(model, train_tb, dev, cfg, on_epoch)
}

/// Runs `cfg.epochs` epochs of clipped Adam on `model` and returns the
/// parameters with the best dev score (earliest on ties).
pub fn train_model(
    mut model: Model,
    train_tb: &Treebank,
    dev: &Treebank,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Checkpoint> {
    cfg.validate()?;
    if train_tb.num_tokens() == 0 {
        return Err(Error::EmptyTreebank);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_BA7C);
    let mut adam = Adam::default();
    let label_index = LabelIndex::new(train_tb, &model.vocab);
    let ids: Vec<usize> = (0..train_tb.len()).filter(|&k| !train_tb.sentences[k].is_empty()).collect();
    let sents: Vec<&Sentence> = ids.iter().map(|&k| &train_tb.sentences[k]).collect();
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.lr, cfg.decay, epoch);
        let (mut total, mut terms) = (0.0, 0usize);
        for queries in epoch_batches(sents.len(), cfg.queries, &mut rng) {
            let nq = queries.len();
            let mut g = Graph::new(true, cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step));
            let result = match cfg.task {
                Task::Edge => {
                    let mut batch: Vec<&Sentence> = queries.iter().map(|&q| sents[q]).collect();
                    if cfg.scoring == ScoringMode::Instance {
                        let b = sample_edge_batch(queries, sents.len(), cfg.support_sentences, cfg.full_support, &mut rng);
                        batch.extend(b.supports.iter().map(|&s| sents[s]));
                    }
                    head_loss(&mut g, &model, &batch, nq, cfg.scoring)
                }
                Task::Label => {
                    let queries: Vec<usize> = queries.iter().map(|&q| ids[q]).collect();
                    let b = sample_label_batch(queries, &label_index, cfg.support_per_label, &mut rng);
                    let batch: Vec<&Sentence> = b.sentences.iter().map(|&s| &train_tb.sentences[s]).collect();
                    let support = if cfg.scoring == ScoringMode::Instance { b.support.as_slice() } else { &[] };
                    label_loss(&mut g, &model, &batch, nq, support, cfg.scoring)
                }
            };
            let (loss, k) = match result {
                Ok(v) => v,
                Err(Error::Config(m)) if m.contains("empty batch") => continue,
                Err(e) => return Err(diverged(epoch, step, e)),
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, step {step}: loss {value}")));
            }
            let mut grads = g.backward(loss).map_err(|e| diverged(epoch, step, e))?.into_params();
            clip_by_global_norm(&mut grads, cfg.clip);
            adam.update(&mut model.params, &grads, lr);
            total += value;
            terms += k;
            step += 1;
        }
        let score = dev_score(&model, cfg.task, cfg.scoring, train_tb, dev).map_err(|e| diverged(epoch, step, e))?;
        let record = EpochRecord {
            epoch,
            loss: if terms == 0 { 0.0 } else { total / terms as f64 },
            dev_score: score,
            lr,
        };
        log::info!("epoch {epoch}: loss {:.4}, dev {:.2}", record.loss, score);
        on_epoch(&record);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, model.params.clone()));
        }
    }
    let (dev_score, epoch, params) = best.expect("at least one epoch");
    model.params = params;
    Ok(Checkpoint {
        task: cfg.task,
        train_config: cfg.clone(),
        model,
        dev_score,
        epoch,
    })
}

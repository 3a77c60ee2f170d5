//! Decoding, explain-index retrieval and the parsing session.
//!
//! Score matrices are indexed `scores[dependent][head]` over positions
//! `0..=T`. Row 0 (ROOT) and self cells hold `-inf`.

use std::cmp::Ordering;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::edge::{similarity, unit, EdgeScorer, ScoringMode, Similarity, SupportSummary};
use crate::encoder::TokenFeatures;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{self, io, Tensor};
use crate::treebank::{Sentence, Token, Treebank, Vocabulary};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Index of the largest finite entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (k, &x) in xs.iter().enumerate() {
        if x == NEG_INF {
            continue;
        }
        if best.is_none_or(|b| x > xs[b]) {
            best = Some(k);
        }
    }
    best
}

/// Per-dependent argmax. `heads[0]` is 0 by convention.
pub fn decode_greedy(scores: &[Vec<f64>]) -> Vec<usize> {
    let mut heads = vec![0; scores.len()];
    for (i, row) in scores.iter().enumerate().skip(1) {
        let masked: Vec<f64> = row.iter().enumerate().map(|(j, &v)| if j == i { NEG_INF } else { v }).collect();
        heads[i] = argmax(&masked).unwrap_or(0);
    }
    heads
}

/// Sum of the chosen head scores.
pub fn tree_score(scores: &[Vec<f64>], heads: &[usize]) -> f64 {
    (1..heads.len()).map(|i| scores[i][heads[i]]).sum()
}

/// True when `heads` is an arborescence rooted at 0.
pub fn is_tree(heads: &[usize]) -> bool {
    let n = heads.len();
    if n == 0 || heads[0] != 0 {
        return false;
    }
    for start in 1..n {
        let (mut v, mut steps) = (start, 0);
        while v != 0 {
            let h = heads[v];
            if h >= n || h == v || steps > n {
                return false;
            }
            v = h;
            steps += 1;
        }
    }
    true
}

fn find_cycle(heads: &[usize]) -> Option<Vec<usize>> {
    let n = heads.len();
    let mut state = vec![0u8; n]; // 0 new, 1 on path, 2 done
    state[0] = 2;
    for start in 1..n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = heads[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&x| x == v).expect("v is on the path");
            return Some(path[pos..].to_vec());
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

fn cle_core(s: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = s.len();
    let mut heads = vec![0; n];
    for v in 1..n {
        let row: Vec<f64> = (0..n).map(|u| if u == v { NEG_INF } else { s[v][u] }).collect();
        heads[v] = argmax(&row).ok_or_else(|| Error::InvalidEdge(format!("position {v} has no admissible head")))?;
    }
    let Some(cycle) = find_cycle(&heads) else {
        return Ok(heads);
    };
    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    let mut map = vec![usize::MAX; n];
    let mut back = Vec::new();
    for v in 0..n {
        if !in_cycle[v] {
            map[v] = back.len();
            back.push(v);
        }
    }
    let c = back.len();
    let m = c + 1;
    let mut t = vec![vec![NEG_INF; m]; m];
    // best cycle member a non-cycle dependent would attach to
    let mut out_src = vec![0; m];
    // cycle member that a non-cycle head would enter through
    let mut in_dst = vec![0; m];
    for (nu, &u) in back.iter().enumerate() {
        for (nw, &w) in back.iter().enumerate() {
            if u != 0 && u != w {
                t[nu][nw] = s[u][w];
            }
        }
        if u != 0 {
            let mut best = (NEG_INF, cycle[0]);
            for &v in &cycle {
                if s[u][v] > best.0 {
                    best = (s[u][v], v);
                }
            }
            t[nu][c] = best.0;
            out_src[nu] = best.1;
        }
        let mut best = (NEG_INF, cycle[0]);
        for &v in &cycle {
            if s[v][u] == NEG_INF {
                continue;
            }
            let gain = s[v][u] - s[v][heads[v]];
            if best.0 == NEG_INF || gain > best.0 {
                best = (gain, v);
            }
        }
        t[c][nu] = best.0;
        in_dst[nu] = best.1;
    }
    let sub = cle_core(&t)?;
    let mut res = vec![0; n];
    for nd in 1..c {
        let u = back[nd];
        res[u] = if sub[nd] == c { out_src[nd] } else { back[sub[nd]] };
    }
    for &v in &cycle {
        res[v] = heads[v];
    }
    let hu = sub[c];
    res[in_dst[hu]] = back[hu];
    Ok(res)
}

/// Maximum spanning arborescence rooted at 0 (Chu-Liu-Edmonds). With
/// `single_root`, exactly one token attaches to ROOT.
pub fn decode_cle(scores: &[Vec<f64>], single_root: bool) -> Result<Vec<usize>> {
    let n = scores.len();
    if n < 2 {
        return Err(Error::InvalidEdge("cannot decode a sentence without tokens".into()));
    }
    if !single_root {
        return cle_core(scores);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for child in 1..n {
        if scores[child][0] == NEG_INF {
            continue;
        }
        let mut s = scores.to_vec();
        for (v, row) in s.iter_mut().enumerate().skip(1) {
            if v != child {
                row[0] = NEG_INF;
            }
        }
        let Ok(heads) = cle_core(&s) else { continue };
        let score = tree_score(scores, &heads);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, heads));
        }
    }
    best.map(|(_, h)| h)
        .ok_or_else(|| Error::InvalidEdge("no token can attach to ROOT".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMode {
    /// Dot products with precomputed support sums.
    Fast,
    /// Explicit similarity sums over every stored support edge.
    Explainable,
}

impl FromStr for InferenceMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(InferenceMode::Fast),
            "explainable" => Ok(InferenceMode::Explainable),
            _ => Err(Error::Config(format!("unknown inference mode {s:?} (fast|explainable)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoder {
    Greedy,
    Cle { single_root: bool },
}

impl Decoder {
    pub fn decode(&self, scores: &[Vec<f64>]) -> Result<Vec<usize>> {
        match *self {
            Decoder::Greedy => Ok(decode_greedy(scores)),
            Decoder::Cle { single_root } => decode_cle(scores, single_root),
        }
    }
}

/// Provenance of one stored support edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sentence: usize,
    pub head: usize,
    pub dep: usize,
    pub label: String,
    pub head_form: String,
    pub dep_form: String,
}

/// Every support edge with its raw vector and norm, for exact retrieval
/// and explicit scoring.
#[derive(Clone, Debug)]
pub struct ExplainIndex {
    pub param_hash: String,
    pub entries: Vec<IndexEntry>,
    label_ids: Vec<Option<usize>>,
    num_labels: usize,
    dim: usize,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

/// Rows per parallel chunk when scanning the index.
const SCAN_CHUNK: usize = 2048;

impl ExplainIndex {
    pub fn from_parts(
        param_hash: impl Into<String>,
        dim: usize,
        vectors: Vec<Vec<f64>>,
        entries: Vec<IndexEntry>,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if vectors.len() != entries.len() {
            return Err(Error::Misaligned(format!("{} vectors, {} entries", vectors.len(), entries.len())));
        }
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape {
                op: "explain_index",
                detail: format!("vectors must have dimension {dim}"),
            });
        }
        let norms = vectors.iter().map(|v| tensor::l2_norm(v)).collect();
        let label_ids = entries.iter().map(|e| vocab.label_id(&e.label)).collect();
        Ok(ExplainIndex {
            param_hash: param_hash.into(),
            label_ids,
            num_labels: vocab.num_labels(),
            dim,
            vectors: vectors.into_iter().flatten().collect(),
            norms,
            entries,
        })
    }

    /// Stores the gold edge of every token of `sentences`.
    pub fn build(
        scorer: &EdgeScorer,
        sentences: &[&Sentence],
        features: &[TokenFeatures],
        vocab: &Vocabulary,
    ) -> Result<Self> {
        if sentences.len() != features.len() {
            return Err(Error::Misaligned(format!(
                "{} sentences, {} feature sets",
                sentences.len(),
                features.len()
            )));
        }
        let per: Vec<Vec<(Vec<f64>, IndexEntry)>> = sentences
            .par_iter()
            .zip(features.par_iter())
            .enumerate()
            .map(|(sid, (s, f))| {
                s.tokens
                    .iter()
                    .map(|t| {
                        let e = scorer.edge_rep(f, t.head, t.index, sid)?;
                        Ok((
                            e.vector,
                            IndexEntry {
                                sentence: sid,
                                head: t.head,
                                dep: t.index,
                                label: t.deprel.clone(),
                                head_form: s.form(t.head).to_string(),
                                dep_form: t.form.clone(),
                            },
                        ))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let (vectors, entries): (Vec<_>, Vec<_>) = per.into_iter().flatten().unzip();
        if entries.is_empty() {
            return Err(Error::EmptyTreebank);
        }
        ExplainIndex::from_parts(scorer.param_hash.clone(), scorer.dim(), vectors, entries, vocab)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn check(&self, param_hash: &str) -> Result<()> {
        if self.param_hash != param_hash {
            return Err(Error::Stale {
                artifact: "explain index",
                expected: param_hash.into(),
                found: self.param_hash.clone(),
            });
        }
        Ok(())
    }

    /// Similarity of `h` to every stored edge, in index order.
    pub fn similarities(&self, h: &[f64], kind: Similarity, tau: f64) -> Result<Vec<f64>> {
        if h.len() != self.dim {
            return Err(Error::Shape {
                op: "explain_index",
                detail: format!("query of dimension {} against {}", h.len(), self.dim),
            });
        }
        let q = match kind {
            Similarity::Dot => h.to_vec(),
            Similarity::Cos => unit(h, || "query edge representation".into())?,
        };
        let d = self.dim;
        let chunks: Vec<Vec<f64>> = self
            .vectors
            .par_chunks(SCAN_CHUNK * d)
            .enumerate()
            .map(|(c, block)| {
                block
                    .chunks(d)
                    .enumerate()
                    .map(|(r, v)| {
                        let k = c * SCAN_CHUNK + r;
                        let dot = tensor::dot(&q, v);
                        match kind {
                            Similarity::Dot => Ok(dot),
                            Similarity::Cos => {
                                if self.norms[k] == 0.0 {
                                    let e = &self.entries[k];
                                    return Err(Error::ZeroVector(format!(
                                        "support edge {}->{} of training sentence {}",
                                        e.head, e.dep, e.sentence
                                    )));
                                }
                                Ok(tau * dot / self.norms[k])
                            }
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }

    /// Explicit head score: the sum of similarities to every stored edge.
    pub fn explicit_head(&self, h: &[f64], kind: Similarity, tau: f64) -> Result<f64> {
        Ok(self.similarities(h, kind, tau)?.iter().sum())
    }

    /// Explicit per-label sums; labels without stored edges score `-inf`.
    pub fn explicit_labels(&self, h: &[f64], kind: Similarity, tau: f64) -> Result<Vec<f64>> {
        let sims = self.similarities(h, kind, tau)?;
        let mut out = vec![0.0; self.num_labels];
        let mut seen = vec![false; self.num_labels];
        for (s, l) in sims.iter().zip(&self.label_ids) {
            if let Some(l) = *l {
                out[l] += s;
                seen[l] = true;
            }
        }
        for (o, s) in out.iter_mut().zip(seen) {
            if !s {
                *o = NEG_INF;
            }
        }
        Ok(out)
    }

    /// Exact top-`k` by similarity, best first; ties go to the lower index.
    /// `k` larger than the index returns everything.
    pub fn knn(&self, h: &[f64], k: usize, kind: Similarity, tau: f64) -> Result<Vec<(usize, f64)>> {
        let sims = self.similarities(h, kind, tau)?;
        Ok(top_k(&sims, k))
    }

    pub fn explain(&self, query: QueryEdge, h: &[f64], k: usize, kind: Similarity, tau: f64) -> Result<Rationale> {
        if k > self.len() {
            log::warn!("k = {k} exceeds the {} stored edges; returning all of them", self.len());
        }
        let neighbors = self
            .knn(h, k, kind, tau)?
            .into_iter()
            .map(|(idx, sim)| {
                let e = &self.entries[idx];
                Neighbor {
                    train_sentence_id: e.sentence,
                    j: e.head,
                    i: e.dep,
                    head_form: e.head_form.clone(),
                    dep_form: e.dep_form.clone(),
                    gold_label: e.label.clone(),
                    similarity: sim,
                }
            })
            .collect();
        Ok(Rationale { query, neighbors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "explain-index",
            "param_hash": self.param_hash,
            "num_labels": self.num_labels,
            "label_ids": self.label_ids,
            "entries": self.entries,
        });
        let n = self.len();
        let tensors = vec![
            ("vectors".to_string(), Tensor::new(vec![n, self.dim], self.vectors.clone())?),
            ("norms".to_string(), Tensor::new(vec![1, n], self.norms.clone())?),
        ];
        io::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = io::load(path)?;
        if meta["kind"] != "explain-index" {
            return Err(Error::Format(format!("{} is not an explain index", path.display())));
        }
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Format(format!("explain index lacks {name}")))
        };
        let vectors = get("vectors")?;
        let norms = get("norms")?;
        let entries: Vec<IndexEntry> = serde_json::from_value(meta["entries"].clone())?;
        if entries.len() != vectors.rows() || norms.len() != vectors.rows() {
            return Err(Error::Format("explain index sections disagree in length".into()));
        }
        Ok(ExplainIndex {
            param_hash: serde_json::from_value(meta["param_hash"].clone())?,
            label_ids: serde_json::from_value(meta["label_ids"].clone())?,
            num_labels: serde_json::from_value(meta["num_labels"].clone())?,
            dim: vectors.cols(),
            vectors: vectors.data().to_vec(),
            norms: norms.data().to_vec(),
            entries,
        })
    }
}

/// Indices of the `k` largest values, best first, ties to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<(usize, f64)> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|i| (i, values[i])).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryEdge {
    pub sentence: usize,
    pub head_form: String,
    pub dep_form: String,
    pub j: usize,
    pub i: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub train_sentence_id: usize,
    pub j: usize,
    pub i: usize,
    pub head_form: String,
    pub dep_form: String,
    pub gold_label: String,
    pub similarity: f64,
}

/// The training edges most similar to one predicted edge.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    pub query: QueryEdge,
    pub neighbors: Vec<Neighbor>,
}

/// Where instance scores come from.
#[derive(Clone, Copy, Debug)]
pub enum Support<'a> {
    /// Weight vectors, no support set.
    Weight,
    Fast(&'a SupportSummary),
    Explicit(&'a ExplainIndex),
}

/// Head scores for every (dependent, candidate) pair of a sentence.
pub fn head_score_matrix(scorer: &EdgeScorer, f: &TokenFeatures, support: Support<'_>) -> Result<Vec<Vec<f64>>> {
    let n = f.len();
    if let Support::Explicit(ix) = support {
        ix.check(&scorer.param_hash)?;
    }
    let cands = scorer.candidate_vectors(f);
    let mut out = vec![vec![NEG_INF; n]];
    for i in 1..n {
        let mut row = vec![NEG_INF; n];
        for (j, cell) in row.iter_mut().enumerate() {
            if j == i {
                continue;
            }
            let h = cands.row_slice((i - 1) * n + j);
            *cell = match support {
                Support::Weight => scorer.score_head(h, ScoringMode::Weight, None)?,
                Support::Fast(s) => scorer.score_head(h, ScoringMode::Instance, Some(s))?,
                Support::Explicit(ix) => ix.explicit_head(h, scorer.similarity, scorer.tau)?,
            };
        }
        out.push(row);
    }
    Ok(out)
}

pub fn label_scores(scorer: &EdgeScorer, h: &[f64], support: Support<'_>) -> Result<Vec<f64>> {
    match support {
        Support::Weight => scorer.score_labels(h, ScoringMode::Weight, None),
        Support::Fast(s) => scorer.score_labels(h, ScoringMode::Instance, Some(s)),
        Support::Explicit(ix) => {
            ix.check(&scorer.param_hash)?;
            ix.explicit_labels(h, scorer.similarity, scorer.tau)
        }
    }
}

/// A model with its inference-time scoring and support artifacts.
#[derive(Clone, Debug)]
pub struct TaskScorer {
    pub model: Model,
    pub scoring: ScoringMode,
    scorer: EdgeScorer,
    summary: Option<SupportSummary>,
    index: Option<ExplainIndex>,
}

impl TaskScorer {
    pub fn new(model: Model, scoring: ScoringMode) -> Result<Self> {
        let scorer = model.scorer()?;
        Ok(TaskScorer {
            model,
            scoring,
            scorer,
            summary: None,
            index: None,
        })
    }

    pub fn with_summary(mut self, summary: SupportSummary) -> Result<Self> {
        summary.check(&self.scorer.param_hash)?;
        if summary.similarity != self.scorer.similarity {
            return Err(Error::Stale {
                artifact: "support summary similarity",
                expected: self.scorer.similarity.to_string(),
                found: summary.similarity.to_string(),
            });
        }
        self.summary = Some(summary);
        Ok(self)
    }

    pub fn with_index(mut self, index: ExplainIndex) -> Result<Self> {
        index.check(&self.scorer.param_hash)?;
        self.index = Some(index);
        Ok(self)
    }

    pub fn scorer(&self) -> &EdgeScorer {
        &self.scorer
    }

    pub fn summary(&self) -> Option<&SupportSummary> {
        self.summary.as_ref()
    }

    pub fn index(&self) -> Option<&ExplainIndex> {
        self.index.as_ref()
    }

    /// The score source for `mode`; fails when its artifact is missing.
    pub fn support(&self, mode: InferenceMode) -> Result<Support<'_>> {
        match (self.scoring, mode) {
            (ScoringMode::Weight, _) => Ok(Support::Weight),
            (ScoringMode::Instance, InferenceMode::Fast) => {
                self.summary.as_ref().map(Support::Fast).ok_or(Error::MissingArtifact {
                    artifact: "support summary (fast mode)",
                    hint: "edgekit precompute",
                })
            }
            (ScoringMode::Instance, InferenceMode::Explainable) => {
                self.index.as_ref().map(Support::Explicit).ok_or(Error::MissingArtifact {
                    artifact: "explain index (explainable mode)",
                    hint: "edgekit precompute",
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParseResult {
    /// `heads[i]` for `i in 1..=T`; `heads[0]` is 0.
    pub heads: Vec<usize>,
    /// Label ids aligned with `heads`; `None` without a label model.
    pub labels: Vec<Option<usize>>,
    pub head_scores: Option<Vec<Vec<f64>>>,
    pub mode: InferenceMode,
}

/// A parsing session over an edge model and an optional label model.
#[derive(Clone, Debug)]
pub struct Parser {
    edge: TaskScorer,
    label: Option<TaskScorer>,
    mode: InferenceMode,
    pub decoder: Decoder,
    pub keep_scores: bool,
}

impl Parser {
    pub fn new(edge: TaskScorer, label: Option<TaskScorer>, mode: InferenceMode, decoder: Decoder) -> Result<Self> {
        let p = Parser {
            edge,
            label,
            mode,
            decoder,
            keep_scores: false,
        };
        p.check_mode(mode)?;
        Ok(p)
    }

    fn check_mode(&self, mode: InferenceMode) -> Result<()> {
        self.edge.support(mode)?;
        if let Some(l) = &self.label {
            l.support(mode)?;
        }
        Ok(())
    }

    pub fn mode(&self) -> InferenceMode {
        self.mode
    }

    /// Selects the inference mode for subsequent parses.
    pub fn switch_mode(&mut self, mode: InferenceMode) -> Result<()> {
        self.check_mode(mode)?;
        self.mode = mode;
        Ok(())
    }

    pub fn edge(&self) -> &TaskScorer {
        &self.edge
    }

    pub fn label(&self) -> Option<&TaskScorer> {
        self.label.as_ref()
    }

    pub fn parse(&self, sentences: &[&Sentence]) -> Result<Vec<ParseResult>> {
        let edge_feats = self.edge.model.features(sentences)?;
        let label_feats = match &self.label {
            Some(l) => Some(l.model.features(sentences)?),
            None => None,
        };
        let support = self.edge.support(self.mode)?;
        let label_support = self.label.as_ref().map(|l| l.support(self.mode)).transpose()?;
        (0..sentences.len())
            .into_par_iter()
            .map(|k| {
                let f = &edge_feats[k];
                let scores = head_score_matrix(&self.edge.scorer, f, support)?;
                let heads = if f.len() < 2 { vec![0] } else { self.decoder.decode(&scores)? };
                let mut labels = vec![None; heads.len()];
                if let (Some(l), Some(lf), Some(ls)) = (&self.label, &label_feats, label_support) {
                    for i in 1..heads.len() {
                        let h = l.scorer.edge_rep(&lf[k], heads[i], i, k)?.vector;
                        labels[i] = argmax(&label_scores(&l.scorer, &h, ls)?);
                    }
                }
                Ok(ParseResult {
                    heads,
                    labels,
                    head_scores: self.keep_scores.then_some(scores),
                    mode: self.mode,
                })
            })
            .collect()
    }

    /// Copies `tb` with predicted HEAD and DEPREL (`_` without a label model).
    pub fn parse_treebank(&self, tb: &Treebank) -> Result<Treebank> {
        let refs: Vec<&Sentence> = tb.sentences.iter().collect();
        let results = self.parse(&refs)?;
        let sentences = tb
            .sentences
            .iter()
            .zip(&results)
            .map(|(s, r)| Sentence {
                tokens: s
                    .tokens
                    .iter()
                    .map(|t| Token {
                        index: t.index,
                        form: t.form.clone(),
                        head: r.heads[t.index],
                        deprel: match (&self.label, r.labels[t.index]) {
                            (Some(l), Some(id)) => l.model.vocab.label(id).to_string(),
                            _ => "_".to_string(),
                        },
                    })
                    .collect(),
            })
            .collect();
        Ok(Treebank::new(sentences))
    }

    /// Top-`k` training edges for every predicted edge, from the edge
    /// model's explain index.
    pub fn explain(&self, sentences: &[&Sentence], k: usize) -> Result<Vec<Rationale>> {
        let index = self.edge.index.as_ref().ok_or(Error::MissingArtifact {
            artifact: "explain index",
            hint: "edgekit precompute",
        })?;
        let results = self.parse(sentences)?;
        let feats = self.edge.model.features(sentences)?;
        let sc = &self.edge.scorer;
        let mut out = Vec::new();
        for (sid, ((s, r), f)) in sentences.iter().zip(&results).zip(&feats).enumerate() {
            for i in 1..r.heads.len() {
                let j = r.heads[i];
                let h = sc.edge_rep(f, j, i, sid)?.vector;
                let q = QueryEdge {
                    sentence: sid,
                    head_form: s.form(j).to_string(),
                    dep_form: s.form(i).to_string(),
                    j,
                    i,
                };
                out.push(index.explain(q, &h, k, sc.similarity, sc.tau)?);
            }
        }
        Ok(out)
    }
}

/// Recomputes every neighbor's similarity from raw vectors and checks the
/// list is sorted. Used to validate rationale files.
pub fn rationale_is_consistent(r: &Rationale, index: &ExplainIndex, h: &[f64], kind: Similarity, tau: f64) -> bool {
    let sorted = r.neighbors.windows(2).all(|w| w[0].similarity >= w[1].similarity);
    sorted
        && r.neighbors.iter().all(|n| {
            index
                .entries
                .iter()
                .position(|e| e.sentence == n.train_sentence_id && e.head == n.j && e.dep == n.i)
                .and_then(|k| similarity(h, index.vector(k), kind, tau).ok())
                .is_some_and(|s| (s - n.similarity).abs() <= 1e-9 * (1.0 + s.abs()))
        })
}

//! Edge representations, similarities and the weight/instance scorers.
//!
//! An edge from head `j` to dependent `i` is `h = (h_dep_i ⊙ h_head_j) · M`
//! where `M` is the composition matrix in row-vector convention (the
//! transpose of the usual column-vector `W`).
//!
//! Instance scoring sums similarities to a support set of gold edges. Since
//! both similarities are linear in the support side once that side is
//! fixed, the sum collapses to one dot product with a precomputed
//! [`SupportSummary`]. For cosine the summary holds the sum of *unit*
//! vectors, which is what makes `τ·ĥ·Σê` equal to `Σ τ·cos(h, e)`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::encoder::TokenFeatures;
use crate::error::{Error, Result};
use crate::tensor::{self, io, Graph, ParamId, ParamStore, Tensor, Var};
use crate::treebank::{Sentence, Vocabulary};

pub const DEFAULT_TAU: f64 = 64.0;

/// Norm floor used only on the training graph.
pub(crate) const TRAIN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringMode {
    Weight,
    Instance,
}

impl FromStr for Similarity {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Similarity::Dot),
            "cos" => Ok(Similarity::Cos),
            _ => Err(Error::Config(format!("unknown similarity {s:?} (dot|cos)"))),
        }
    }
}

impl FromStr for ScoringMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(ScoringMode::Weight),
            "instance" => Ok(ScoringMode::Instance),
            _ => Err(Error::Config(format!("unknown scoring mode {s:?} (weight|instance)"))),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Similarity::Dot => "dot",
            Similarity::Cos => "cos",
        })
    }
}

impl fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoringMode::Weight => "weight",
            ScoringMode::Instance => "instance",
        })
    }
}

/// A composed edge vector with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeRep {
    pub vector: Vec<f64>,
    pub head: usize,
    pub dep: usize,
    pub sentence: usize,
}

/// `(dep ⊙ head) · m`.
pub fn compose(dep: &[f64], head: &[f64], m: &Tensor) -> Vec<f64> {
    let d = m.cols();
    let mut out = vec![0.0; d];
    for (p, (a, b)) in dep.iter().zip(head).enumerate() {
        let x = a * b;
        if x == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row_slice(p)) {
            *o += x * w;
        }
    }
    out
}

pub fn unit(v: &[f64], what: impl FnOnce() -> String) -> Result<Vec<f64>> {
    let n = tensor::l2_norm(v);
    if n == 0.0 {
        return Err(Error::ZeroVector(what()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `aᵀb` or `τ·âᵀb̂`. Cosine with a zero vector is an error.
pub fn similarity(a: &[f64], b: &[f64], kind: Similarity, tau: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            op: "similarity",
            detail: format!("{} vs {}", a.len(), b.len()),
        });
    }
    match kind {
        Similarity::Dot => Ok(tensor::dot(a, b)),
        Similarity::Cos => {
            let (na, nb) = (tensor::l2_norm(a), tensor::l2_norm(b));
            if na == 0.0 || nb == 0.0 {
                return Err(Error::ZeroVector("cosine similarity operand".into()));
            }
            Ok(tau * tensor::dot(a, b) / (na * nb))
        }
    }
}

/// Row-wise softmax over candidate heads with the self-head masked.
/// `scores[i]` holds the `T + 1` candidate scores for dependent `i`; row 0
/// (ROOT) is returned empty.
pub fn head_distribution(scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for (i, row) in scores.iter().enumerate().skip(1) {
        let mask: Vec<bool> = (0..row.len()).map(|j| j != i && row[j] != f64::NEG_INFINITY).collect();
        out.push(tensor::masked_softmax(row, &mask));
    }
    out
}

/// Softmax over labels; `-inf` scores get probability 0.
pub fn label_distribution(scores: &[f64]) -> Vec<f64> {
    let mask: Vec<bool> = scores.iter().map(|s| *s != f64::NEG_INFINITY).collect();
    tensor::masked_softmax(scores, &mask)
}

/// Trainable edge parameters living in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct EdgeParams {
    pub composition: ParamId,
    pub head_w: ParamId,
    pub label_w: ParamId,
}

impl EdgeParams {
    pub fn new<R: Rng>(d: usize, num_labels: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        EdgeParams {
            composition: store.add("edge.composition", Tensor::glorot(d, d, rng), true),
            head_w: store.add("edge.head_w", Tensor::uniform(1, d, 0.1, rng), true),
            label_w: store.add("edge.label_w", Tensor::uniform(num_labels.max(1), d, 0.1, rng), true),
        }
    }

    pub fn bind(store: &ParamStore) -> Result<Self> {
        let id = |n: &str| store.find(n).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {n}")));
        Ok(EdgeParams {
            composition: id("edge.composition")?,
            head_w: id("edge.head_w")?,
            label_w: id("edge.label_w")?,
        })
    }

    /// Edge vectors for (dependent row, head row) pairs; `None` pairs give
    /// zero rows.
    pub fn compose_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        dep: Var,
        head: Var,
        pairs: &[Option<(usize, usize)>],
    ) -> Result<Var> {
        let d_rows: Vec<Option<usize>> = pairs.iter().map(|p| p.map(|(d, _)| d)).collect();
        let h_rows: Vec<Option<usize>> = pairs.iter().map(|p| p.map(|(_, h)| h)).collect();
        let a = g.gather_rows(dep, &d_rows)?;
        let b = g.gather_rows(head, &h_rows)?;
        let x = g.mul(a, b)?;
        let m = g.param(store, self.composition);
        g.matmul(x, m)
    }

    /// Head scores `[n, 1]` for candidate edges `cands` (`[n, d]`).
    /// Instance mode needs the support edge vectors `[m, d]`.
    pub fn head_scores_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cands: Var,
        support: Option<Var>,
        kind: Similarity,
        mode: ScoringMode,
        tau: f64,
    ) -> Result<Var> {
        let target = match mode {
            ScoringMode::Weight => {
                let w = g.param(store, self.head_w);
                match kind {
                    Similarity::Dot => w,
                    Similarity::Cos => g.l2_normalize(w, TRAIN_EPS)?,
                }
            }
            ScoringMode::Instance => {
                let s = support.ok_or_else(|| Error::Config("instance scoring needs support edges".into()))?;
                let s = match kind {
                    Similarity::Dot => s,
                    Similarity::Cos => g.l2_normalize(s, TRAIN_EPS)?,
                };
                g.sum_rows(s)?
            }
        };
        project(g, cands, target, kind, tau)
    }

    /// Label scores `[n, |R|]`. In instance mode `support` carries the
    /// support edge vectors and their label ids; each label's target is the
    /// sum of its members.
    pub fn label_scores_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cands: Var,
        support: Option<(Var, &[usize])>,
        num_labels: usize,
        kind: Similarity,
        mode: ScoringMode,
        tau: f64,
    ) -> Result<Var> {
        let targets = match mode {
            ScoringMode::Weight => {
                let w = g.param(store, self.label_w);
                match kind {
                    Similarity::Dot => w,
                    Similarity::Cos => g.l2_normalize(w, TRAIN_EPS)?,
                }
            }
            ScoringMode::Instance => {
                let (s, labels) =
                    support.ok_or_else(|| Error::Config("instance scoring needs support edges".into()))?;
                let s = match kind {
                    Similarity::Dot => s,
                    Similarity::Cos => g.l2_normalize(s, TRAIN_EPS)?,
                };
                let mut member = vec![0.0; num_labels * labels.len()];
                for (k, &r) in labels.iter().enumerate() {
                    member[r * labels.len() + k] = 1.0;
                }
                let member = g.constant(Tensor::new(vec![num_labels, labels.len()], member)?);
                g.matmul(member, s)?
            }
        };
        project(g, cands, targets, kind, tau)
    }
}

/// `cands · targetsᵀ`, with the candidate side normalized and scaled by τ
/// for cosine. Targets are expected already in their final form.
fn project(g: &mut Graph, cands: Var, targets: Var, kind: Similarity, tau: f64) -> Result<Var> {
    let t = g.transpose(targets)?;
    match kind {
        Similarity::Dot => g.matmul(cands, t),
        Similarity::Cos => {
            let c = g.l2_normalize(cands, TRAIN_EPS)?;
            let s = g.matmul(c, t)?;
            g.scale(s, tau)
        }
    }
}

/// Read-only inference copy of the edge parameters.
#[derive(Clone, Debug)]
pub struct EdgeScorer {
    pub similarity: Similarity,
    pub tau: f64,
    pub param_hash: String,
    composition: Tensor,
    head_w: Vec<f64>,
    label_w: Tensor,
}

impl EdgeScorer {
    pub fn from_parts(
        similarity: Similarity,
        tau: f64,
        composition: Tensor,
        head_w: Vec<f64>,
        label_w: Tensor,
        param_hash: impl Into<String>,
    ) -> Result<Self> {
        let d = composition.cols();
        if composition.rows() != d || head_w.len() != d || label_w.cols() != d {
            return Err(Error::Shape {
                op: "edge_scorer",
                detail: format!(
                    "composition {:?}, head_w {}, label_w {:?}",
                    composition.shape(),
                    head_w.len(),
                    label_w.shape()
                ),
            });
        }
        if similarity == Similarity::Cos && tau <= 0.0 {
            return Err(Error::Config(format!("τ must be positive for cosine, got {tau}")));
        }
        Ok(EdgeScorer {
            similarity,
            tau,
            param_hash: param_hash.into(),
            composition,
            head_w,
            label_w,
        })
    }

    pub fn from_store(store: &ParamStore, params: &EdgeParams, similarity: Similarity, tau: f64) -> Result<Self> {
        EdgeScorer::from_parts(
            similarity,
            tau,
            store.value(params.composition).clone(),
            store.value(params.head_w).data().to_vec(),
            store.value(params.label_w).clone(),
            store.hash(),
        )
    }

    pub fn dim(&self) -> usize {
        self.composition.cols()
    }

    pub fn num_labels(&self) -> usize {
        self.label_w.rows()
    }

    pub fn edge_rep(&self, f: &TokenFeatures, j: usize, i: usize, sentence: usize) -> Result<EdgeRep> {
        let t = f.len() - 1;
        if i == 0 || i > t || j > t || i == j {
            return Err(Error::InvalidEdge(format!("head {j} -> dependent {i} in a sentence of length {t}")));
        }
        Ok(EdgeRep {
            vector: compose(f.dep.row_slice(i), f.head.row_slice(j), &self.composition),
            head: j,
            dep: i,
            sentence,
        })
    }

    /// All `T × (T + 1)` candidate vectors, row `(i - 1) * (T + 1) + j`.
    /// Self pairs are included and must be skipped by the caller.
    pub fn candidate_vectors(&self, f: &TokenFeatures) -> Tensor {
        let n = f.len();
        let d = f.dim();
        let t = n - 1;
        let mut x = Vec::with_capacity(t * n * d);
        for i in 1..n {
            let dep = f.dep.row_slice(i);
            for j in 0..n {
                x.extend(dep.iter().zip(f.head.row_slice(j)).map(|(a, b)| a * b));
            }
        }
        let x = Tensor::mat(t * n, d, x);
        x.matmul(&self.composition).expect("composition is d × d")
    }

    fn check_summary<'a>(&self, summary: Option<&'a SupportSummary>) -> Result<&'a SupportSummary> {
        let s = summary.ok_or(Error::MissingArtifact {
            artifact: "support summary",
            hint: "edgekit precompute",
        })?;
        s.check(&self.param_hash)?;
        if s.similarity != self.similarity {
            return Err(Error::Stale {
                artifact: "support summary similarity",
                expected: self.similarity.to_string(),
                found: s.similarity.to_string(),
            });
        }
        Ok(s)
    }

    /// Query side of a score: the raw vector for dot, `τ·ĥ` for cos.
    fn query(&self, h: &[f64]) -> Result<Vec<f64>> {
        match self.similarity {
            Similarity::Dot => Ok(h.to_vec()),
            Similarity::Cos => {
                let u = unit(h, || "query edge representation".into())?;
                Ok(u.into_iter().map(|x| x * self.tau).collect())
            }
        }
    }

    fn weight_target(&self, w: &[f64]) -> Result<Vec<f64>> {
        match self.similarity {
            Similarity::Dot => Ok(w.to_vec()),
            Similarity::Cos => unit(w, || "weight vector".into()),
        }
    }

    /// Head score of an edge vector; instance mode uses the fast form.
    pub fn score_head(&self, h: &[f64], mode: ScoringMode, summary: Option<&SupportSummary>) -> Result<f64> {
        let q = self.query(h)?;
        match mode {
            ScoringMode::Weight => Ok(tensor::dot(&q, &self.weight_target(&self.head_w)?)),
            ScoringMode::Instance => Ok(tensor::dot(&q, &self.check_summary(summary)?.h_sum_head)),
        }
    }

    /// Per-label scores. In instance mode labels without support edges
    /// score `-inf`.
    pub fn score_labels(&self, h: &[f64], mode: ScoringMode, summary: Option<&SupportSummary>) -> Result<Vec<f64>> {
        let q = self.query(h)?;
        match mode {
            ScoringMode::Weight => (0..self.num_labels())
                .map(|r| Ok(tensor::dot(&q, &self.weight_target(self.label_w.row_slice(r))?)))
                .collect(),
            ScoringMode::Instance => {
                let s = self.check_summary(summary)?;
                Ok(s.h_sum_label
                    .iter()
                    .zip(&s.label_counts)
                    .map(|(v, &c)| if c == 0 { f64::NEG_INFINITY } else { tensor::dot(&q, v) })
                    .collect())
            }
        }
    }

    /// Support-side contribution of one gold edge to a summary.
    fn support_vector(&self, v: Vec<f64>, what: impl FnOnce() -> String) -> Result<Vec<f64>> {
        match self.similarity {
            Similarity::Dot => Ok(v),
            Similarity::Cos => unit(&v, what),
        }
    }
}

/// Precomputed support sums for fast-mode instance scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupportSummary {
    pub param_hash: String,
    pub similarity: Similarity,
    pub h_sum_head: Vec<f64>,
    pub h_sum_label: Vec<Vec<f64>>,
    pub head_count: usize,
    pub label_counts: Vec<usize>,
}

struct Partial {
    head: Vec<f64>,
    labels: Vec<Vec<f64>>,
    head_count: usize,
    label_counts: Vec<usize>,
}

impl SupportSummary {
    /// Sums every gold edge of `sentences` (features aligned by index).
    /// Each sentence is reduced in parallel, then partials are added in
    /// sentence order so the result does not depend on scheduling.
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
        let d = scorer.dim();
        let r = scorer.num_labels();
        let partials: Vec<Partial> = sentences
            .par_iter()
            .zip(features.par_iter())
            .enumerate()
            .map(|(sid, (s, f))| {
                let mut p = Partial {
                    head: vec![0.0; d],
                    labels: vec![vec![0.0; d]; r],
                    head_count: 0,
                    label_counts: vec![0; r],
                };
                for tok in &s.tokens {
                    let e = scorer.edge_rep(f, tok.head, tok.index, sid)?;
                    let v = scorer.support_vector(e.vector, || {
                        format!("gold edge {}->{} of training sentence {sid}", tok.head, tok.index)
                    })?;
                    add_into(&mut p.head, &v);
                    p.head_count += 1;
                    if let Some(l) = vocab.label_id(&tok.deprel).filter(|&l| l < r) {
                        add_into(&mut p.labels[l], &v);
                        p.label_counts[l] += 1;
                    }
                }
                Ok(p)
            })
            .collect::<Result<_>>()?;
        let mut out = SupportSummary {
            param_hash: scorer.param_hash.clone(),
            similarity: scorer.similarity,
            h_sum_head: vec![0.0; d],
            h_sum_label: vec![vec![0.0; d]; r],
            head_count: 0,
            label_counts: vec![0; r],
        };
        for p in partials {
            add_into(&mut out.h_sum_head, &p.head);
            out.head_count += p.head_count;
            for l in 0..r {
                add_into(&mut out.h_sum_label[l], &p.labels[l]);
                out.label_counts[l] += p.label_counts[l];
            }
        }
        for (l, &c) in out.label_counts.iter().enumerate() {
            if c == 0 {
                log::warn!("label {} has no support edges; it cannot be predicted in instance mode", vocab.label(l));
            }
        }
        Ok(out)
    }

    /// Sums raw edge vectors, each with an optional label id.
    pub fn from_edges<'a>(
        scorer: &EdgeScorer,
        edges: impl IntoIterator<Item = (&'a [f64], Option<usize>)>,
    ) -> Result<Self> {
        let (d, r) = (scorer.dim(), scorer.num_labels());
        let mut out = SupportSummary {
            param_hash: scorer.param_hash.clone(),
            similarity: scorer.similarity,
            h_sum_head: vec![0.0; d],
            h_sum_label: vec![vec![0.0; d]; r],
            head_count: 0,
            label_counts: vec![0; r],
        };
        for (k, (h, label)) in edges.into_iter().enumerate() {
            if h.len() != d {
                return Err(Error::Shape {
                    op: "support_summary",
                    detail: format!("edge {k} has dimension {}, expected {d}", h.len()),
                });
            }
            let v = scorer.support_vector(h.to_vec(), || format!("support edge {k}"))?;
            add_into(&mut out.h_sum_head, &v);
            out.head_count += 1;
            if let Some(l) = label.filter(|&l| l < r) {
                add_into(&mut out.h_sum_label[l], &v);
                out.label_counts[l] += 1;
            }
        }
        Ok(out)
    }

    pub fn check(&self, param_hash: &str) -> Result<()> {
        if self.param_hash != param_hash {
            return Err(Error::Stale {
                artifact: "support summary",
                expected: param_hash.into(),
                found: self.param_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = json!({
            "kind": "support-summary",
            "param_hash": self.param_hash,
            "similarity": self.similarity,
            "head_count": self.head_count,
            "label_counts": self.label_counts,
        });
        let d = self.h_sum_head.len();
        let labels: Vec<f64> = self.h_sum_label.iter().flatten().copied().collect();
        let mut tensors = vec![("h_sum_head".to_string(), Tensor::new(vec![1, d], self.h_sum_head.clone())?)];
        if !self.h_sum_label.is_empty() {
            tensors.push((
                "h_sum_label".to_string(),
                Tensor::new(vec![self.h_sum_label.len(), d], labels)?,
            ));
        }
        io::save(path, &meta, &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, tensors) = io::load(path)?;
        if meta["kind"] != "support-summary" {
            return Err(Error::Format(format!("{} is not a support summary", path.display())));
        }
        let get = |name: &str| tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t);
        let head = get("h_sum_head").ok_or_else(|| Error::Format("summary lacks h_sum_head".into()))?;
        let h_sum_label = match get("h_sum_label") {
            Some(t) => (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect(),
            None => Vec::new(),
        };
        Ok(SupportSummary {
            param_hash: serde_json::from_value(meta["param_hash"].clone())?,
            similarity: serde_json::from_value(meta["similarity"].clone())?,
            head_count: serde_json::from_value(meta["head_count"].clone())?,
            label_counts: serde_json::from_value(meta["label_counts"].clone())?,
            h_sum_head: head.data().to_vec(),
            h_sum_label,
        })
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::treebank::{build_vocab, Treebank};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| r.gen_range(-1.0..1.0)).collect()
    }

    fn identity(d: usize) -> Tensor {
        let mut t = Tensor::zeros(d, d);
        for k in 0..d {
            t.data_mut()[k * d + k] = 1.0;
        }
        t
    }

    fn features(r: &mut ChaCha8Rng, t: usize, d: usize) -> TokenFeatures {
        TokenFeatures {
            dep: Tensor::uniform(t + 1, d, 1.0, r),
            head: Tensor::uniform(t + 1, d, 1.0, r),
        }
    }

    fn scorer(r: &mut ChaCha8Rng, d: usize, labels: usize, kind: Similarity) -> EdgeScorer {
        EdgeScorer::from_parts(
            kind,
            DEFAULT_TAU,
            Tensor::uniform(d, d, 1.0, r),
            rand_vec(r, d),
            Tensor::uniform(labels, d, 1.0, r),
            "h",
        )
        .unwrap()
    }

    #[test]
    fn identity_composition_with_unit_dependent_gives_head() {
        let mut r = rng(1);
        let mut f = features(&mut r, 3, 4);
        f.dep.data_mut()[4..8].fill(1.0);
        let s = EdgeScorer::from_parts(Similarity::Dot, 1.0, identity(4), vec![0.0; 4], Tensor::zeros(1, 4), "h").unwrap();
        let e = s.edge_rep(&f, 2, 1, 0).unwrap();
        assert_eq!(e.vector, f.head.row_slice(2));
        f.dep.data_mut()[4..8].fill(0.0);
        assert!(s.edge_rep(&f, 2, 1, 0).unwrap().vector.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn composition_matches_loop_oracle() {
        let mut r = rng(2);
        let d = 6;
        let f = features(&mut r, 4, d);
        let s = scorer(&mut r, d, 2, Similarity::Dot);
        let cands = s.candidate_vectors(&f);
        for i in 1..=4 {
            for j in 0..=4 {
                if i == j {
                    continue;
                }
                let e = s.edge_rep(&f, j, i, 0).unwrap();
                // W[k][p] = M[p][k]
                for k in 0..d {
                    let mut want = 0.0;
                    for p in 0..d {
                        want += s.composition.get(p, k) * f.dep.get(i, p) * f.head.get(j, p);
                    }
                    assert!((e.vector[k] - want).abs() < 1e-12);
                    assert!((cands.get((i - 1) * 5 + j, k) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_edges_are_rejected() {
        let mut r = rng(3);
        let f = features(&mut r, 3, 4);
        let s = scorer(&mut r, 4, 1, Similarity::Dot);
        for (j, i) in [(1, 1), (0, 0), (4, 1), (1, 4)] {
            assert!(matches!(s.edge_rep(&f, j, i, 0), Err(Error::InvalidEdge(_))));
        }
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0], Similarity::Dot, 64.0).unwrap(), 11.0);
        let a = [0.3, -2.0, 5.0];
        assert!((similarity(&a, &a, Similarity::Cos, 64.0).unwrap() - 64.0).abs() < 1e-12);
        assert!(matches!(
            similarity(&a, &[0.0; 3], Similarity::Cos, 64.0),
            Err(Error::ZeroVector(_))
        ));
        let mut r = rng(4);
        for _ in 0..1000 {
            let (x, y) = (rand_vec(&mut r, 8), rand_vec(&mut r, 8));
            assert!(similarity(&x, &y, Similarity::Cos, 64.0).unwrap().abs() <= 64.0 + 1e-9);
        }
    }

    fn summary_from(s: &EdgeScorer, support: &[(Vec<f64>, usize)], labels: usize) -> SupportSummary {
        let d = s.dim();
        let mut out = SupportSummary {
            param_hash: s.param_hash.clone(),
            similarity: s.similarity,
            h_sum_head: vec![0.0; d],
            h_sum_label: vec![vec![0.0; d]; labels],
            head_count: 0,
            label_counts: vec![0; labels],
        };
        for (v, l) in support {
            let v = s.support_vector(v.clone(), String::new).unwrap();
            add_into(&mut out.h_sum_head, &v);
            add_into(&mut out.h_sum_label[*l], &v);
            out.head_count += 1;
            out.label_counts[*l] += 1;
        }
        out
    }

    #[test]
    fn singleton_support_equals_pairwise_similarity() {
        let mut r = rng(5);
        for kind in [Similarity::Dot, Similarity::Cos] {
            let s = scorer(&mut r, 5, 3, kind);
            let e = rand_vec(&mut r, 5);
            let sum = summary_from(&s, &[(e.clone(), 1)], 3);
            let h = rand_vec(&mut r, 5);
            let want = similarity(&h, &e, kind, DEFAULT_TAU).unwrap();
            assert!((s.score_head(&h, ScoringMode::Instance, Some(&sum)).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn fast_scores_equal_explicit_sums() {
        let mut r = rng(6);
        for trial in 0..1000 {
            let kind = if trial % 2 == 0 { Similarity::Dot } else { Similarity::Cos };
            let d = r.gen_range(2..12);
            let labels = r.gen_range(1..5);
            let s = scorer(&mut r, d, labels, kind);
            let support: Vec<(Vec<f64>, usize)> = (0..r.gen_range(1..30))
                .map(|_| (rand_vec(&mut r, d), r.gen_range(0..labels)))
                .collect();
            let sum = summary_from(&s, &support, labels);
            let h = rand_vec(&mut r, d);
            let explicit: f64 = support.iter().map(|(e, _)| similarity(&h, e, kind, DEFAULT_TAU).unwrap()).sum();
            let fast = s.score_head(&h, ScoringMode::Instance, Some(&sum)).unwrap();
            assert!((fast - explicit).abs() / (explicit.abs() + 1e-12) < 1e-4);
            let fast_l = s.score_labels(&h, ScoringMode::Instance, Some(&sum)).unwrap();
            for (l, f) in fast_l.iter().enumerate() {
                let members: Vec<_> = support.iter().filter(|(_, x)| *x == l).collect();
                if members.is_empty() {
                    assert_eq!(*f, f64::NEG_INFINITY);
                    continue;
                }
                let e: f64 = members.iter().map(|(e, _)| similarity(&h, e, kind, DEFAULT_TAU).unwrap()).sum();
                assert!((f - e).abs() / (e.abs() + 1e-12) < 1e-4);
            }
        }
    }

    #[test]
    fn cos_scores_are_bounded_by_support_size() {
        let mut r = rng(7);
        let s = scorer(&mut r, 6, 1, Similarity::Cos);
        for n in 1..20 {
            let support: Vec<_> = (0..n).map(|_| (rand_vec(&mut r, 6), 0)).collect();
            let sum = summary_from(&s, &support, 1);
            let h = rand_vec(&mut r, 6);
            let v = s.score_head(&h, ScoringMode::Instance, Some(&sum)).unwrap();
            assert!(v.abs() <= DEFAULT_TAU * n as f64 + 1e-9);
        }
    }

    #[test]
    fn weight_mode_examples() {
        let d = 4;
        let zero = EdgeScorer::from_parts(Similarity::Dot, 1.0, identity(d), vec![0.0; d], identity(d), "h").unwrap();
        let h = [0.5, -1.0, 2.0, 3.0];
        assert_eq!(zero.score_head(&h, ScoringMode::Weight, None).unwrap(), 0.0);
        // one-hot label weights recover coordinates
        assert_eq!(zero.score_labels(&h, ScoringMode::Weight, None).unwrap(), h.to_vec());
    }

    #[test]
    fn identical_singleton_support_gives_identical_label_scores() {
        let mut r = rng(8);
        let s = scorer(&mut r, 4, 3, Similarity::Cos);
        let e = rand_vec(&mut r, 4);
        let mut sum = summary_from(&s, &[(e.clone(), 0)], 3);
        sum.h_sum_label = vec![sum.h_sum_head.clone(); 3];
        sum.label_counts = vec![1; 3];
        let sc = s.score_labels(&rand_vec(&mut r, 4), ScoringMode::Instance, Some(&sum)).unwrap();
        assert!(sc.iter().all(|v| *v == sc[0]));
    }

    #[test]
    fn instance_mode_requires_fresh_summary() {
        let mut r = rng(9);
        let s = scorer(&mut r, 3, 1, Similarity::Dot);
        let h = rand_vec(&mut r, 3);
        assert!(matches!(
            s.score_head(&h, ScoringMode::Instance, None),
            Err(Error::MissingArtifact { .. })
        ));
        let mut sum = summary_from(&s, &[(h.clone(), 0)], 1);
        sum.param_hash = "other".into();
        assert!(matches!(
            s.score_head(&h, ScoringMode::Instance, Some(&sum)),
            Err(Error::Stale { .. })
        ));
    }

    #[test]
    fn head_distribution_examples() {
        let one = head_distribution(&[vec![], vec![3.0, 7.0]]);
        assert_eq!(one[1], vec![1.0, 0.0]);
        let uniform = head_distribution(&[vec![], vec![0.0; 4], vec![0.0; 4], vec![0.0; 4]]);
        for (i, row) in uniform.iter().enumerate().skip(1) {
            for (j, p) in row.iter().enumerate() {
                let want = if i == j { 0.0 } else { 1.0 / 3.0 };
                assert!((p - want).abs() < 1e-15);
            }
        }
        let mut r = rng(10);
        let scores: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut r, 5).iter().map(|v| v * 10.0).collect()).collect();
        let p = head_distribution(&scores);
        for i in 1..5 {
            let z: f64 = (0..5).filter(|&j| j != i).map(|j| scores[i][j].exp()).sum();
            for j in 0..5 {
                let want = if j == i { 0.0 } else { scores[i][j].exp() / z };
                assert!((p[i][j] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn label_distribution_examples() {
        assert_eq!(label_distribution(&[2.5]), vec![1.0]);
        for p in label_distribution(&[1.0; 4]) {
            assert!((p - 0.25).abs() < 1e-15);
        }
        let s = [0.3f64, -1.2, 4.0];
        let z: f64 = s.iter().map(|v| v.exp()).sum();
        for (p, v) in label_distribution(&s).iter().zip(s) {
            assert!((p - v.exp() / z).abs() < 1e-9);
        }
    }

    fn toy_treebank() -> Treebank {
        Treebank::new(vec![
            Sentence::from_triples(&[("a", 2, "det"), ("b", 0, "root")]),
            Sentence::from_triples(&[("c", 0, "root"), ("d", 1, "obj"), ("e", 2, "det")]),
            Sentence::from_triples(&[("f", 2, "det"), ("g", 0, "root"), ("h", 2, "obj"), ("i", 3, "det")]),
        ])
    }

    #[test]
    fn summary_of_one_sentence_is_sum_of_its_edges() {
        let mut r = rng(11);
        let tb = Treebank::new(vec![toy_treebank().sentences[0].clone()]);
        let vocab = build_vocab(&tb, 1).unwrap();
        let s = scorer(&mut r, 4, vocab.num_labels(), Similarity::Dot);
        let f = vec![features(&mut r, 2, 4)];
        let sum = SupportSummary::build(&s, &[&tb.sentences[0]], &f, &vocab).unwrap();
        let e1 = s.edge_rep(&f[0], 2, 1, 0).unwrap().vector;
        let e2 = s.edge_rep(&f[0], 0, 2, 0).unwrap().vector;
        for k in 0..4 {
            assert!((sum.h_sum_head[k] - (e1[k] + e2[k])).abs() < 1e-12);
        }
        assert_eq!(sum.head_count, 2);
    }

    #[test]
    fn summary_counts_match_label_frequencies_and_ignore_order() {
        let mut r = rng(12);
        let tb = toy_treebank();
        let vocab = build_vocab(&tb, 1).unwrap();
        let s = scorer(&mut r, 5, vocab.num_labels(), Similarity::Cos);
        let feats: Vec<TokenFeatures> = tb.sentences.iter().map(|x| features(&mut r, x.len(), 5)).collect();
        let refs: Vec<&Sentence> = tb.sentences.iter().collect();
        let a = SupportSummary::build(&s, &refs, &feats, &vocab).unwrap();
        let mut freq = vec![0; vocab.num_labels()];
        for sent in &tb.sentences {
            for t in &sent.tokens {
                freq[vocab.label_id(&t.deprel).unwrap()] += 1;
            }
        }
        assert_eq!(a.label_counts, freq);
        let order = [2, 0, 1];
        let refs2: Vec<&Sentence> = order.iter().map(|&k| &tb.sentences[k]).collect();
        let feats2: Vec<TokenFeatures> = order.iter().map(|&k| feats[k].clone()).collect();
        let b = SupportSummary::build(&s, &refs2, &feats2, &vocab).unwrap();
        for (x, y) in a.h_sum_head.iter().zip(&b.h_sum_head) {
            assert!((x - y).abs() < 1e-6);
        }
        assert_eq!(a.label_counts, b.label_counts);
    }

    #[test]
    fn summary_round_trips_through_file() {
        let mut r = rng(13);
        let tb = toy_treebank();
        let vocab = build_vocab(&tb, 1).unwrap();
        let s = scorer(&mut r, 3, vocab.num_labels(), Similarity::Dot);
        let feats: Vec<TokenFeatures> = tb.sentences.iter().map(|x| features(&mut r, x.len(), 3)).collect();
        let refs: Vec<&Sentence> = tb.sentences.iter().collect();
        let a = SupportSummary::build(&s, &refs, &feats, &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.bin");
        a.save(&p).unwrap();
        assert_eq!(SupportSummary::load(&p).unwrap(), a);
    }

    /// The training graph and the inference scorer must agree.
    #[test]
    fn graph_scores_match_inference_scores() {
        let mut r = rng(14);
        let d = 5;
        let labels = 3;
        for kind in [Similarity::Dot, Similarity::Cos] {
            for mode in [ScoringMode::Weight, ScoringMode::Instance] {
                let mut store = ParamStore::new();
                let p = EdgeParams::new(d, labels, &mut store, &mut r);
                let s = EdgeScorer::from_store(&store, &p, kind, DEFAULT_TAU).unwrap();
                let f = features(&mut r, 3, d);
                let mut g = Graph::new(false, 0);
                let dep = g.constant(f.dep.clone());
                let head = g.constant(f.head.clone());
                let cand_pairs = [Some((1, 0)), Some((2, 1)), Some((3, 2))];
                let sup_pairs = [Some((1, 2)), Some((2, 0)), Some((3, 1))];
                let sup_labels = [0usize, 2, 2];
                let c = p.compose_graph(&mut g, &store, dep, head, &cand_pairs).unwrap();
                let sv = p.compose_graph(&mut g, &store, dep, head, &sup_pairs).unwrap();
                let hs = p.head_scores_graph(&mut g, &store, c, Some(sv), kind, mode, DEFAULT_TAU).unwrap();
                let ls = p
                    .label_scores_graph(&mut g, &store, c, Some((sv, &sup_labels)), labels, kind, mode, DEFAULT_TAU)
                    .unwrap();
                let support: Vec<(Vec<f64>, usize)> = sup_pairs
                    .iter()
                    .zip(sup_labels)
                    .map(|(pr, l)| {
                        let (i, j) = pr.unwrap();
                        (s.edge_rep(&f, j, i, 0).unwrap().vector, l)
                    })
                    .collect();
                let sum = summary_from(&s, &support, labels);
                for (k, pr) in cand_pairs.iter().enumerate() {
                    let (i, j) = pr.unwrap();
                    let h = s.edge_rep(&f, j, i, 0).unwrap().vector;
                    let want = s.score_head(&h, mode, Some(&sum)).unwrap();
                    assert!((g.value(hs).get(k, 0) - want).abs() < 1e-9);
                    let wl = s.score_labels(&h, mode, Some(&sum)).unwrap();
                    for l in 0..labels {
                        if wl[l].is_finite() {
                            assert!((g.value(ls).get(k, l) - wl[l]).abs() < 1e-9);
                        }
                    }
                }
            }
        }
    }
}

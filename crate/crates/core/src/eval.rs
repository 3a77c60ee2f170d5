//! Attachment scores, the identical subclass test and hubness counts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::edge::Similarity;
use crate::error::{Error, Result};
use crate::infer::{top_k, ExplainIndex, IndexEntry, Parser};
use crate::model::Model;
use crate::treebank::{Sentence, Token, Treebank};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Skip tokens labeled `punct` or made only of punctuation characters.
    pub exclude_punct: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub total: usize,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub uas: f64,
    pub las: f64,
    pub tokens: usize,
    pub correct_heads: usize,
    pub correct_labeled: usize,
    /// Labeled accuracy broken down by gold label.
    pub per_label: BTreeMap<String, LabelScore>,
}

impl ScoreReport {
    fn from_counts(tokens: usize, heads: usize, labeled: usize, per_label: BTreeMap<String, LabelScore>) -> Self {
        let pct = |c: usize| if tokens == 0 { 0.0 } else { 100.0 * c as f64 / tokens as f64 };
        ScoreReport {
            uas: pct(heads),
            las: pct(labeled),
            tokens,
            correct_heads: heads,
            correct_labeled: labeled,
            per_label,
        }
    }
}

pub fn is_punct(t: &Token) -> bool {
    t.deprel == "punct" || (!t.form.is_empty() && t.form.chars().all(|c| c.is_ascii_punctuation() || is_unicode_punct(c)))
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3001}'..='\u{3003}' | '\u{00A1}' | '\u{00AB}' | '\u{00BB}' | '\u{00BF}')
}

fn check_aligned(pred: &Treebank, gold: &Treebank) -> Result<()> {
    if pred.len() != gold.len() {
        return Err(Error::Misaligned(format!("{} predicted vs {} gold sentences", pred.len(), gold.len())));
    }
    for (k, (p, g)) in pred.sentences.iter().zip(&gold.sentences).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Misaligned(format!(
                "sentence {}: {} predicted vs {} gold tokens",
                k + 1,
                p.len(),
                g.len()
            )));
        }
        if let Some(t) = p.tokens.iter().zip(&g.tokens).find(|(a, b)| a.form != b.form) {
            return Err(Error::Misaligned(format!(
                "sentence {}, token {}: {:?} vs {:?}",
                k + 1,
                t.1.index,
                t.0.form,
                t.1.form
            )));
        }
    }
    Ok(())
}

/// UAS and LAS of `pred` against `gold`. All tokens count unless
/// `opts.exclude_punct` is set.
pub fn attachment_scores(pred: &Treebank, gold: &Treebank, opts: EvalOptions) -> Result<ScoreReport> {
    check_aligned(pred, gold)?;
    let (mut n, mut uh, mut lh) = (0, 0, 0);
    let mut per_label: BTreeMap<String, LabelScore> = BTreeMap::new();
    for (p, g) in pred.sentences.iter().zip(&gold.sentences) {
        for (pt, gt) in p.tokens.iter().zip(&g.tokens) {
            if opts.exclude_punct && is_punct(gt) {
                continue;
            }
            n += 1;
            let entry = per_label.entry(gt.deprel.clone()).or_default();
            entry.total += 1;
            if pt.head == gt.head {
                uh += 1;
                if pt.deprel == gt.deprel {
                    lh += 1;
                    entry.correct += 1;
                }
            }
        }
    }
    Ok(ScoreReport::from_counts(n, uh, lh, per_label))
}

/// Component-wise mean of several reports (e.g. one per seed).
pub fn mean_report(reports: &[ScoreReport]) -> Option<ScoreReport> {
    let n = reports.len() as f64;
    let first = reports.first()?;
    Some(ScoreReport {
        uas: reports.iter().map(|r| r.uas).sum::<f64>() / n,
        las: reports.iter().map(|r| r.las).sum::<f64>() / n,
        tokens: first.tokens,
        correct_heads: reports.iter().map(|r| r.correct_heads).sum::<usize>() / reports.len(),
        correct_labeled: reports.iter().map(|r| r.correct_labeled).sum::<usize>() / reports.len(),
        per_label: BTreeMap::new(),
    })
}

/// Parses `dev` with the head model, then labels every correctly attached
/// token with the gold label of its nearest training edge. Incorrect heads
/// count as errors. `las` is the subclass score; `uas` is the parse's.
pub fn identical_subclass_test(parser: &Parser, dev: &Treebank, opts: EvalOptions) -> Result<ScoreReport> {
    let edge = parser.edge();
    let index = edge.index().ok_or(Error::MissingArtifact {
        artifact: "explain index",
        hint: "edgekit precompute",
    })?;
    if index.is_empty() {
        return Err(Error::EmptyTreebank);
    }
    let refs: Vec<&Sentence> = dev.sentences.iter().collect();
    let results = parser.parse(&refs)?;
    let feats = edge.model.features(&refs)?;
    let sc = edge.scorer();
    let per: Vec<(usize, usize, usize, Vec<(String, bool)>)> = refs
        .par_iter()
        .enumerate()
        .map(|(k, s)| {
            let (mut n, mut uh, mut lh) = (0, 0, 0);
            let mut labels = Vec::new();
            for t in &s.tokens {
                if opts.exclude_punct && is_punct(t) {
                    continue;
                }
                n += 1;
                let mut ok = false;
                if results[k].heads[t.index] == t.head {
                    uh += 1;
                    let h = sc.edge_rep(&feats[k], t.head, t.index, k)?.vector;
                    let nn = index.knn(&h, 1, sc.similarity, sc.tau)?;
                    ok = nn.first().is_some_and(|&(idx, _)| index.entries[idx].label == t.deprel);
                    lh += ok as usize;
                }
                labels.push((t.deprel.clone(), ok));
            }
            Ok((n, uh, lh, labels))
        })
        .collect::<Result<_>>()?;
    let mut per_label: BTreeMap<String, LabelScore> = BTreeMap::new();
    let (mut n, mut uh, mut lh) = (0, 0, 0);
    for (a, b, c, labels) in per {
        n += a;
        uh += b;
        lh += c;
        for (l, ok) in labels {
            let e = per_label.entry(l).or_default();
            e.total += 1;
            e.correct += ok as usize;
        }
    }
    Ok(ScoreReport::from_counts(n, uh, lh, per_label))
}

/// Gold edge representations of every token of `tb`.
pub fn gold_edge_vectors(model: &Model, tb: &Treebank) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&Sentence> = tb.sentences.iter().collect();
    let feats = model.features(&refs)?;
    let sc = model.scorer()?;
    let mut out = Vec::with_capacity(tb.num_tokens());
    for (k, (s, f)) in refs.iter().zip(&feats).enumerate() {
        for t in &s.tokens {
            out.push(sc.edge_rep(f, t.head, t.index, k)?.vector);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hub {
    pub rank: usize,
    pub index: usize,
    pub n_k: u64,
    pub entry: IndexEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HubnessReport {
    pub k: usize,
    pub similarity: Similarity,
    pub queries: usize,
    /// `counts[x]` is how often support edge `x` was among a query's k
    /// nearest neighbors.
    pub counts: Vec<u64>,
    pub top: Vec<Hub>,
    pub max: u64,
    pub median: f64,
}

impl HubnessReport {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Whether the counts sum to `k * queries`; only guaranteed when the
    /// index holds at least `k` edges.
    pub fn is_conserved(&self) -> bool {
        self.total() == (self.k.min(self.counts.len()) * self.queries) as u64
    }
}

const HUB_CHUNK: usize = 64;

/// Exact k-occurrence counts of every support edge over `queries`.
pub fn hubness(
    index: &ExplainIndex,
    queries: &[Vec<f64>],
    k: usize,
    kind: Similarity,
    tau: f64,
    top_m: usize,
) -> Result<HubnessReport> {
    let n = index.len();
    if n < k {
        log::warn!("index holds {n} edges, fewer than k = {k}");
    }
    let partial: Vec<Vec<u64>> = queries
        .par_chunks(HUB_CHUNK)
        .map(|chunk| {
            let mut counts = vec![0u64; n];
            for q in chunk {
                let sims = index.similarities(q, kind, tau)?;
                for (idx, _) in top_k(&sims, k) {
                    counts[idx] += 1;
                }
            }
            Ok(counts)
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0u64; n];
    for p in partial {
        for (c, v) in counts.iter_mut().zip(p) {
            *c += v;
        }
    }
    let ranked = top_k(&counts.iter().map(|&c| c as f64).collect::<Vec<_>>(), top_m);
    let top = ranked
        .into_iter()
        .enumerate()
        .map(|(r, (idx, _))| Hub {
            rank: r + 1,
            index: idx,
            n_k: counts[idx],
            entry: index.entries[idx].clone(),
        })
        .collect();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let median = match sorted.len() {
        0 => 0.0,
        m if m % 2 == 1 => sorted[m / 2] as f64,
        m => (sorted[m / 2 - 1] + sorted[m / 2]) as f64 / 2.0,
    };
    Ok(HubnessReport {
        k,
        similarity: kind,
        queries: queries.len(),
        max: sorted.last().copied().unwrap_or(0),
        median,
        counts,
        top,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Report {
    Scores { name: String, report: ScoreReport },
    Subclass { name: String, report: ScoreReport },
    Hubness { name: String, report: HubnessReport },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub version: u32,
    pub reports: Vec<SummaryEntry>,
}

/// One report as stored in the summary; hubness counts are reduced to
/// their statistics and written to a TSV file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum SummaryEntry {
    Scores { name: String, report: ScoreReport },
    Subclass { name: String, report: ScoreReport },
    Hubness {
        name: String,
        k: usize,
        similarity: Similarity,
        queries: usize,
        support: usize,
        max: u64,
        median: f64,
        conserved: bool,
        curve: String,
    },
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

/// Writes `summary.json` and one `<name>.hubness.tsv` ranking per hubness
/// report into `dir`. Returns the written paths.
pub fn emit_report(reports: &[Report], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut entries = Vec::new();
    for r in reports {
        match r {
            Report::Scores { name, report } => entries.push(SummaryEntry::Scores {
                name: name.clone(),
                report: report.clone(),
            }),
            Report::Subclass { name, report } => entries.push(SummaryEntry::Subclass {
                name: name.clone(),
                report: report.clone(),
            }),
            Report::Hubness { name, report } => {
                let curve = format!("{}.hubness.tsv", file_stem(name));
                let path = dir.join(&curve);
                fs::write(&path, hubness_tsv(report))?;
                written.push(path);
                entries.push(SummaryEntry::Hubness {
                    name: name.clone(),
                    k: report.k,
                    similarity: report.similarity,
                    queries: report.queries,
                    support: report.counts.len(),
                    max: report.max,
                    median: report.median,
                    conserved: report.is_conserved(),
                    curve,
                });
            }
        }
    }
    let summary = Summary {
        version: REPORT_VERSION,
        reports: entries,
    };
    let path = dir.join("summary.json");
    fs::write(&path, serde_json::to_string_pretty(&summary)?)?;
    written.insert(0, path);
    Ok(written)
}

pub fn hubness_tsv(r: &HubnessReport) -> String {
    let mut s = String::from("rank\tn_k\tsupport_index\tsentence\thead\tdep\tlabel\thead_form\tdep_form\n");
    for h in &r.top {
        let e = &h.entry;
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            h.rank, h.n_k, h.index, e.sentence, e.head, e.dep, e.label, e.head_form, e.dep_form
        ));
    }
    s
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let s: Summary = serde_json::from_str(&fs::read_to_string(path)?)?;
    if s.version != REPORT_VERSION {
        return Err(Error::Format(format!("report version {} (expected {REPORT_VERSION})", s.version)));
    }
    Ok(s)
}

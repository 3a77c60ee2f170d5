//! Token encoder: word embedding and character CNN, a stacked BiLSTM, and
//! separate dependent/head projections.
//!
//! Sentences in a batch are laid out "sentence order" (ROOT first, then
//! tokens 1..T, sentence after sentence) for embeddings and outputs, and
//! "time major" (row `t * B + b`) inside the recurrent layers. The backward
//! direction reverses each sentence individually so padding never leaks
//! into valid positions.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::treebank::{Sentence, Vocabulary, WordVectors, PAD_CHAR, UNK_CHAR};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub char_filters: usize,
    pub char_window: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// Dimension `d` of the dependent/head features and edge vectors.
    pub out_dim: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            word_dim: 100,
            char_dim: 30,
            char_filters: 30,
            char_window: 3,
            lstm_hidden: 300,
            lstm_layers: 2,
            out_dim: 300,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.word_dim,
            self.char_dim,
            self.char_filters,
            self.char_window,
            self.lstm_hidden,
            self.lstm_layers,
            self.out_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.word_dim + self.char_filters
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmParams {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    word_emb: ParamId,
    root_emb: ParamId,
    char_emb: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    lstm: Vec<[LstmParams; 2]>,
    w_dep: ParamId,
    w_head: ParamId,
}

/// Row bookkeeping for a batch in sentence order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchLayout {
    /// `T + 1` per sentence.
    pub lens: Vec<usize>,
    /// Row of each sentence's ROOT.
    pub offsets: Vec<usize>,
}

impl BatchLayout {
    pub fn new(sentences: &[&Sentence]) -> Self {
        let lens: Vec<usize> = sentences.iter().map(|s| s.len() + 1).collect();
        let mut offsets = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in &lens {
            offsets.push(acc);
            acc += l;
        }
        BatchLayout { lens, offsets }
    }

    pub fn total(&self) -> usize {
        self.lens.iter().sum()
    }

    /// Row of position `k` (0 = ROOT) in sentence `s`.
    pub fn row(&self, s: usize, k: usize) -> usize {
        self.offsets[s] + k
    }
}

pub struct TokenEmbeddings {
    /// `[rows, word_dim + char_filters]` in sentence order.
    pub matrix: Var,
    pub layout: BatchLayout,
}

pub struct BatchFeatures {
    /// `[rows, d]` dependent features in sentence order.
    pub dep: Var,
    /// `[rows, d]` head features in sentence order.
    pub head: Var,
    pub layout: BatchLayout,
}

/// Per-sentence dependent and head vectors for positions `0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenFeatures {
    pub dep: Tensor,
    pub head: Tensor,
}

impl TokenFeatures {
    /// Number of positions including ROOT.
    pub fn len(&self) -> usize {
        self.dep.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.dep.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.dep.cols()
    }
}

impl Encoder {
    /// Registers fresh parameters. With `pretrained`, word rows come from the
    /// vectors (exact, then lowercased lookup) and the table is frozen.
    pub fn new<R: Rng>(
        config: EncoderConfig,
        vocab: &Vocabulary,
        store: &mut ParamStore,
        rng: &mut R,
        pretrained: Option<&WordVectors>,
    ) -> Result<Self> {
        config.validate()?;
        let mut config = config;
        let word_table = match pretrained {
            Some(wv) => {
                config.word_dim = wv.dim;
                let mut t = Tensor::uniform(vocab.num_words(), wv.dim, 0.1, rng);
                for (id, w) in vocab.words.iter().enumerate().skip(2) {
                    if let Some(v) = wv.lookup(w) {
                        t.data_mut()[id * wv.dim..(id + 1) * wv.dim].copy_from_slice(v);
                    }
                }
                t
            }
            None => Tensor::uniform(vocab.num_words(), config.word_dim, 0.1, rng),
        };
        let c = &config;
        let word_emb = store.add("enc.word_emb", word_table, pretrained.is_none());
        let root_emb = store.add("enc.root_emb", Tensor::uniform(1, c.word_dim, 0.1, rng), true);
        let char_emb = store.add("enc.char_emb", Tensor::uniform(vocab.num_chars(), c.char_dim, 0.1, rng), true);
        let conv_w = store.add(
            "enc.char_conv_w",
            Tensor::glorot(c.char_window * c.char_dim, c.char_filters, rng),
            true,
        );
        let conv_b = store.add("enc.char_conv_b", Tensor::zeros(1, c.char_filters), true);
        let h = c.lstm_hidden;
        let mut lstm = Vec::with_capacity(c.lstm_layers);
        for layer in 0..c.lstm_layers {
            let input = if layer == 0 { c.token_dim() } else { 2 * h };
            let mut make = |dir: &str| {
                let mut bias = Tensor::zeros(1, 4 * h);
                bias.data_mut()[h..2 * h].fill(1.0);
                LstmParams {
                    w_ih: store.add(format!("enc.lstm{layer}.{dir}.w_ih"), Tensor::glorot(input, 4 * h, rng), true),
                    w_hh: store.add(format!("enc.lstm{layer}.{dir}.w_hh"), Tensor::glorot(h, 4 * h, rng), true),
                    bias: store.add(format!("enc.lstm{layer}.{dir}.b"), bias, true),
                }
            };
            let fwd = make("fwd");
            let bwd = make("bwd");
            lstm.push([fwd, bwd]);
        }
        let w_dep = store.add("enc.w_dep", Tensor::glorot(2 * h, c.out_dim, rng), true);
        let w_head = store.add("enc.w_head", Tensor::glorot(2 * h, c.out_dim, rng), true);
        Ok(Encoder {
            config,
            word_emb,
            root_emb,
            char_emb,
            conv_w,
            conv_b,
            lstm,
            w_dep,
            w_head,
        })
    }

    /// Re-binds parameter ids by name in a loaded store.
    pub fn bind(config: EncoderConfig, store: &ParamStore) -> Result<Self> {
        let id = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {name}")))
        };
        let mut lstm = Vec::new();
        for layer in 0..config.lstm_layers {
            let p = |dir: &str| -> Result<LstmParams> {
                Ok(LstmParams {
                    w_ih: id(&format!("enc.lstm{layer}.{dir}.w_ih"))?,
                    w_hh: id(&format!("enc.lstm{layer}.{dir}.w_hh"))?,
                    bias: id(&format!("enc.lstm{layer}.{dir}.b"))?,
                })
            };
            lstm.push([p("fwd")?, p("bwd")?]);
        }
        Ok(Encoder {
            word_emb: id("enc.word_emb")?,
            root_emb: id("enc.root_emb")?,
            char_emb: id("enc.char_emb")?,
            conv_w: id("enc.char_conv_w")?,
            conv_b: id("enc.char_conv_b")?,
            w_dep: id("enc.w_dep")?,
            w_head: id("enc.w_head")?,
            lstm,
            config,
        })
    }

    /// `[word embedding; char-CNN]` per position; ROOT uses its own learned
    /// word vector and a zero character vector.
    pub fn embed_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        sentences: &[&Sentence],
    ) -> Result<TokenEmbeddings> {
        let layout = BatchLayout::new(sentences);
        let b = sentences.len();

        let mut word_ids = Vec::new();
        let mut uniq: HashMap<&str, usize> = HashMap::new();
        let mut uniq_forms: Vec<&str> = Vec::new();
        let mut word_index = Vec::with_capacity(layout.total());
        let mut char_index = Vec::with_capacity(layout.total());
        for (s, sent) in sentences.iter().enumerate() {
            word_index.push(Some(s));
            char_index.push(None);
            for tok in &sent.tokens {
                word_index.push(Some(b + word_ids.len()));
                word_ids.push(vocab.word_id(&tok.form));
                let next = uniq_forms.len();
                let u = *uniq.entry(tok.form.as_str()).or_insert_with(|| {
                    uniq_forms.push(tok.form.as_str());
                    next
                });
                char_index.push(Some(u));
            }
        }

        let table = g.param(store, self.word_emb);
        let root = g.param(store, self.root_emb);
        let roots = g.gather_rows(root, &vec![Some(0); b])?;
        let words = if word_ids.is_empty() {
            roots
        } else {
            let w = g.embedding(table, &word_ids)?;
            g.concat_rows(&[roots, w])?
        };
        let word_part = g.gather_rows(words, &word_index)?;

        let char_part = if uniq_forms.is_empty() {
            g.constant(Tensor::zeros(layout.total(), self.config.char_filters))
        } else {
            let cnn = self.char_cnn(g, store, vocab, &uniq_forms)?;
            g.gather_rows(cnn, &char_index)?
        };
        let matrix = g.concat_cols(&[word_part, char_part])?;
        let matrix = g.dropout(matrix, self.config.dropout)?;
        Ok(TokenEmbeddings { matrix, layout })
    }

    /// Convolution over padded character windows, tanh, max-pool per word.
    fn char_cnn(&self, g: &mut Graph, store: &ParamStore, vocab: &Vocabulary, forms: &[&str]) -> Result<Var> {
        let w = self.config.char_window;
        let left = (w - 1) / 2;
        let right = w - 1 - left;
        let mut cols: Vec<Vec<usize>> = vec![Vec::new(); w];
        let mut groups = Vec::with_capacity(forms.len());
        let mut start = 0;
        for form in forms {
            let mut ids = vocab.char_ids(form);
            if ids.is_empty() {
                ids.push(UNK_CHAR);
            }
            let mut padded = vec![PAD_CHAR; left];
            padded.extend_from_slice(&ids);
            padded.extend(std::iter::repeat_n(PAD_CHAR, right));
            let positions = ids.len();
            for p in 0..positions {
                for (o, col) in cols.iter_mut().enumerate() {
                    col.push(padded[p + o]);
                }
            }
            groups.push((start, start + positions));
            start += positions;
        }
        let table = g.param(store, self.char_emb);
        let mut windows = Vec::with_capacity(w);
        for col in &cols {
            windows.push(g.embedding(table, col)?);
        }
        let x = g.concat_cols(&windows)?;
        let cw = g.param(store, self.conv_w);
        let cb = g.param(store, self.conv_b);
        let conv = g.affine(x, cw, cb)?;
        let act = g.tanh(conv)?;
        g.max_pool_groups(act, &groups)
    }

    /// Stacked BiLSTM then the dependent/head projections.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, emb: &TokenEmbeddings) -> Result<BatchFeatures> {
        let layout = emb.layout.clone();
        let b = layout.lens.len();
        let tmax = layout.lens.iter().copied().max().unwrap_or(0);
        if tmax == 0 {
            return Err(Error::Config("empty batch".into()));
        }
        let mut to_time = Vec::with_capacity(tmax * b);
        let mut reverse = Vec::with_capacity(tmax * b);
        for t in 0..tmax {
            for s in 0..b {
                let len = layout.lens[s];
                to_time.push((t < len).then(|| layout.offsets[s] + t));
                reverse.push((t < len).then(|| (len - 1 - t) * b + s));
            }
        }
        let mut x = g.gather_rows(emb.matrix, &to_time)?;
        for params in &self.lstm {
            let fwd = self.run_lstm(g, store, x, params[0], b, tmax)?;
            let xr = g.gather_rows(x, &reverse)?;
            let bwd_r = self.run_lstm(g, store, xr, params[1], b, tmax)?;
            let bwd = g.gather_rows(bwd_r, &reverse)?;
            x = g.concat_cols(&[fwd, bwd])?;
            x = g.dropout(x, self.config.dropout)?;
        }
        let mut to_sentence = Vec::with_capacity(layout.total());
        for (s, &len) in layout.lens.iter().enumerate() {
            for t in 0..len {
                to_sentence.push(Some(t * b + s));
            }
        }
        let h = g.gather_rows(x, &to_sentence)?;
        let wd = g.param(store, self.w_dep);
        let wh = g.param(store, self.w_head);
        let dep = g.matmul(h, wd)?;
        let head = g.matmul(h, wh)?;
        Ok(BatchFeatures { dep, head, layout })
    }

    fn run_lstm(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        p: LstmParams,
        b: usize,
        tmax: usize,
    ) -> Result<Var> {
        let h = self.config.lstm_hidden;
        let w_ih = g.param(store, p.w_ih);
        let w_hh = g.param(store, p.w_hh);
        let bias = g.param(store, p.bias);
        let xw = g.affine(x, w_ih, bias)?;
        let mut outputs = Vec::with_capacity(tmax);
        let mut state: Option<(Var, Var)> = None;
        for t in 0..tmax {
            let mut gates = g.slice_rows(xw, t * b, (t + 1) * b)?;
            if let Some((hp, _)) = state {
                let rec = g.matmul(hp, w_hh)?;
                gates = g.add(gates, rec)?;
            }
            let i = g.slice_cols(gates, 0, h)?;
            let i = g.sigmoid(i)?;
            let f = g.slice_cols(gates, h, 2 * h)?;
            let f = g.sigmoid(f)?;
            let cand = g.slice_cols(gates, 2 * h, 3 * h)?;
            let cand = g.tanh(cand)?;
            let o = g.slice_cols(gates, 3 * h, 4 * h)?;
            let o = g.sigmoid(o)?;
            let ic = g.mul(i, cand)?;
            let c = match state {
                Some((_, cp)) => {
                    let fc = g.mul(f, cp)?;
                    g.add(fc, ic)?
                }
                None => ic,
            };
            let tc = g.tanh(c)?;
            let hn = g.mul(o, tc)?;
            outputs.push(hn);
            state = Some((hn, c));
        }
        g.concat_rows(&outputs)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        vocab: &Vocabulary,
        sentences: &[&Sentence],
    ) -> Result<BatchFeatures> {
        let emb = self.embed_tokens(g, store, vocab, sentences)?;
        self.encode(g, store, &emb)
    }

    /// Inference-mode features, one entry per sentence.
    pub fn features(&self, store: &ParamStore, vocab: &Vocabulary, sentences: &[&Sentence]) -> Result<Vec<TokenFeatures>> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(32) {
            let mut g = Graph::new(false, 0);
            let f = self.forward(&mut g, store, vocab, chunk)?;
            out.extend(split_features(&g, &f));
        }
        Ok(out)
    }
}

/// Copies batch features out of a graph into per-sentence tensors.
pub fn split_features(g: &Graph, f: &BatchFeatures) -> Vec<TokenFeatures> {
    let (dep, head) = (g.value(f.dep), g.value(f.head));
    let d = dep.cols();
    f.layout
        .lens
        .iter()
        .zip(&f.layout.offsets)
        .map(|(&len, &off)| TokenFeatures {
            dep: Tensor::mat(len, d, dep.data()[off * d..(off + len) * d].to_vec()),
            head: Tensor::mat(len, d, head.data()[off * d..(off + len) * d].to_vec()),
        })
        .collect()
}

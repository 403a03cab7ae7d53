//! Bidirectional transformer language model with an optional chunk path.
//!
//! Tokens are embedded by a character CNN and encoded by one causal
//! transformer stack per reading direction. With the chunk path, each chunk
//! is represented by a projection of its label embedding and the top-layer
//! states at its boundaries, contextualized by a second causal stack over
//! chunk order, and fused with the token state at every position that has a
//! completed chunk behind it. Both directions share the output softmax.
//!
//! Sentences are wrapped in `<s>` and `</s>`; chunk spans are shifted by one
//! accordingly. The forward model predicts position `j + 1` from position
//! `j`, the backward model position `j - 1`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use msync_autodiff::{checkpoint, Adam, Graph, LearningRate, NoamSchedule, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chunk::{context_indices, validate_spans, ChunkLabel, ChunkSpan, Direction, Span};
use crate::chunker::adopt;
use crate::corpus::{build_vocab, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{CharCnn, Embedding, Filters, Linear, TransformerStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Baseline,
    EndToEnd,
    Frozen,
    FineTuned,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [Scheme::Baseline, Scheme::EndToEnd, Scheme::Frozen, Scheme::FineTuned];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Baseline => "baseline",
            Scheme::EndToEnd => "end_to_end",
            Scheme::Frozen => "frozen",
            Scheme::FineTuned => "fine_tuned",
        }
    }

    /// Whether the scheme starts from a baseline checkpoint.
    pub fn needs_init(self) -> bool {
        matches!(self, Scheme::Frozen | Scheme::FineTuned)
    }

    pub fn has_chunk_path(self) -> bool {
        self != Scheme::Baseline
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s || x.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme `{s}`")))
    }
}

/// Which representation feeds the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Msync,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "msync" => Ok(Mode::Msync),
            _ => Err(Error::Config(format!("unknown mode `{s}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Msync => "msync",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftmaxMode {
    Full,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MSynCConfig {
    pub d_model: usize,
    pub seq_layers: usize,
    pub syn_layers: usize,
    pub label_emb_dim: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub char_emb_dim: usize,
    pub char_filters: Filters,
    pub dropout: f64,
    pub vocab_size: usize,
    pub min_count: usize,
    pub softmax: SoftmaxMode,
    pub n_samples: usize,
    pub scheme: Scheme,
    pub warmup: usize,
    pub lr_factor: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for MSynCConfig {
    fn default() -> Self {
        MSynCConfig {
            d_model: 512,
            seq_layers: 6,
            syn_layers: 2,
            label_emb_dim: 128,
            heads: 4,
            ff_dim: 1024,
            char_emb_dim: 16,
            char_filters: Filters(vec![(1, 32), (2, 32), (3, 64), (4, 128), (5, 256)]),
            dropout: 0.1,
            vocab_size: 20_000,
            min_count: 1,
            softmax: SoftmaxMode::Full,
            n_samples: 64,
            scheme: Scheme::Baseline,
            warmup: 6000,
            lr_factor: 1.0,
            batch_size: 32,
            epochs: 1,
            clip_norm: 1.0,
            seed: 13,
        }
    }
}

impl MSynCConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("seq_layers", self.seq_layers),
            ("label_emb_dim", self.label_emb_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("char_emb_dim", self.char_emb_dim),
            ("batch_size", self.batch_size),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config("d_model must be divisible by heads".into()));
        }
        if self.scheme.has_chunk_path() && self.syn_layers == 0 {
            return Err(Error::Config("the chunk path needs syn_layers >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        if self.softmax == SoftmaxMode::Sampled && self.n_samples == 0 {
            return Err(Error::Config("sampled softmax needs n_samples >= 1".into()));
        }
        Ok(())
    }

    /// Input width of the chunk projection.
    pub fn f_proj_in(&self) -> usize {
        2 * self.d_model + self.label_emb_dim
    }
}

/// Tokens with optional chunk spans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkedSentence {
    pub tokens: Vec<String>,
    pub spans: Option<Vec<ChunkSpan>>,
}

impl ChunkedSentence {
    pub fn new(tokens: Vec<String>, spans: Vec<ChunkSpan>) -> Self {
        ChunkedSentence {
            tokens,
            spans: Some(spans),
        }
    }

    pub fn plain(tokens: Vec<String>) -> Self {
        ChunkedSentence { tokens, spans: None }
    }
}

/// Index of the NULL row in the label table.
pub const NULL_LABEL: usize = ChunkLabel::ALL.len();

fn dir_index(d: Direction) -> usize {
    match d {
        Direction::Forward => 0,
        Direction::Backward => 1,
    }
}

#[derive(Debug, Clone)]
struct ChunkPath {
    labels: Embedding,
    f_proj: Linear,
    syn: [TransformerStack; 2],
    null: [ParamId; 2],
    u_proj: [Linear; 2],
}

#[derive(Debug, Clone)]
pub struct MSynCModel<T: Scalar> {
    pub config: MSynCConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<T>,
    char_cnn: CharCnn,
    char_proj: Linear,
    seq: [TransformerStack; 2],
    softmax_w: ParamId,
    softmax_b: ParamId,
    chunks: Option<ChunkPath>,
}

pub type MSynC = MSynCModel<f32>;

/// Graph values of one encoded sentence.
pub struct Encoded {
    /// `[L, d]` character embeddings (after projection).
    pub emb: Var,
    /// Per direction, each e_seq layer `[L, d]`.
    pub seq: [Vec<Var>; 2],
    /// Per direction, each e_syn layer aligned to positions `[L, d]`.
    pub syn: Option<[Vec<Var>; 2]>,
    /// Per direction, the fused representation `[L, d]`.
    pub msync: Option<[Var; 2]>,
}

const KIND: &str = "msync";

/// Parameter-name prefixes of the token path.
pub const TOKEN_PATH_PREFIXES: [&str; 3] = ["char_cnn.", "char_proj.", "seq."];

pub fn is_token_path(name: &str) -> bool {
    TOKEN_PATH_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Parameter-name prefixes of the chunk path.
pub const CHUNK_PATH_PREFIXES: [&str; 5] = ["label_emb.", "f_proj.", "syn.", "null.", "u_proj."];

impl<T: Scalar> MSynCModel<T> {
    pub fn new(config: MSynCConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let char_cnn = CharCnn::new(&mut store, &mut rng, "char_cnn", config.char_emb_dim, &config.char_filters)?;
        let char_proj = Linear::new(&mut store, &mut rng, "char_proj", char_cnn.out_dim, d, true)?;
        let stack = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, layers: usize| {
            TransformerStack::new(store, rng, name, layers, d, config.heads, config.ff_dim)
        };
        let seq = [
            stack(&mut store, &mut rng, "seq.fwd", config.seq_layers)?,
            stack(&mut store, &mut rng, "seq.bwd", config.seq_layers)?,
        ];
        let softmax_w = store.add("softmax.weight", msync_autodiff::xavier_uniform(&mut rng, vocab.len(), d))?;
        let softmax_b = store.add("softmax.bias", Tensor::zeros(vec![vocab.len()]))?;
        let chunks = if config.scheme.has_chunk_path() {
            let labels = Embedding::new(&mut store, &mut rng, "label_emb", NULL_LABEL + 1, config.label_emb_dim)?;
            let f_proj = Linear::new(&mut store, &mut rng, "f_proj", config.f_proj_in(), d, false)?;
            let syn = [
                stack(&mut store, &mut rng, "syn.fwd", config.syn_layers)?,
                stack(&mut store, &mut rng, "syn.bwd", config.syn_layers)?,
            ];
            let null = [
                store.add("null.fwd", msync_autodiff::uniform(&mut rng, vec![1, d], 0.1))?,
                store.add("null.bwd", msync_autodiff::uniform(&mut rng, vec![1, d], 0.1))?,
            ];
            let u_proj = [
                Linear::new(&mut store, &mut rng, "u_proj.fwd", 2 * d, d, false)?,
                Linear::new(&mut store, &mut rng, "u_proj.bwd", 2 * d, d, false)?,
            ];
            Some(ChunkPath {
                labels,
                f_proj,
                syn,
                null,
                u_proj,
            })
        } else {
            None
        };
        Ok(MSynCModel {
            config,
            vocab,
            store,
            char_cnn,
            char_proj,
            seq,
            softmax_w,
            softmax_b,
            chunks,
        })
    }

    pub fn has_chunk_path(&self) -> bool {
        self.chunks.is_some()
    }

    pub fn softmax_weight(&self) -> ParamId {
        self.softmax_w
    }

    pub fn softmax_bias(&self) -> ParamId {
        self.softmax_b
    }

    /// Ids of every parameter whose name starts with one of `prefixes`.
    pub fn params_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
            .map(|(id, _, _)| id)
            .collect()
    }

    fn check_mode(&self, mode: Mode) -> Result<()> {
        if mode == Mode::Msync && self.chunks.is_none() {
            return Err(Error::IncompatibleCheckpoint("model has no chunk path".into()));
        }
        Ok(())
    }

    fn wrap(tokens: &[String]) -> Vec<String> {
        let mut w = Vec::with_capacity(tokens.len() + 2);
        w.push(Vocabulary::RESERVED[Vocabulary::BOS].to_string());
        w.extend(tokens.iter().cloned());
        w.push(Vocabulary::RESERVED[Vocabulary::EOS].to_string());
        w
    }

    /// Character-CNN embeddings projected to `d_model`, `[n, d]`.
    pub fn embed_tokens_var<S: AsRef<str>>(&self, g: &mut Graph<T>, tokens: &[S]) -> Var {
        let c = self.char_cnn.forward(g, &self.store, tokens);
        self.char_proj.forward(g, &self.store, c)
    }

    pub fn embed_tokens<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Tensor<T>> {
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        let mut g = Graph::inference();
        let v = self.embed_tokens_var(&mut g, tokens);
        Ok(g.value(v).clone())
    }

    /// Every e_seq layer for `direction`.
    pub fn encode_sequence(&self, embeddings: &Tensor<T>, direction: Direction) -> Vec<Tensor<T>> {
        let mut g = Graph::inference();
        let x = g.constant(embeddings.clone());
        let outs = self.seq[dir_index(direction)].forward(&mut g, &self.store, x, direction, 0.0);
        outs.into_iter().map(|v| g.value(v).clone()).collect()
    }

    /// Contextualized chunk representations, one entry per e_syn layer, each
    /// `[C, d]`. Empty when there are no spans.
    pub fn chunk_reps_var(
        &self,
        g: &mut Graph<T>,
        top: Var,
        spans: &[ChunkSpan],
        direction: Direction,
        dropout: f64,
    ) -> Result<Vec<Var>> {
        let path = self.chunks.as_ref().ok_or(Error::MissingInit("chunk path".into()))?;
        let len = g.value(top).rows();
        validate_spans(spans, len)?;
        if spans.is_empty() {
            return Ok(Vec::new());
        }
        let labels: Vec<usize> = spans.iter().map(|s| s.label.index()).collect();
        let begins: Vec<usize> = spans.iter().map(|s| s.begin).collect();
        let ends: Vec<usize> = spans.iter().map(|s| s.end).collect();
        let lab = path.labels.forward(g, &self.store, &labels);
        let hb = g.gather(top, &begins);
        let he = g.gather(top, &ends);
        let x = g.concat(&[lab, hb, he]);
        let f = path.f_proj.forward(g, &self.store, x);
        Ok(path.syn[dir_index(direction)].forward(g, &self.store, f, direction, dropout))
    }

    /// Top-layer chunk representations for `h` (the top e_seq layer).
    pub fn build_chunk_reps(&self, h: &Tensor<T>, spans: &[ChunkSpan], direction: Direction) -> Result<Tensor<T>> {
        let mut g = Graph::inference();
        let top = g.constant(h.clone());
        let layers = self.chunk_reps_var(&mut g, top, spans, direction, 0.0)?;
        Ok(match layers.last() {
            Some(&v) => g.value(v).clone(),
            None => Tensor::zeros(vec![0, self.config.d_model]),
        })
    }

    /// Rows of `g` (or the NULL vector) chosen by each position's context.
    fn align(&self, g: &mut Graph<T>, layer: Option<Var>, contexts: &[Option<usize>], direction: Direction) -> Var {
        let path = self.chunks.as_ref().unwrap();
        let null = g.param(&self.store, path.null[dir_index(direction)]);
        let (table, n) = match layer {
            Some(l) => {
                let n = g.value(l).rows();
                (g.concat_rows(&[l, null]), n)
            }
            None => (null, 0),
        };
        let ids: Vec<usize> = contexts.iter().map(|c| c.unwrap_or(n)).collect();
        g.gather(table, &ids)
    }

    fn fuse(&self, g: &mut Graph<T>, h: Var, aligned: Var, direction: Direction) -> Var {
        let path = self.chunks.as_ref().unwrap();
        let x = g.concat(&[h, aligned]);
        path.u_proj[dir_index(direction)].forward(g, &self.store, x)
    }

    /// `W^T [h; g]` for a single position.
    pub fn msync_embed(&self, h: &[T], g_ctx: &[T], direction: Direction) -> Result<Vec<T>> {
        let d = self.config.d_model;
        self.check_mode(Mode::Msync)?;
        if h.len() != d || g_ctx.len() != d {
            return Err(Error::Tensor(msync_autodiff::Error::ShapeMismatch(format!(
                "msync_embed expects two {d}-vectors"
            ))));
        }
        let mut gr = Graph::inference();
        let hv = gr.constant(Tensor::matrix(1, d, h.to_vec())?);
        let gv = gr.constant(Tensor::matrix(1, d, g_ctx.to_vec())?);
        let out = self.fuse(&mut gr, hv, gv, direction);
        Ok(gr.value(out).data().to_vec())
    }

    /// Learned NULL context vector.
    pub fn null_context(&self, direction: Direction) -> Option<&Tensor<T>> {
        self.chunks.as_ref().map(|p| self.store.get(p.null[dir_index(direction)]))
    }

    /// Runs both directions over `<s> tokens </s>`.
    pub fn encode(&self, g: &mut Graph<T>, sent: &ChunkedSentence, mode: Mode, dropout: f64) -> Result<Encoded> {
        if sent.tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        self.check_mode(mode)?;
        let wrapped = Self::wrap(&sent.tokens);
        let len = wrapped.len();
        let emb = self.embed_tokens_var(g, &wrapped);
        let emb_in = g.dropout(emb, dropout);
        let seq = [
            self.seq[0].forward(g, &self.store, emb_in, Direction::Forward, dropout),
            self.seq[1].forward(g, &self.store, emb_in, Direction::Backward, dropout),
        ];
        if mode == Mode::Baseline {
            return Ok(Encoded {
                emb,
                seq,
                syn: None,
                msync: None,
            });
        }
        let spans = sent.spans.as_ref().ok_or(Error::MissingSpans(0))?;
        validate_spans(spans, sent.tokens.len())?;
        let shifted: Vec<ChunkSpan> = spans.iter().map(|s| Span::new(s.begin + 1, s.end + 1, s.label)).collect();
        let mut syn_out: [Vec<Var>; 2] = [Vec::new(), Vec::new()];
        let mut fused = Vec::with_capacity(2);
        for dir in Direction::BOTH {
            let di = dir_index(dir);
            let top = *seq[di].last().unwrap();
            let layers = self.chunk_reps_var(g, top, &shifted, dir, dropout)?;
            let contexts = context_indices(&shifted, len, dir);
            let mut aligned = Vec::with_capacity(self.config.syn_layers);
            for l in 0..self.config.syn_layers {
                aligned.push(self.align(g, layers.get(l).copied(), &contexts, dir));
            }
            let m = self.fuse(g, top, *aligned.last().unwrap(), dir);
            syn_out[di] = aligned;
            fused.push(m);
        }
        Ok(Encoded {
            emb,
            seq,
            syn: Some(syn_out),
            msync: Some([fused[0], fused[1]]),
        })
    }

    /// Rows feeding the softmax: forward rows predict positions `1..L`, then
    /// backward rows predict positions `0..L-1`. Returns the row matrices and
    /// target ids.
    fn prediction_rows(
        &self,
        g: &mut Graph<T>,
        sent: &ChunkedSentence,
        mode: Mode,
        dropout: f64,
    ) -> Result<([Var; 2], [Vec<usize>; 2])> {
        let enc = self.encode(g, sent, mode, dropout)?;
        let ids: Vec<usize> = Self::wrap(&sent.tokens).iter().map(|t| self.vocab.id(t)).collect();
        let len = ids.len();
        let reps = match enc.msync {
            Some(m) => m,
            None => [*enc.seq[0].last().unwrap(), *enc.seq[1].last().unwrap()],
        };
        let fwd = g.slice_rows(reps[0], 0, len - 1);
        let bwd = g.slice_rows(reps[1], 1, len - 1);
        let fwd = g.dropout(fwd, dropout);
        let bwd = g.dropout(bwd, dropout);
        Ok(([fwd, bwd], [ids[1..].to_vec(), ids[..len - 1].to_vec()]))
    }

    fn full_logits(&self, g: &mut Graph<T>, rows: Var) -> Var {
        let w = g.param(&self.store, self.softmax_w);
        let b = g.param(&self.store, self.softmax_b);
        let z = g.matmul_t(rows, w);
        g.add_row(z, b)
    }

    /// Forward and backward logits of one sentence, `[n+1, V]` each. Forward
    /// row `r` predicts wrapped position `r + 1`; backward row `r` predicts
    /// wrapped position `r`.
    pub fn logits(&self, sent: &ChunkedSentence, mode: Mode) -> Result<[Tensor<T>; 2]> {
        let mut g = Graph::inference();
        let (rows, _) = self.prediction_rows(&mut g, sent, mode, 0.0)?;
        let f = self.full_logits(&mut g, rows[0]);
        let b = self.full_logits(&mut g, rows[1]);
        Ok([g.value(f).clone(), g.value(b).clone()])
    }

    /// Mean negative log-likelihood of `batch` on `g`, over both directions
    /// and every predicted position. With `sampled = Some(rng)` the softmax
    /// is restricted to the batch targets plus uniformly drawn negatives.
    pub fn loss_var(
        &self,
        g: &mut Graph<T>,
        batch: &[ChunkedSentence],
        mode: Mode,
        dropout: f64,
        sampled: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::EmptyTrainingSet);
        }
        let mut rows = Vec::with_capacity(2 * batch.len());
        let mut targets = Vec::new();
        for (i, s) in batch.iter().enumerate() {
            if mode == Mode::Msync && s.spans.is_none() {
                return Err(Error::MissingSpans(i));
            }
            let (r, t) = self.prediction_rows(g, s, mode, dropout)?;
            rows.extend(r);
            targets.extend(t[0].iter().chain(&t[1]));
        }
        let all = g.concat_rows(&rows);
        let logits = match sampled {
            None => self.full_logits(g, all),
            Some(rng) => {
                let mut cand: Vec<usize> = targets.clone();
                cand.extend((0..self.config.n_samples).map(|_| rng.gen_range(0..self.vocab.len())));
                cand.sort_unstable();
                cand.dedup();
                let w = g.param(&self.store, self.softmax_w);
                let b = g.param(&self.store, self.softmax_b);
                let wc = g.gather(w, &cand);
                let b2 = g.reshape(b, vec![self.vocab.len(), 1]);
                let bc = g.gather(b2, &cand);
                let bc = g.reshape(bc, vec![cand.len()]);
                let z = g.matmul_t(all, wc);
                for t in &mut targets {
                    *t = cand.binary_search(t).unwrap();
                }
                g.add_row(z, bc)
            }
        };
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Mean NLL of `batch` with the full softmax and no dropout.
    pub fn lm_loss(&self, batch: &[ChunkedSentence], mode: Mode) -> Result<T> {
        let mut g = Graph::inference();
        let l = self.loss_var(&mut g, batch, mode, 0.0, None)?;
        Ok(g.value(l).item())
    }

    /// Frozen per-token representations (sentence boundaries removed).
    pub fn extract_reps(&self, sent: &ChunkedSentence, mode: Mode) -> Result<RepStack<T>> {
        let mut g = Graph::inference();
        let enc = self.encode(&mut g, sent, mode, 0.0)?;
        let n = sent.tokens.len();
        let mut names = Vec::new();
        let mut layers = Vec::new();
        let mut push = |g: &mut Graph<T>, name: String, a: Var, b: Var| {
            let both = g.concat(&[a, b]);
            let inner = g.slice_rows(both, 1, n);
            names.push(name);
            layers.push(g.value(inner).clone());
        };
        push(&mut g, "char".into(), enc.emb, enc.emb);
        for l in 0..enc.seq[0].len() {
            push(&mut g, format!("seq.{l}"), enc.seq[0][l], enc.seq[1][l]);
        }
        if let (Some(syn), Some(m)) = (&enc.syn, &enc.msync) {
            for l in 0..syn[0].len() {
                push(&mut g, format!("syn.{l}"), syn[0][l], syn[1][l]);
            }
            push(&mut g, "msync".into(), m[0], m[1]);
        }
        Ok(RepStack { names, layers })
    }

    pub fn metadata(&self, extra: serde_json::Value) -> serde_json::Value {
        serde_json::json!({
            "kind": KIND,
            "scheme": self.config.scheme,
            "config": self.config,
            "vocab": self.vocab.tokens()[Vocabulary::RESERVED.len()..],
            "provenance": extra,
        })
    }

    pub fn save(&self, dir: &Path, extra: serde_json::Value) -> Result<()> {
        checkpoint::save(dir, &self.store, self.metadata(extra))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, meta) =
            checkpoint::load::<T>(dir).map_err(|e| Error::IncompatibleCheckpoint(format!("{}: {e}", dir.display())))?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{} is not a language-model checkpoint",
                dir.display()
            )));
        }
        let config: MSynCConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        let vocab: Vec<String> =
            serde_json::from_value(meta["vocab"].clone()).map_err(|e| Error::IncompatibleCheckpoint(e.to_string()))?;
        let mut model = Self::new(config, Vocabulary::from_tokens(vocab))?;
        adopt(&mut model.store, store)?;
        Ok(model)
    }

    /// Copies the token path and softmax from a baseline model.
    pub fn init_from(&mut self, base: &MSynCModel<T>) -> Result<()> {
        if base.vocab.tokens() != self.vocab.tokens() {
            return Err(Error::IncompatibleInit("vocabularies differ".into()));
        }
        for (_, name, t) in base.store.iter() {
            if self.store.id(name).is_none() {
                continue;
            }
            self.store
                .assign(name, t.clone())
                .map_err(|e| Error::IncompatibleInit(format!("`{name}`: {e}")))?;
        }
        let missing: Vec<&str> = self
            .store
            .iter()
            .map(|(_, n, _)| n)
            .filter(|n| is_token_path(n) || n.starts_with("softmax."))
            .filter(|n| base.store.id(n).is_none())
            .collect();
        if let Some(n) = missing.first() {
            return Err(Error::IncompatibleInit(format!("initial checkpoint lacks `{n}`")));
        }
        Ok(())
    }
}

/// Per-layer token representations, all `[n, 2d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RepStack<T> {
    pub names: Vec<String>,
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> RepStack<T> {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, |l| l.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols())
    }

    pub fn bit_eq(&self, other: &RepStack<T>) -> bool {
        self.names == other.names
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.bit_eq(b))
    }
}

/// `gamma * sum_l softmax(w)_l * layer_l`.
pub fn scalar_mix<T: Scalar>(stack: &RepStack<T>, weights: &[T], gamma: T) -> Result<Tensor<T>> {
    if weights.len() != stack.num_layers() {
        return Err(Error::LayerCountMismatch {
            weights: weights.len(),
            layers: stack.num_layers(),
        });
    }
    let mut g = Graph::inference();
    let layers: Vec<Var> = stack.layers.iter().map(|l| g.constant(l.clone())).collect();
    let w = g.constant(Tensor::matrix(1, weights.len(), weights.to_vec())?);
    let gm = g.constant(Tensor::scalar(gamma));
    let out = scalar_mix_var(&mut g, &layers, w, gm);
    Ok(g.value(out).clone())
}

/// Differentiable scalar mix; `w` is `[1, layers]`, `gamma` one element.
pub fn scalar_mix_var<T: Scalar>(g: &mut Graph<T>, layers: &[Var], w: Var, gamma: Var) -> Var {
    let sm = g.softmax(w);
    let mut acc: Option<Var> = None;
    for (l, &layer) in layers.iter().enumerate() {
        let s = g.slice_cols(sm, l, 1);
        let term = g.mul_scalar(layer, s);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    let sum = acc.expect("scalar mix over no layers");
    g.mul_scalar(sum, gamma)
}

/// One optimizer step in the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub mean_nll: f64,
}

pub struct PretrainOutput<T: Scalar> {
    pub model: MSynCModel<T>,
    pub curve: Vec<StepLog>,
    /// Mean NLL on the training corpus before the first update.
    pub initial_nll: f64,
    /// Mean NLL on the training corpus after the last update.
    pub final_nll: f64,
}

/// Header of the loss-curve file written by [`write_curve`].
pub const CURVE_HEADER: &str = "step\tepoch\tlr\tmean_nll";

pub fn write_curve(curve: &[StepLog]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for s in curve {
        out.push_str(&format!("{}\t{}\t{:.6e}\t{:.6}\n", s.step, s.epoch, s.lr, s.mean_nll));
    }
    out
}

/// Mean NLL over `corpus` in batches, full softmax, no dropout.
pub fn evaluate_nll<T: Scalar>(model: &MSynCModel<T>, corpus: &[ChunkedSentence], mode: Mode) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for batch in corpus.chunks(model.config.batch_size.max(1)) {
        let preds: usize = batch.iter().map(|s| 2 * (s.tokens.len() + 1)).sum();
        total += model.lm_loss(batch, mode)?.f64() * preds as f64;
        count += preds;
    }
    if count == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    Ok(total / count as f64)
}

/// Which parameters a scheme updates.
pub fn trainable(scheme: Scheme, name: &str) -> bool {
    match scheme {
        Scheme::Frozen => !is_token_path(name),
        _ => true,
    }
}

/// Training-set vocabulary for a pretraining corpus.
pub fn corpus_vocab(corpus: &[ChunkedSentence], config: &MSynCConfig) -> Vocabulary {
    let tokens: Vec<&[String]> = corpus.iter().map(|s| s.tokens.as_slice()).collect();
    let owned: Vec<Vec<&str>> = tokens.iter().map(|t| t.iter().map(String::as_str).collect()).collect();
    build_vocab(&owned, config.min_count, config.vocab_size)
}

/// Pretrains under `config.scheme`.
///
/// `frozen` and `fine_tuned` start from `init`, a baseline model over the
/// same vocabulary. When `out` is given a checkpoint is written to
/// `out/epoch-<k>` after every epoch and the final model to `out` itself.
pub fn pretrain<T: Scalar>(
    corpus: &[ChunkedSentence],
    config: MSynCConfig,
    init: Option<&MSynCModel<T>>,
    out: Option<&Path>,
    mut progress: impl FnMut(&StepLog),
) -> Result<PretrainOutput<T>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    let scheme = config.scheme;
    let mode = if scheme.has_chunk_path() { Mode::Msync } else { Mode::Baseline };
    if mode == Mode::Msync {
        if let Some(i) = corpus.iter().position(|s| s.spans.is_none()) {
            return Err(Error::MissingSpans(i));
        }
    }
    let vocab = match (scheme.needs_init(), init) {
        (true, None) => return Err(Error::MissingInit(scheme.to_string())),
        (true, Some(base)) => base.vocab.clone(),
        (false, _) => corpus_vocab(corpus, &config),
    };
    let mut model = MSynCModel::<T>::new(config.clone(), vocab)?;
    if scheme.needs_init() {
        let base = init.unwrap();
        let mut expected = base.config.clone();
        expected.scheme = scheme;
        for (k, a, b) in [
            ("d_model", expected.d_model, config.d_model),
            ("seq_layers", expected.seq_layers, config.seq_layers),
            ("heads", expected.heads, config.heads),
            ("ff_dim", expected.ff_dim, config.ff_dim),
            ("char_emb_dim", expected.char_emb_dim, config.char_emb_dim),
        ] {
            if a != b {
                return Err(Error::IncompatibleInit(format!("{k} is {a} in the initial model but {b} here")));
            }
        }
        if expected.char_filters != config.char_filters {
            return Err(Error::IncompatibleInit("character filters differ".into()));
        }
        model.init_from(base)?;
    }

    let frozen: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, n, _)| !trainable(scheme, n))
        .map(|(id, _, _)| id)
        .collect();
    let schedule = LearningRate::Noam(NoamSchedule {
        d_model: config.d_model,
        warmup: config.warmup,
        factor: config.lr_factor,
    });
    let mut adam = Adam::new(&model.store);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut curve = Vec::new();
    let initial_nll = evaluate_nll(&model, corpus, mode)?;
    let names: Vec<String> = model.store.iter().map(|(_, n, _)| n.to_string()).collect();

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<ChunkedSentence> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let step = adam.step_count() + 1;
            let mut g = Graph::training(config.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            g.freeze(frozen.iter().copied());
            let sampled = match config.softmax {
                SoftmaxMode::Full => None,
                SoftmaxMode::Sampled => Some(&mut rng),
            };
            let loss = model.loss_var(&mut g, &batch, mode, config.dropout, sampled)?;
            let value = g.value(loss).item().f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("training loss is {value} at step {step}")));
            }
            let mut grads = g.backward(loss)?.into_param_grads(&model.store);
            if config.clip_norm > 0.0 {
                grads.clip_norm(config.clip_norm);
            }
            if !grads.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient at step {step}")));
            }
            let lr = adam.step(&mut model.store, &grads, &schedule, |id| trainable(scheme, &names[id.index()]))?;
            let entry = StepLog {
                step,
                epoch,
                lr,
                mean_nll: value,
            };
            progress(&entry);
            curve.push(entry);
        }
        if let Some(dir) = out {
            let prov = serde_json::json!({ "epoch": epoch, "steps": adam.step_count() });
            model.save(&dir.join(format!("epoch-{epoch}")), prov)?;
        }
    }
    let final_nll = evaluate_nll(&model, corpus, mode)?;
    if let Some(dir) = out {
        let prov = serde_json::json!({
            "epochs": config.epochs,
            "steps": adam.step_count(),
            "initial_nll": initial_nll,
            "final_nll": final_nll,
        });
        model.save(dir, prov)?;
        std::fs::write(dir.join("loss_curve.tsv"), write_curve(&curve))?;
    }
    Ok(PretrainOutput {
        model,
        curve,
        initial_nll,
        final_nll,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ChunkLabel::*;

    pub(crate) fn toy_config(scheme: Scheme) -> MSynCConfig {
        MSynCConfig {
            d_model: 8,
            seq_layers: 2,
            syn_layers: 1,
            label_emb_dim: 4,
            heads: 2,
            ff_dim: 12,
            char_emb_dim: 4,
            char_filters: Filters(vec![(1, 3), (2, 3)]),
            dropout: 0.0,
            scheme,
            warmup: 10,
            batch_size: 2,
            ..MSynCConfig::default()
        }
    }

    fn sent(s: &str, spans: Vec<ChunkSpan>) -> ChunkedSentence {
        ChunkedSentence::new(s.split(' ').map(str::to_string).collect(), spans)
    }

    fn vocab() -> Vocabulary {
        Vocabulary::from_tokens(["the", "dog", "barks", "."])
    }

    #[test]
    fn f_proj_width() {
        assert_eq!(MSynCConfig::default().f_proj_in(), 1152);
        let m = MSynC::new(toy_config(Scheme::EndToEnd), vocab()).unwrap();
        let w = m.store.get(m.store.id("f_proj.weight").unwrap());
        assert_eq!(w.shape(), &[20, 8]);
        assert!(m.store.id("f_proj.bias").is_none());
        let labels = m.store.get(m.store.id("label_emb.weight").unwrap());
        assert_eq!(labels.shape(), &[12, 4]);
    }

    #[test]
    fn baseline_has_no_chunk_params() {
        let m = MSynC::new(toy_config(Scheme::Baseline), vocab()).unwrap();
        assert!(m.store.iter().all(|(_, n, _)| CHUNK_PATH_PREFIXES.iter().all(|p| !n.starts_with(p))));
        let s = sent("the dog", vec![]);
        assert!(matches!(m.lm_loss(&[s], Mode::Msync), Err(Error::IncompatibleCheckpoint(_))));
    }

    #[test]
    fn missing_spans_reported() {
        let m = MSynC::new(toy_config(Scheme::EndToEnd), vocab()).unwrap();
        let ok = sent("the dog", vec![Span::new(0, 1, Np)]);
        let bad = ChunkedSentence::plain(vec!["dog".into()]);
        assert!(matches!(m.lm_loss(&[ok, bad], Mode::Msync), Err(Error::MissingSpans(1))));
    }

    #[test]
    fn embeddings_context_free() {
        let m = MSynC::new(toy_config(Scheme::Baseline), vocab()).unwrap();
        let e = m.embed_tokens(&["dog", "x", "dog"]).unwrap();
        assert_eq!(e.shape(), &[3, 8]);
        assert_eq!(e.row(0), e.row(2));
    }

    #[test]
    fn no_chunks_uses_null_everywhere() {
        let m = MSynC::new(toy_config(Scheme::EndToEnd), vocab()).unwrap();
        let s = sent("the dog .", vec![]);
        let stack = m.extract_reps(&s, Mode::Msync).unwrap();
        let syn = &stack.layers[stack.names.iter().position(|n| n == "syn.0").unwrap()];
        let nf = m.null_context(Direction::Forward).unwrap();
        let nb = m.null_context(Direction::Backward).unwrap();
        for r in 0..3 {
            assert_eq!(&syn.row(r)[..8], nf.data());
            assert_eq!(&syn.row(r)[8..], nb.data());
        }
    }

    #[test]
    fn stack_inventory() {
        let m = MSynC::new(toy_config(Scheme::EndToEnd), vocab()).unwrap();
        let s = sent("the dog barks", vec![Span::new(0, 1, Np), Span::new(2, 2, Vp)]);
        let b = m.extract_reps(&s, Mode::Baseline).unwrap();
        assert_eq!(b.names, vec!["char", "seq.0", "seq.1"]);
        let x = m.extract_reps(&s, Mode::Msync).unwrap();
        assert_eq!(x.names, vec!["char", "seq.0", "seq.1", "syn.0", "msync"]);
        assert!(x.layers.iter().all(|l| l.shape() == [3, 16]));
    }

    #[test]
    fn mix_edge_cases() {
        let stack = RepStack {
            names: vec!["a".into(), "b".into()],
            layers: vec![Tensor::full(vec![2, 2], 1.0f64), Tensor::full(vec![2, 2], 3.0)],
        };
        let u = scalar_mix(&stack, &[0.0, 0.0], 2.0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 4.0).abs() < 1e-12));
        let z = scalar_mix(&stack, &[0.3, -1.0], 0.0).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let p = scalar_mix(&stack, &[50.0, 0.0], 1.0).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(matches!(
            scalar_mix(&stack, &[1.0], 1.0),
            Err(Error::LayerCountMismatch { weights: 1, layers: 2 })
        ));
    }

    #[test]
    fn schemes_parse() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert_eq!("fine-tuned".parse::<Scheme>().unwrap(), Scheme::FineTuned);
    }
}

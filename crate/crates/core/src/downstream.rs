//! Consumers of frozen representations: a BiLSTM-CRF span tagger with
//! optional chunk-tag features, and per-layer linear probes.

use std::path::Path;

use msync_autodiff::{checkpoint, Adam, Graph, LearningRate, ParamGrads, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunk::{chunk_f1, decode_bioul, encode_bioul, ChunkSpan, Prf, Span, Tag, TagScheme, TagSet};
use crate::chunker::{adopt, gold_tag_ids, ChunkerModel};
use crate::corpus::{build_vocab, TaggedSentence, Vocabulary};
use crate::crf::{crf_nll_var, transition_mask, viterbi, CrfParams, TransitionMask};
use crate::error::{Error, Result};
use crate::msync::{scalar_mix_var, ChunkedSentence, MSynCModel, Mode, RepStack};
use crate::nn::{BiLstm, Embedding, Linear};

/// Initialization bound of the chunk feature table.
pub const CHUNK_FEATURE_INIT: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Language-model checkpoint supplying frozen representations.
    pub rep_checkpoint: Option<String>,
    pub rep_mode: Mode,
    /// Chunker checkpoint used for chunk features and chunk-conditioned
    /// representations.
    pub chunker_checkpoint: Option<String>,
    pub use_chunk_features: bool,
    pub chunk_feature_dim: usize,
    pub word_emb_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub min_count: usize,
    pub max_vocab: usize,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            rep_checkpoint: None,
            rep_mode: Mode::Msync,
            chunker_checkpoint: None,
            use_chunk_features: false,
            chunk_feature_dim: 50,
            word_emb_dim: 50,
            hidden: 100,
            layers: 1,
            dropout: 0.5,
            batch_size: 16,
            epochs: 30,
            patience: 5,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            min_count: 1,
            max_vocab: 50_000,
            seed: 13,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("chunk_feature_dim", self.chunk_feature_dim),
            ("word_emb_dim", self.word_emb_dim),
            ("hidden", self.hidden),
            ("layers", self.layers),
            ("batch_size", self.batch_size),
            ("epochs", self.epochs),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Models that turn task sentences into tagger inputs.
pub struct Features<T: Scalar> {
    pub reps: Option<(MSynCModel<T>, Mode)>,
    pub chunker: Option<ChunkerModel<T>>,
    pub use_chunk_features: bool,
}

/// Per-sentence tagger input.
#[derive(Debug, Clone)]
pub struct TaggerInput<T> {
    pub tokens: Vec<String>,
    pub reps: Option<RepStack<T>>,
    /// BIOUL chunk tag ids (45-tag inventory) from the chunker.
    pub chunk_ids: Option<Vec<usize>>,
}

impl<T: Scalar> Features<T> {
    pub fn none() -> Self {
        Features {
            reps: None,
            chunker: None,
            use_chunk_features: false,
        }
    }

    /// Loads the checkpoints named in `config`.
    pub fn load(config: &TaskConfig) -> Result<Self> {
        let reps = match &config.rep_checkpoint {
            Some(p) => Some((MSynCModel::load(Path::new(p))?, config.rep_mode)),
            None => None,
        };
        let chunker = match &config.chunker_checkpoint {
            Some(p) => Some(ChunkerModel::load(Path::new(p))?),
            None => None,
        };
        let f = Features {
            reps,
            chunker,
            use_chunk_features: config.use_chunk_features,
        };
        f.check()?;
        Ok(f)
    }

    fn check(&self) -> Result<()> {
        let needs_chunks = self.use_chunk_features || matches!(self.reps, Some((_, Mode::Msync)));
        if needs_chunks && self.chunker.is_none() {
            return Err(Error::MissingChunker);
        }
        Ok(())
    }

    /// Number of layers and width of the representation stack.
    pub fn rep_shape(&self) -> Option<(usize, usize)> {
        self.reps.as_ref().map(|(m, mode)| {
            let c = &m.config;
            let layers = match mode {
                Mode::Baseline => 1 + c.seq_layers,
                Mode::Msync => 2 + c.seq_layers + c.syn_layers,
            };
            (layers, 2 * c.d_model)
        })
    }

    pub fn featurize(&self, tokens: &[String]) -> Result<TaggerInput<T>> {
        self.check()?;
        let spans = match &self.chunker {
            Some(c) => Some(c.chunk_sentence(tokens)?.1),
            None => None,
        };
        let chunk_ids = match (&spans, self.use_chunk_features) {
            (Some(s), true) => Some(chunk_tag_ids(s, tokens.len())?),
            _ => None,
        };
        let reps = match &self.reps {
            Some((m, mode)) => {
                let sent = ChunkedSentence {
                    tokens: tokens.to_vec(),
                    spans: spans.clone(),
                };
                Some(m.extract_reps(&sent, *mode)?)
            }
            None => None,
        };
        Ok(TaggerInput {
            tokens: tokens.to_vec(),
            reps,
            chunk_ids,
        })
    }

    pub fn featurize_corpus(&self, corpus: &[TaggedSentence]) -> Result<Vec<TaggerInput<T>>> {
        corpus.iter().map(|s| self.featurize(&s.tokens)).collect()
    }
}

/// BIOUL chunk tag ids of `spans` over `n` tokens.
pub fn chunk_tag_ids(spans: &[ChunkSpan], n: usize) -> Result<Vec<usize>> {
    let tags = TagSet::chunks();
    Ok(encode_bioul(spans, n)?.iter().map(|t| tags.id(t).unwrap()).collect())
}

#[derive(Debug, Clone)]
pub struct TaggerModel<T: Scalar> {
    pub config: TaskConfig,
    pub vocab: Vocabulary,
    pub tags: TagSet<String>,
    pub mask: TransitionMask,
    pub store: ParamStore<T>,
    /// Layer count and width of the frozen representations, if any.
    pub rep_shape: Option<(usize, usize)>,
    words: Embedding,
    chunk_features: Option<Embedding>,
    mix: Option<(ParamId, ParamId)>,
    encoder: BiLstm,
    emit: Linear,
    trans: ParamId,
    start: ParamId,
    end: ParamId,
}

pub type Tagger = TaggerModel<f32>;

const KIND: &str = "tagger";

impl<T: Scalar> TaggerModel<T> {
    pub fn new(
        config: TaskConfig,
        vocab: Vocabulary,
        labels: Vec<String>,
        rep_shape: Option<(usize, usize)>,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let tags = TagSet::new(labels, TagScheme::Bioul);
        let k = tags.len();
        let words = Embedding::new(&mut store, &mut rng, "words", vocab.len(), config.word_emb_dim)?;
        let chunk_features = if config.use_chunk_features {
            Some(Embedding::with_bound(
                &mut store,
                &mut rng,
                "chunk_features",
                TagSet::chunks().len(),
                config.chunk_feature_dim,
                CHUNK_FEATURE_INIT,
            )?)
        } else {
            None
        };
        let mix = match rep_shape {
            Some((layers, _)) => Some((
                store.add("mix.weights", Tensor::zeros(vec![1, layers]))?,
                store.add("mix.gamma", Tensor::full(vec![1], T::one()))?,
            )),
            None => None,
        };
        let input = config.word_emb_dim
            + rep_shape.map_or(0, |(_, w)| w)
            + chunk_features.as_ref().map_or(0, |e| e.dim);
        let encoder = BiLstm::new(
            &mut store,
            &mut rng,
            "encoder",
            input,
            config.hidden,
            config.layers,
            config.dropout,
        )?;
        let emit = Linear::new(&mut store, &mut rng, "emit", encoder.out_dim(), k, true)?;
        let trans = store.add("crf.transitions", Tensor::zeros(vec![k, k]))?;
        let start = store.add("crf.start", Tensor::zeros(vec![k]))?;
        let end = store.add("crf.end", Tensor::zeros(vec![k]))?;
        let mask = transition_mask(&tags);
        Ok(TaggerModel {
            config,
            vocab,
            tags,
            mask,
            store,
            rep_shape,
            words,
            chunk_features,
            mix,
            encoder,
            emit,
            trans,
            start,
            end,
        })
    }

    fn check_input(&self, x: &TaggerInput<T>) -> Result<()> {
        if x.tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        if self.chunk_features.is_some() && x.chunk_ids.is_none() {
            return Err(Error::MissingChunker);
        }
        match (self.rep_shape, &x.reps) {
            (None, _) => Ok(()),
            (Some((l, w)), Some(r)) if r.num_layers() == l && r.width() == w && r.len() == x.tokens.len() => Ok(()),
            (Some(_), _) => Err(Error::IncompatibleCheckpoint(
                "representations do not match the tagger".into(),
            )),
        }
    }

    fn emissions(&self, g: &mut Graph<T>, x: &TaggerInput<T>) -> Result<Var> {
        self.check_input(x)?;
        let ids: Vec<usize> = x.tokens.iter().map(|t| self.vocab.id(t)).collect();
        let mut parts = vec![self.words.forward(g, &self.store, &ids)];
        if let (Some((w, gamma)), Some(reps)) = (self.mix, &x.reps) {
            let layers: Vec<Var> = reps.layers.iter().map(|l| g.constant(l.clone())).collect();
            let w = g.param(&self.store, w);
            let gamma = g.param(&self.store, gamma);
            parts.push(scalar_mix_var(g, &layers, w, gamma));
        }
        if let (Some(table), Some(cids)) = (&self.chunk_features, &x.chunk_ids) {
            parts.push(table.forward(g, &self.store, cids));
        }
        let h = if parts.len() == 1 { parts[0] } else { g.concat(&parts) };
        let h = g.dropout(h, self.config.dropout);
        let h = self.encoder.forward(g, &self.store, h);
        let h = g.dropout(h, self.config.dropout);
        Ok(self.emit.forward(g, &self.store, h))
    }

    fn crf_params(&self) -> CrfParams<T> {
        CrfParams {
            transitions: self.store.get(self.trans).clone(),
            start: self.store.get(self.start).clone(),
            end: self.store.get(self.end).clone(),
            mask: Some(self.mask.clone()),
        }
    }

    pub fn chunk_feature_table(&self) -> Option<&Tensor<T>> {
        self.chunk_features.as_ref().map(|e| self.store.get(e.table))
    }

    /// Constrained Viterbi tags and the spans they encode.
    pub fn predict(&self, x: &TaggerInput<T>) -> Result<(Vec<Tag<String>>, Vec<Span<String>>)> {
        let mut g = Graph::inference();
        let e = self.emissions(&mut g, x)?;
        let (path, _) = viterbi(g.value(e), &self.crf_params())?;
        let tags = self.tags.tags(&path)?;
        let spans = decode_bioul(&tags, true)?;
        Ok((tags, spans))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": KIND,
            "config": self.config,
            "vocab": self.vocab.tokens()[Vocabulary::RESERVED.len()..],
            "labels": self.tags.labels(),
            "rep_shape": self.rep_shape,
        });
        checkpoint::save(dir, &self.store, meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load::<T>(dir)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
            return Err(Error::IncompatibleCheckpoint("not a tagger checkpoint".into()));
        }
        let config: TaskConfig = serde_json::from_value(meta["config"].clone())?;
        let vocab: Vec<String> = serde_json::from_value(meta["vocab"].clone())?;
        let labels: Vec<String> = serde_json::from_value(meta["labels"].clone())?;
        let rep_shape: Option<(usize, usize)> = serde_json::from_value(meta["rep_shape"].clone())?;
        let mut model = Self::new(config, Vocabulary::from_tokens(vocab), labels, rep_shape)?;
        adopt(&mut model.store, store)?;
        Ok(model)
    }
}

/// Span labels occurring in `corpus`, sorted.
pub fn span_labels(corpus: &[TaggedSentence]) -> Result<Vec<String>> {
    let mut labels = Vec::new();
    for (i, s) in corpus.iter().enumerate() {
        for t in s.chunk_tags.as_ref().ok_or(Error::MissingTags(i))? {
            let tag: Tag<String> = t.parse().map_err(|e: Error| Error::InvalidTags {
                sentence: i,
                message: e.to_string(),
            })?;
            if let Some(l) = tag.label() {
                labels.push(l.clone());
            }
        }
    }
    labels.sort();
    labels.dedup();
    Ok(labels)
}

/// Gold spans of a task corpus (BIO or BIOUL columns).
pub fn task_gold_spans(corpus: &[TaggedSentence], tags: &TagSet<String>) -> Result<Vec<Vec<Span<String>>>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = s.chunk_tags.as_ref().ok_or(Error::MissingTags(i))?;
            let ids = gold_tag_ids(t, tags, i)?;
            decode_bioul(&tags.tags(&ids)?, true)
        })
        .collect()
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggerEpoch {
    pub epoch: usize,
    pub mean_nll: f64,
    pub dev: Prf,
}

/// Trains with early stopping on dev F1, keeping the best weights.
pub fn train_tagger<T: Scalar>(
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    config: TaskConfig,
    features: &Features<T>,
    mut progress: impl FnMut(&TaggerEpoch),
) -> Result<(TaggerModel<T>, Vec<TaggerEpoch>)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    config.validate()?;
    if config.use_chunk_features != features.use_chunk_features {
        return Err(Error::Config("use_chunk_features differs between config and features".into()));
    }
    features.check()?;
    let labels = span_labels(train)?;
    let tokens: Vec<Vec<String>> = train.iter().map(|s| s.tokens.clone()).collect();
    let vocab = build_vocab(&tokens, config.min_count, config.max_vocab);
    let mut model = TaggerModel::<T>::new(config.clone(), vocab, labels, features.rep_shape())?;
    let gold: Vec<Vec<usize>> = train
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let t = s.chunk_tags.as_ref().ok_or(Error::MissingTags(i))?;
            if t.len() != s.tokens.len() {
                return Err(Error::RaggedSentence { sentence: i });
            }
            gold_tag_ids(t, &model.tags, i)
        })
        .collect::<Result<_>>()?;
    let inputs = features.featurize_corpus(train)?;
    let dev_inputs = features.featurize_corpus(dev)?;
    let dev_gold = task_gold_spans(dev, &model.tags)?;

    let mut adam = Adam::new(&model.store);
    let lr = LearningRate::Constant(config.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut step: u64 = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let mut g = Graph::training(config.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let trans = g.param(&model.store, model.trans);
            let start = g.param(&model.store, model.start);
            let end = g.param(&model.store, model.end);
            let mut sum: Option<Var> = None;
            for &i in chunk {
                let e = model.emissions(&mut g, &inputs[i])?;
                let l = crf_nll_var(&mut g, e, trans, start, end, &gold[i], Some(&model.mask))?;
                sum = Some(match sum {
                    Some(s) => g.add(s, l),
                    None => l,
                });
            }
            let sum = sum.unwrap();
            let value = g.value(sum).item().f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("tagger loss is {value} at epoch {epoch}")));
            }
            total += value;
            let loss = g.scale(sum, T::lit(1.0 / chunk.len() as f64));
            let mut grads: ParamGrads<T> = g.backward(loss)?.into_param_grads(&model.store);
            if config.clip_norm > 0.0 {
                grads.clip_norm(config.clip_norm);
            }
            adam.step(&mut model.store, &grads, &lr, |_| true)?;
        }
        let dev_prf = if dev.is_empty() {
            Prf::from_counts(0, 0, 0)
        } else {
            score_inputs(&model, &dev_inputs, &dev_gold)?
        };
        let entry = TaggerEpoch {
            epoch,
            mean_nll: total / train.len() as f64,
            dev: dev_prf,
        };
        progress(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(f, _)| dev_prf.f1 > *f) {
            best = Some((dev_prf.f1, model.store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    Ok((model, log))
}

fn score_inputs<T: Scalar>(model: &TaggerModel<T>, inputs: &[TaggerInput<T>], gold: &[Vec<Span<String>>]) -> Result<Prf> {
    let pred = inputs
        .iter()
        .map(|x| model.predict(x).map(|(_, s)| s))
        .collect::<Result<Vec<_>>>()?;
    chunk_f1(gold, &pred)
}

/// Span precision, recall and F1 on a labelled corpus.
pub fn evaluate_tagger<T: Scalar>(model: &TaggerModel<T>, features: &Features<T>, corpus: &[TaggedSentence]) -> Result<Prf> {
    let gold = task_gold_spans(corpus, &model.tags)?;
    let inputs = features.featurize_corpus(corpus)?;
    score_inputs(model, &inputs, &gold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 50,
            learning_rate: 1e-2,
            batch_size: 64,
            seed: 13,
        }
    }
}

/// A single softmax-regression layer over one representation layer.
#[derive(Debug, Clone)]
pub struct LinearProbe<T: Scalar> {
    pub layer: usize,
    pub labels: Vec<String>,
    pub store: ParamStore<T>,
    linear: Linear,
}

fn layer_rows<T: Scalar>(stacks: &[RepStack<T>], labels: &[Vec<String>], layer: usize) -> Result<Tensor<T>> {
    if stacks.len() != labels.len() {
        return Err(Error::LengthMismatch {
            gold: labels.len(),
            pred: stacks.len(),
        });
    }
    let mut data = Vec::new();
    let mut width = 0;
    for (i, (s, l)) in stacks.iter().zip(labels).enumerate() {
        if s.len() != l.len() {
            return Err(Error::LabelLengthMismatch {
                sentence: i,
                labels: l.len(),
                tokens: s.len(),
            });
        }
        let t = s.layers.get(layer).ok_or(Error::LayerCountMismatch {
            weights: layer + 1,
            layers: s.num_layers(),
        })?;
        width = t.cols();
        data.extend_from_slice(t.data());
    }
    Ok(Tensor::matrix(data.len() / width.max(1), width, data)?)
}

/// Trains a linear probe on layer `layer` of `stacks`.
pub fn train_probe<T: Scalar>(
    stacks: &[RepStack<T>],
    labels: &[Vec<String>],
    layer: usize,
    config: &ProbeConfig,
) -> Result<LinearProbe<T>> {
    let x = layer_rows(stacks, labels, layer)?;
    if x.rows() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    let mut inventory: Vec<String> = labels.iter().flatten().cloned().collect();
    inventory.sort();
    inventory.dedup();
    let y: Vec<usize> = labels
        .iter()
        .flatten()
        .map(|l| inventory.binary_search(l).unwrap())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(layer as u64));
    let mut store = ParamStore::new();
    let linear = Linear::new(&mut store, &mut rng, "probe", x.cols(), inventory.len(), true)?;
    let mut adam = Adam::new(&store);
    let lr = LearningRate::Constant(config.learning_rate);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut g = Graph::new();
            let rows: Vec<T> = chunk.iter().flat_map(|&i| x.row(i).to_vec()).collect();
            let xb = g.constant(Tensor::matrix(chunk.len(), x.cols(), rows)?);
            let targets: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let z = linear.forward(&mut g, &store, xb);
            let loss = g.cross_entropy(z, &targets);
            let grads = g.backward(loss)?.into_param_grads(&store);
            adam.step(&mut store, &grads, &lr, |_| true)?;
        }
    }
    Ok(LinearProbe {
        layer,
        labels: inventory,
        store,
        linear,
    })
}

impl<T: Scalar> LinearProbe<T> {
    pub fn weight(&self) -> &Tensor<T> {
        self.store.get(self.linear.weight)
    }

    /// Argmax label of every token.
    pub fn predict(&self, stack: &RepStack<T>) -> Result<Vec<String>> {
        let layer = stack.layers.get(self.layer).ok_or(Error::LayerCountMismatch {
            weights: self.layer + 1,
            layers: stack.num_layers(),
        })?;
        let mut g = Graph::inference();
        let x = g.constant(layer.clone());
        let z = self.linear.forward(&mut g, &self.store, x);
        let z = g.value(z);
        Ok((0..z.rows())
            .map(|r| {
                let row = z.row(r);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                self.labels[best].clone()
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeTask {
    ChunkTags,
    PosTags,
}

impl std::str::FromStr for ProbeTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunk_tags" | "chunk" => Ok(ProbeTask::ChunkTags),
            "pos_tags" | "pos" => Ok(ProbeTask::PosTags),
            _ => Err(Error::Config(format!("unknown probe task `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub task: ProbeTask,
    pub layer_names: Vec<String>,
    pub scores: Vec<f64>,
    pub best_layer: usize,
    pub best_score: f64,
}

impl ProbeResult {
    /// Tab-separated `layer`, `name`, `score` rows plus a summary line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer\tname\tscore\n");
        for (i, (n, s)) in self.layer_names.iter().zip(&self.scores).enumerate() {
            out.push_str(&format!("{i}\t{n}\t{s:.6}\n"));
        }
        let metric = match self.task {
            ProbeTask::ChunkTags => "f1",
            ProbeTask::PosTags => "accuracy",
        };
        out.push_str(&format!(
            "# best\t{}\t{}\t{metric}={:.6}\n",
            self.best_layer, self.layer_names[self.best_layer], self.best_score
        ));
        out
    }
}

/// Token accuracy of `pred` against `gold`.
pub fn accuracy(gold: &[Vec<String>], pred: &[Vec<String>]) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(pred) {
        n += g.len();
        hit += g.iter().zip(p).filter(|(a, b)| a == b).count();
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

/// Span F1 of per-token chunk tag predictions, decoded leniently.
pub fn tag_span_f1(gold: &[Vec<String>], pred: &[Vec<String>]) -> Result<f64> {
    let spans = |seqs: &[Vec<String>]| -> Result<Vec<Vec<Span<String>>>> {
        seqs.iter()
            .map(|s| {
                let tags = s.iter().map(|t| t.parse::<Tag<String>>()).collect::<Result<Vec<_>>>()?;
                decode_bioul(&tags, false)
            })
            .collect()
    };
    Ok(chunk_f1(&spans(gold)?, &spans(pred)?)?.f1)
}

/// Trains one probe per layer on `train` and scores each on `test`.
pub fn probe_report<T: Scalar>(
    train: (&[RepStack<T>], &[Vec<String>]),
    test: (&[RepStack<T>], &[Vec<String>]),
    task: ProbeTask,
    config: &ProbeConfig,
) -> Result<ProbeResult> {
    let names = train
        .0
        .first()
        .map(|s| s.names.clone())
        .ok_or(Error::EmptyTrainingSet)?;
    if let Some(s) = train.0.iter().chain(test.0).find(|s| s.names != names) {
        return Err(Error::LayerCountMismatch {
            weights: names.len(),
            layers: s.num_layers(),
        });
    }
    let scores = (0..names.len())
        .into_par_iter()
        .map(|layer| {
            let probe = train_probe(train.0, train.1, layer, config)?;
            let pred = test.0.iter().map(|s| probe.predict(s)).collect::<Result<Vec<_>>>()?;
            match task {
                ProbeTask::PosTags => Ok(accuracy(test.1, &pred)),
                ProbeTask::ChunkTags => tag_span_f1(test.1, &pred),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let best_layer = (0..scores.len()).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
    Ok(ProbeResult {
        task,
        best_score: scores[best_layer],
        layer_names: names,
        scores,
        best_layer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TaskConfig {
        TaskConfig {
            word_emb_dim: 6,
            hidden: 5,
            dropout: 0.0,
            epochs: 2,
            patience: 1,
            chunk_feature_dim: 50,
            ..TaskConfig::default()
        }
    }

    fn one_hot_stack(labels: &[&str], inventory: &[&str]) -> RepStack<f64> {
        let n = labels.len();
        let data = labels
            .iter()
            .flat_map(|l| inventory.iter().map(move |x| if x == l { 1.0 } else { 0.0 }))
            .collect();
        RepStack {
            names: vec!["only".into()],
            layers: vec![Tensor::matrix(n, inventory.len(), data).unwrap()],
        }
    }

    #[test]
    fn chunk_feature_table_shape() {
        let cfg = TaskConfig {
            use_chunk_features: true,
            ..tiny()
        };
        let m = Tagger::new(cfg, Vocabulary::from_tokens(["a"]), vec!["PER".into()], None).unwrap();
        let t = m.chunk_feature_table().unwrap();
        assert_eq!(t.shape(), &[45, 50]);
        assert!(t.data().iter().all(|v| v.abs() <= 0.05));
    }

    #[test]
    fn features_without_chunker() {
        let f = Features::<f32> {
            use_chunk_features: true,
            ..Features::none()
        };
        assert!(matches!(f.featurize(&["a".into()]), Err(Error::MissingChunker)));
    }

    #[test]
    fn separable_probe_is_perfect() {
        let inv = ["DT", "NN", "VB"];
        let labels: Vec<Vec<String>> = vec![
            vec!["DT".into(), "NN".into(), "VB".into()],
            vec!["NN".into(), "VB".into()],
        ];
        let stacks: Vec<RepStack<f64>> = labels
            .iter()
            .map(|l| one_hot_stack(&l.iter().map(String::as_str).collect::<Vec<_>>(), &inv))
            .collect();
        let probe = train_probe(&stacks, &labels, 0, &ProbeConfig::default()).unwrap();
        assert_eq!(probe.weight().shape(), &[3, 3]);
        assert_eq!(probe.store.len(), 2);
        let r = probe_report((&stacks, &labels), (&stacks, &labels), ProbeTask::PosTags, &ProbeConfig::default()).unwrap();
        assert_eq!(r.best_layer, 0);
        assert_eq!(r.best_score, 1.0);
        assert!(r.to_tsv().starts_with("layer\tname\tscore\n0\tonly\t1.000000\n"));
    }

    #[test]
    fn ragged_labels_rejected() {
        let stacks = vec![one_hot_stack(&["a", "b"], &["a", "b"])];
        let labels = vec![vec!["a".to_string()]];
        assert!(matches!(
            train_probe(&stacks, &labels, 0, &ProbeConfig::default()),
            Err(Error::LabelLengthMismatch { sentence: 0, labels: 1, tokens: 2 })
        ));
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = vec![vec!["B-NP".to_string(), "I-NP".into(), "O".into()]];
        assert_eq!(tag_span_f1(&gold, &gold).unwrap(), 1.0);
        let none = vec![vec!["O".to_string(); 3]];
        assert_eq!(tag_span_f1(&gold, &none).unwrap(), 0.0);
    }
}

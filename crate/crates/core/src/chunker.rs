//! Neural CRF chunker: character CNN and word embeddings, a bidirectional
//! LSTM encoder, per-tag emissions and a constrained BIOUL CRF.

use std::fmt;
use std::hash::Hash;
use std::path::Path;
use std::str::FromStr;

use msync_autodiff::{checkpoint, Adam, Graph, LearningRate, ParamGrads, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chunk::{chunk_f1, decode_bioul, encode_bioul, ChunkLabel, ChunkSpan, Prf, Tag, TagSet};
use crate::corpus::{build_vocab, TaggedSentence, Vocabulary};
use crate::crf::{crf_nll_var, transition_mask, viterbi, CrfParams, TransitionMask};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, CharCnn, Embedding, Filters, Linear};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkerConfig {
    pub char_emb_dim: usize,
    pub char_filters: Filters,
    pub word_emb_dim: usize,
    pub encoder_hidden: usize,
    pub encoder_layers: usize,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub min_count: usize,
    pub max_vocab: usize,
    pub seed: u64,
}

impl Default for ChunkerConfig {
    fn default() -> Self {
        ChunkerConfig {
            char_emb_dim: 16,
            char_filters: Filters(vec![(1, 32), (2, 32), (3, 64)]),
            word_emb_dim: 100,
            encoder_hidden: 200,
            encoder_layers: 2,
            dropout_rate: 0.5,
            batch_size: 16,
            max_epochs: 30,
            patience: 5,
            learning_rate: 1e-3,
            clip_norm: 5.0,
            min_count: 1,
            max_vocab: 50_000,
            seed: 13,
        }
    }
}

impl ChunkerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("char_emb_dim", self.char_emb_dim),
            ("word_emb_dim", self.word_emb_dim),
            ("encoder_hidden", self.encoder_hidden),
            ("encoder_layers", self.encoder_layers),
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
        ];
        if let Some((k, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be at least 1")));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config("patience exceeds max_epochs".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_nll: f64,
    pub dev: Prf,
}

#[derive(Debug, Clone)]
pub struct ChunkerModel<T: Scalar> {
    pub config: ChunkerConfig,
    pub vocab: Vocabulary,
    pub tags: TagSet<ChunkLabel>,
    pub mask: TransitionMask,
    pub store: ParamStore<T>,
    words: Embedding,
    chars: CharCnn,
    encoder: BiLstm,
    emit: Linear,
    trans: ParamId,
    start: ParamId,
    end: ParamId,
}

pub type Chunker = ChunkerModel<f32>;

const KIND: &str = "chunker";

impl<T: Scalar> ChunkerModel<T> {
    /// Fresh parameters; construction order fixes parameter names and the
    /// random stream, so the same config and vocabulary give the same model.
    pub fn new(config: ChunkerConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let tags = TagSet::chunks();
        let k = tags.len();
        let words = Embedding::new(&mut store, &mut rng, "words", vocab.len(), config.word_emb_dim)?;
        let chars = CharCnn::new(&mut store, &mut rng, "chars", config.char_emb_dim, &config.char_filters)?;
        let encoder = BiLstm::new(
            &mut store,
            &mut rng,
            "encoder",
            config.word_emb_dim + chars.out_dim,
            config.encoder_hidden,
            config.encoder_layers,
            config.dropout_rate,
        )?;
        let emit = Linear::new(&mut store, &mut rng, "emit", encoder.out_dim(), k, true)?;
        let trans = store.add("crf.transitions", Tensor::zeros(vec![k, k]))?;
        let start = store.add("crf.start", Tensor::zeros(vec![k]))?;
        let end = store.add("crf.end", Tensor::zeros(vec![k]))?;
        let mask = transition_mask(&tags);
        Ok(ChunkerModel {
            config,
            vocab,
            tags,
            mask,
            store,
            words,
            chars,
            encoder,
            emit,
            trans,
            start,
            end,
        })
    }

    pub fn num_tags(&self) -> usize {
        self.tags.len()
    }

    fn emissions(&self, g: &mut Graph<T>, tokens: &[String]) -> Var {
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let w = self.words.forward(g, &self.store, &ids);
        let c = self.chars.forward(g, &self.store, tokens);
        let x = g.concat(&[w, c]);
        let x = g.dropout(x, self.config.dropout_rate);
        let h = self.encoder.forward(g, &self.store, x);
        let h = g.dropout(h, self.config.dropout_rate);
        self.emit.forward(g, &self.store, h)
    }

    fn crf_params(&self) -> CrfParams<T> {
        CrfParams {
            transitions: self.store.get(self.trans).clone(),
            start: self.store.get(self.start).clone(),
            end: self.store.get(self.end).clone(),
            mask: Some(self.mask.clone()),
        }
    }

    /// Sum of CRF losses of `batch` on `g`.
    fn batch_loss(&self, g: &mut Graph<T>, batch: &[&(Vec<String>, Vec<usize>)]) -> Result<Var> {
        let trans = g.param(&self.store, self.trans);
        let start = g.param(&self.store, self.start);
        let end = g.param(&self.store, self.end);
        let mut total: Option<Var> = None;
        for (tokens, gold) in batch {
            let e = self.emissions(g, tokens);
            let l = crf_nll_var(g, e, trans, start, end, gold, Some(&self.mask))?;
            total = Some(match total {
                Some(t) => g.add(t, l),
                None => l,
            });
        }
        total.ok_or(Error::EmptyTrainingSet)
    }

    /// Constrained Viterbi tags and their spans.
    pub fn chunk_sentence<S: AsRef<str>>(&self, tokens: &[S]) -> Result<(Vec<Tag<ChunkLabel>>, Vec<ChunkSpan>)> {
        if tokens.is_empty() {
            return Err(Error::EmptySentence);
        }
        let tokens: Vec<String> = tokens.iter().map(|t| t.as_ref().to_string()).collect();
        let mut g = Graph::inference();
        let e = self.emissions(&mut g, &tokens);
        let (path, _) = viterbi(g.value(e), &self.crf_params())?;
        let tags = self.tags.tags(&path)?;
        let spans = decode_bioul(&tags, true)?;
        Ok((tags, spans))
    }

    /// Chunks many sentences, optionally on a dedicated pool of `workers`
    /// threads. Output order follows input order.
    pub fn chunk_corpus<S: AsRef<str> + Sync>(
        &self,
        sentences: &[Vec<S>],
        workers: Option<usize>,
    ) -> Result<Vec<Vec<ChunkSpan>>> {
        let run = || -> Result<Vec<Vec<ChunkSpan>>> {
            sentences
                .par_iter()
                .map(|s| self.chunk_sentence(s).map(|(_, spans)| spans))
                .collect()
        };
        match workers {
            Some(n) if n > 1 => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?
                .install(run),
            _ => sentences
                .iter()
                .map(|s| self.chunk_sentence(s).map(|(_, spans)| spans))
                .collect(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": KIND,
            "config": self.config,
            "vocab": self.vocab.tokens()[Vocabulary::RESERVED.len()..],
        });
        checkpoint::save(dir, &self.store, meta)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, meta) = checkpoint::load::<T>(dir)?;
        if meta.get("kind").and_then(|k| k.as_str()) != Some(KIND) {
            return Err(Error::IncompatibleCheckpoint("not a chunker checkpoint".into()));
        }
        let config: ChunkerConfig = serde_json::from_value(meta["config"].clone())?;
        let vocab: Vec<String> = serde_json::from_value(meta["vocab"].clone())?;
        let mut model = Self::new(config, Vocabulary::from_tokens(vocab))?;
        adopt(&mut model.store, store)?;
        Ok(model)
    }
}

/// Copies every tensor of `loaded` into `store`, which must have exactly the
/// same names and shapes.
pub(crate) fn adopt<T: Scalar>(store: &mut ParamStore<T>, loaded: ParamStore<T>) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::IncompatibleCheckpoint(format!(
            "expected {} tensors, found {}",
            store.len(),
            loaded.len()
        )));
    }
    for (_, name, t) in loaded.iter() {
        store
            .assign(name, t.clone())
            .map_err(|e| Error::IncompatibleCheckpoint(format!("`{name}`: {e}")))?;
    }
    Ok(())
}

/// Gold BIOUL tag ids of a sentence. Sequences containing `L-`/`U-` tags must
/// be valid BIOUL; anything else is read as BIO and converted.
pub fn gold_tag_ids<L>(tags: &[String], tagset: &TagSet<L>, sentence: usize) -> Result<Vec<usize>>
where
    L: Clone + Eq + Hash + fmt::Display,
    Tag<L>: FromStr<Err = Error>,
{
    let bad = |e: Error| Error::InvalidTags {
        sentence,
        message: e.to_string(),
    };
    let parsed = tags
        .iter()
        .map(|t| t.parse::<Tag<L>>())
        .collect::<Result<Vec<_>>>()
        .map_err(bad)?;
    let bioul = parsed.iter().any(|t| matches!(t, Tag::Last(_) | Tag::Unit(_)));
    let spans = decode_bioul(&parsed, bioul).map_err(bad)?;
    let canonical = encode_bioul(&spans, tags.len()).map_err(bad)?;
    canonical
        .iter()
        .map(|t| {
            tagset.id(t).ok_or_else(|| Error::InvalidTags {
                sentence,
                message: format!("tag `{t}` is not in the inventory"),
            })
        })
        .collect()
}

fn prepare(corpus: &[TaggedSentence], tagset: &TagSet<ChunkLabel>) -> Result<Vec<(Vec<String>, Vec<usize>)>> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let tags = s.chunk_tags.as_ref().ok_or(Error::MissingTags(i))?;
            if tags.len() != s.tokens.len() || s.tokens.is_empty() {
                return Err(Error::RaggedSentence { sentence: i });
            }
            Ok((s.tokens.clone(), gold_tag_ids(tags, tagset, i)?))
        })
        .collect()
}

/// Gold chunk spans of each sentence.
pub fn gold_spans(corpus: &[TaggedSentence]) -> Result<Vec<Vec<ChunkSpan>>> {
    let tagset = TagSet::chunks();
    prepare(corpus, &tagset)?
        .into_iter()
        .map(|(_, ids)| decode_bioul(&tagset.tags(&ids)?, true))
        .collect()
}

/// Trains on `train`, keeping the weights with the best dev F1 and stopping
/// after `patience` epochs without improvement.
pub fn train_chunker<T: Scalar>(
    train: &[TaggedSentence],
    dev: &[TaggedSentence],
    config: ChunkerConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<(ChunkerModel<T>, Vec<EpochLog>)> {
    if train.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }
    config.validate()?;
    let tagset = TagSet::chunks();
    let data = prepare(train, &tagset)?;
    let dev_gold = gold_spans(dev)?;
    let tokens: Vec<Vec<String>> = data.iter().map(|(t, _)| t.clone()).collect();
    let vocab = build_vocab(&tokens, config.min_count, config.max_vocab);
    let mut model = ChunkerModel::<T>::new(config.clone(), vocab)?;

    let mut adam = Adam::new(&model.store);
    let lr = LearningRate::Constant(config.learning_rate);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut step: u64 = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            step += 1;
            let batch: Vec<&(Vec<String>, Vec<usize>)> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::training(config.seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let sum = model.batch_loss(&mut g, &batch)?;
            let loss = g.scale(sum, T::lit(1.0 / batch.len() as f64));
            let value = g.value(sum).item().f64();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("chunker loss is {value} at epoch {epoch}")));
            }
            total += value;
            let mut grads: ParamGrads<T> = g.backward(loss)?.into_param_grads(&model.store);
            if config.clip_norm > 0.0 {
                grads.clip_norm(config.clip_norm);
            }
            adam.step(&mut model.store, &grads, &lr, |_| true)?;
        }
        let dev_prf = if dev.is_empty() {
            Prf::from_counts(0, 0, 0)
        } else {
            evaluate_spans(&model, dev, &dev_gold)?
        };
        let entry = EpochLog {
            epoch,
            mean_nll: total / data.len() as f64,
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

fn evaluate_spans<T: Scalar>(model: &ChunkerModel<T>, corpus: &[TaggedSentence], gold: &[Vec<ChunkSpan>]) -> Result<Prf> {
    let pred = corpus
        .iter()
        .map(|s| model.chunk_sentence(&s.tokens).map(|(_, spans)| spans))
        .collect::<Result<Vec<_>>>()?;
    chunk_f1(gold, &pred)
}

/// Span precision, recall and F1 of the model's chunks against gold tags.
pub fn evaluate_chunker<T: Scalar>(model: &ChunkerModel<T>, corpus: &[TaggedSentence]) -> Result<Prf> {
    let gold = gold_spans(corpus)?;
    evaluate_spans(model, corpus, &gold)
}

//! Chunker training, persistence and prediction on generated sentences.

use msync_core::chunk::{decode_bioul, validate_spans};
use msync_core::chunker::{evaluate_chunker, train_chunker, Chunker, ChunkerConfig};
use msync_core::corpus::TaggedSentence;
use msync_core::nn::Filters;
use msync_core::synth::generate;

fn corpus(n: usize, seed: u64) -> Vec<TaggedSentence> {
    generate(n, seed).iter().map(|s| s.chunk_sentence().unwrap()).collect()
}

fn small() -> ChunkerConfig {
    ChunkerConfig {
        char_emb_dim: 8,
        char_filters: Filters(vec![(2, 8), (3, 8)]),
        word_emb_dim: 24,
        encoder_hidden: 24,
        encoder_layers: 1,
        dropout_rate: 0.0,
        max_epochs: 4,
        patience: 2,
        learning_rate: 1e-2,
        ..ChunkerConfig::default()
    }
}

#[test]
fn training_improves_and_is_reproducible() {
    let train = corpus(40, 1);
    let dev = corpus(10, 2);
    let (a, log) = train_chunker::<f32>(&train, &dev, small(), |_| {}).unwrap();
    assert!(log.last().unwrap().mean_nll < log[0].mean_nll, "{log:?}");
    let (b, _) = train_chunker::<f32>(&train, &dev, small(), |_| {}).unwrap();
    for id in a.store.ids() {
        assert!(a.store.get(id).bit_eq(b.store.get(id)), "{}", a.store.name(id));
    }
}

#[test]
fn checkpoint_round_trip_predicts_identically() {
    let train = corpus(20, 3);
    let (model, _) = train_chunker::<f32>(&train, &[], ChunkerConfig { max_epochs: 1, patience: 1, ..small() }, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = Chunker::load(dir.path()).unwrap();
    assert_eq!(back.config, model.config);
    let test = corpus(15, 4);
    for s in &test {
        let (tags, spans) = model.chunk_sentence(&s.tokens).unwrap();
        assert_eq!(back.chunk_sentence(&s.tokens).unwrap(), (tags.clone(), spans.clone()));
        assert_eq!(decode_bioul(&tags, true).unwrap(), spans);
        validate_spans(&spans, s.len()).unwrap();
    }
    assert_eq!(
        evaluate_chunker(&model, &test).unwrap(),
        evaluate_chunker(&back, &test).unwrap()
    );
}

#[test]
fn parallel_chunking_matches_sequential() {
    let model = Chunker::new(small(), msync_core::corpus::Vocabulary::from_tokens(["the", "cat"])).unwrap();
    let sents: Vec<Vec<String>> = corpus(30, 5).into_iter().map(|s| s.tokens).collect();
    assert_eq!(
        model.chunk_corpus(&sents, None).unwrap(),
        model.chunk_corpus(&sents, Some(4)).unwrap()
    );
}

#[test]
fn unknown_checkpoint_kind_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let store = msync_autodiff::ParamStore::<f32>::new();
    msync_autodiff::checkpoint::save(dir.path(), &store, serde_json::json!({"kind": "other"})).unwrap();
    assert!(Chunker::load(dir.path()).is_err());
}

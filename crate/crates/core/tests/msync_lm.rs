//! Language-model behaviour: directional causality, output normalization,
//! training schemes, checkpoints and representation extraction.

use msync_core::chunk::{ChunkLabel, ChunkSpan, Span};
use msync_core::msync::{
    corpus_vocab, pretrain, ChunkedSentence, MSynCConfig, Mode, Scheme, CURVE_HEADER, TOKEN_PATH_PREFIXES,
};
use msync_core::nn::Filters;
use msync_core::synth::generate;
use msync_core::{Error, MSynC32, MSynC64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy(scheme: Scheme) -> MSynCConfig {
    MSynCConfig {
        d_model: 16,
        seq_layers: 2,
        syn_layers: 2,
        label_emb_dim: 8,
        heads: 2,
        ff_dim: 24,
        char_emb_dim: 6,
        char_filters: Filters(vec![(1, 4), (2, 6), (3, 6)]),
        dropout: 0.1,
        warmup: 20,
        batch_size: 8,
        scheme,
        seed: 3,
        ..MSynCConfig::default()
    }
}

fn corpus(n: usize, seed: u64) -> Vec<ChunkedSentence> {
    generate(n, seed).iter().map(|s| s.chunked().unwrap()).collect()
}

/// Random disjoint spans over `lo..n`.
fn random_spans(rng: &mut ChaCha8Rng, lo: usize, n: usize) -> Vec<ChunkSpan> {
    let mut spans = Vec::new();
    let mut at = lo;
    while at < n {
        at += rng.gen_range(0..2);
        let end = at + rng.gen_range(0..3);
        if end >= n {
            break;
        }
        spans.push(Span::new(at, end, ChunkLabel::ALL[rng.gen_range(0..ChunkLabel::ALL.len())]));
        at = end + 1;
    }
    spans
}

fn random_tokens(rng: &mut ChaCha8Rng, pool: &[String], n: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.1) {
                format!("unseen{}", rng.gen_range(0..1000))
            } else {
                pool[rng.gen_range(0..pool.len())].clone()
            }
        })
        .collect()
}

fn row_bits(t: &msync_autodiff::Tensor<f32>, r: usize) -> Vec<u32> {
    t.row(r).iter().map(|v| v.to_bits()).collect()
}

#[test]
fn forward_logits_ignore_the_suffix_and_backward_the_prefix() {
    let sents = corpus(100, 17);
    let mut model = MSynC32::new(toy(Scheme::EndToEnd), corpus_vocab(&sents, &toy(Scheme::EndToEnd))).unwrap();
    // Untrained projections are small; spread the weights so that any leak
    // would show up in the low bits.
    for (id, _, _) in model.store.clone().iter() {
        model.store.get_mut(id).scale_assign(3.0);
    }
    let pool = model.vocab.tokens().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for (k, s) in sents.iter().enumerate() {
        let n = s.tokens.len();
        let spans = s.spans.clone().unwrap();
        let i = rng.gen_range(0..n);
        for mode in [Mode::Baseline, Mode::Msync] {
            let [fwd, bwd] = model.logits(s, mode).unwrap();

            // Tokens at positions >= i and spans ending at or after i replaced.
            let suffix_len = rng.gen_range(0..6);
            let mut tokens = s.tokens[..i].to_vec();
            tokens.extend(random_tokens(&mut rng, &pool, suffix_len.max(usize::from(i == 0))));
            let mut kept: Vec<ChunkSpan> = spans.iter().filter(|sp| sp.end < i).cloned().collect();
            let lo = kept.last().map_or(0, |sp| sp.end + 1);
            kept.extend(random_spans(&mut rng, lo, tokens.len()).into_iter().filter(|sp| sp.end >= i));
            let changed = ChunkedSentence::new(tokens, kept);
            let [fwd2, _] = model.logits(&changed, mode).unwrap();
            for r in 0..=i.min(changed.tokens.len() - 1) {
                assert_eq!(row_bits(&fwd, r), row_bits(&fwd2, r), "sentence {k}, {mode}, fwd row {r}");
            }

            // Tokens at positions <= i and spans beginning at or before i
            // replaced; suffix rows are compared counting from the end.
            let prefix_len = rng.gen_range(1..6);
            let mut tokens = random_tokens(&mut rng, &pool, prefix_len);
            tokens.extend_from_slice(&s.tokens[i + 1..]);
            let shift = prefix_len as isize - (i as isize + 1);
            let tail: Vec<ChunkSpan> = spans
                .iter()
                .filter(|sp| sp.begin > i)
                .map(|sp| Span::new((sp.begin as isize + shift) as usize, (sp.end as isize + shift) as usize, sp.label))
                .collect();
            let hi = tail.first().map_or(tokens.len(), |sp| sp.begin);
            let mut head: Vec<ChunkSpan> = random_spans(&mut rng, 0, hi)
                .into_iter()
                .filter(|sp| sp.begin < prefix_len)
                .collect();
            head.extend(tail);
            let changed = ChunkedSentence::new(tokens, head);
            let [_, bwd2] = model.logits(&changed, mode).unwrap();
            let (rows, rows2) = (bwd.rows(), bwd2.rows());
            // Backward row r predicts wrapped position r from wrapped r + 1;
            // token i sits at wrapped i + 1.
            for back in 0..(n - i) {
                assert_eq!(
                    row_bits(&bwd, rows - 1 - back),
                    row_bits(&bwd2, rows2 - 1 - back),
                    "sentence {k}, {mode}, bwd row {back} from the end"
                );
            }
        }
    }
}

#[test]
fn zero_output_layer_gives_log_vocab() {
    let sents = corpus(6, 4);
    for ty in ["f32", "f64"] {
        let cfg = toy(Scheme::EndToEnd);
        let vocab = corpus_vocab(&sents, &cfg);
        let want = (vocab.len() as f64).ln();
        for mode in [Mode::Baseline, Mode::Msync] {
            let got = if ty == "f64" {
                let mut m = MSynC64::new(cfg.clone(), vocab.clone()).unwrap();
                for id in [m.softmax_weight(), m.softmax_bias()] {
                    m.store.get_mut(id).scale_assign(0.0);
                }
                (m.lm_loss(&sents, mode).unwrap() - want).abs()
            } else {
                let mut m = MSynC32::new(cfg.clone(), vocab.clone()).unwrap();
                for id in [m.softmax_weight(), m.softmax_bias()] {
                    m.store.get_mut(id).scale_assign(0.0);
                }
                (m.lm_loss(&sents, mode).unwrap() as f64 - (want as f32) as f64).abs()
            };
            let tol = if ty == "f64" { 1e-12 } else { 1e-6 };
            assert!(got <= tol, "{ty} {mode}: off by {got}");
        }
    }
}

fn bytes_with_prefix(m: &MSynC32, prefixes: &[&str]) -> Vec<(String, Vec<u32>)> {
    m.store
        .iter()
        .filter(|(_, n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .map(|(_, n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}

#[test]
fn schemes_update_the_right_parameters() {
    let sents = corpus(40, 8);
    let base_cfg = MSynCConfig { epochs: 1, ..toy(Scheme::Baseline) };
    let base = pretrain::<f32>(&sents, base_cfg.clone(), None, None, |_| {}).unwrap().model;
    assert!(!base.has_chunk_path());
    let token_path = bytes_with_prefix(&base, &TOKEN_PATH_PREFIXES);
    assert!(token_path.iter().any(|(n, _)| n.starts_with("char_cnn.")));
    assert!(token_path.iter().any(|(n, _)| n.starts_with("seq.")));

    let frozen = pretrain::<f32>(&sents, MSynCConfig { scheme: Scheme::Frozen, ..base_cfg.clone() }, Some(&base), None, |_| {})
        .unwrap()
        .model;
    assert_eq!(bytes_with_prefix(&frozen, &TOKEN_PATH_PREFIXES), token_path);

    let fine = pretrain::<f32>(&sents, MSynCConfig { scheme: Scheme::FineTuned, ..base_cfg.clone() }, Some(&base), None, |_| {})
        .unwrap()
        .model;
    let after = bytes_with_prefix(&fine, &TOKEN_PATH_PREFIXES);
    for ((name, a), (_, b)) in after.iter().zip(&token_path) {
        if name.starts_with("seq.") && name.ends_with("weight") || name.starts_with("char_cnn.") {
            assert_ne!(a, b, "{name} did not move under fine-tuning");
        }
    }
    let fresh = MSynC32::new(MSynCConfig { scheme: Scheme::FineTuned, ..base_cfg.clone() }, base.vocab.clone()).unwrap();
    for prefix in ["syn.", "f_proj.", "u_proj."] {
        let moved = bytes_with_prefix(&fine, &[prefix]) != bytes_with_prefix(&fresh, &[prefix]);
        assert!(moved, "{prefix} did not move");
    }
}

#[test]
fn staged_schemes_need_a_compatible_initial_model() {
    let sents = corpus(10, 2);
    let cfg = MSynCConfig { epochs: 1, ..toy(Scheme::Frozen) };
    assert!(matches!(
        pretrain::<f32>(&sents, cfg.clone(), None, None, |_| {}),
        Err(Error::MissingInit(_))
    ));
    let base = MSynC32::new(MSynCConfig { d_model: 8, ..toy(Scheme::Baseline) }, corpus_vocab(&sents, &cfg)).unwrap();
    assert!(matches!(
        pretrain::<f32>(&sents, cfg.clone(), Some(&base), None, |_| {}),
        Err(Error::IncompatibleInit(_))
    ));
    let other_vocab = MSynC32::new(toy(Scheme::Baseline), msync_core::corpus::Vocabulary::from_tokens(["x"])).unwrap();
    let mut m = MSynC32::new(cfg, corpus_vocab(&sents, &toy(Scheme::Baseline))).unwrap();
    assert!(matches!(m.init_from(&other_vocab), Err(Error::IncompatibleInit(_))));
    let plain = vec![ChunkedSentence::plain(vec!["a".into()])];
    assert!(matches!(
        pretrain::<f32>(&plain, MSynCConfig { epochs: 1, ..toy(Scheme::EndToEnd) }, None, None, |_| {}),
        Err(Error::MissingSpans(0))
    ));
}

#[test]
fn checkpoints_and_logs() {
    let sents = corpus(20, 6);
    let dir = tempfile::tempdir().unwrap();
    let cfg = MSynCConfig { epochs: 2, ..toy(Scheme::EndToEnd) };
    let out = pretrain::<f32>(&sents, cfg, None, Some(dir.path()), |_| {}).unwrap();
    assert_eq!(out.curve.len(), 2 * sents.len().div_ceil(8));
    for sub in ["epoch-1", "epoch-2"] {
        let m = MSynC32::load(&dir.path().join(sub)).unwrap();
        assert_eq!(m.config.scheme, Scheme::EndToEnd);
    }
    let back = MSynC32::load(dir.path()).unwrap();
    for ((_, n, a), (_, _, b)) in out.model.store.iter().zip(back.store.iter()) {
        assert!(a.bit_eq(b), "{n}");
    }
    let s = &sents[0];
    assert!(out.model.extract_reps(s, Mode::Msync).unwrap().bit_eq(&back.extract_reps(s, Mode::Msync).unwrap()));

    let curve = std::fs::read_to_string(dir.path().join("loss_curve.tsv")).unwrap();
    assert_eq!(curve.lines().next(), Some(CURVE_HEADER));
    for entry in std::fs::read_dir(dir.path()).unwrap() {
        let p = entry.unwrap().path();
        if p.is_file() {
            let text = std::fs::read(&p).unwrap();
            let text = String::from_utf8_lossy(&text).to_lowercase();
            let mentions = text.split(|c: char| !c.is_alphanumeric()).any(|w| w == "perplexity" || w == "ppl");
            assert!(!mentions, "{}", p.display());
        }
    }
    assert!(matches!(
        MSynC32::load(&dir.path().join("missing")),
        Err(Error::IncompatibleCheckpoint(_))
    ));
}

#[test]
fn extracted_stacks() {
    let sents = corpus(12, 10);
    let cfg = toy(Scheme::EndToEnd);
    let m = MSynC32::new(cfg.clone(), corpus_vocab(&sents, &cfg)).unwrap();
    for s in &sents {
        let a = m.extract_reps(s, Mode::Msync).unwrap();
        assert!(a.bit_eq(&m.extract_reps(s, Mode::Msync).unwrap()));
        assert_eq!(a.names, ["char", "seq.0", "seq.1", "syn.0", "syn.1", "msync"]);
        let b = m.extract_reps(s, Mode::Baseline).unwrap();
        assert_eq!(b.names, ["char", "seq.0", "seq.1"]);
        for stack in [&a, &b] {
            for l in &stack.layers {
                assert_eq!(l.shape(), &[s.tokens.len(), 2 * cfg.d_model]);
            }
        }
        // Chunk count never exceeds token count.
        assert!(s.spans.as_ref().unwrap().len() <= s.tokens.len());
    }
}

use std::path::Path;

use msync_core::checks::{crf_checks, lm_checks};
use msync_core::chunk::{self, chunk_spans, encode_bio, encode_bioul, ChunkSpan};
use msync_core::chunker::{evaluate_chunker, gold_spans, train_chunker, Chunker, ChunkerConfig};
use msync_core::corpus::{read_conll2000, read_ptb, read_raw, read_task_columns, write_conll2000, TaggedSentence};
use msync_core::downstream::{
    evaluate_tagger, probe_report, train_tagger, Features, ProbeConfig, ProbeTask, TaskConfig, Tagger,
};
use msync_core::msync::{pretrain as run_pretrain, write_curve, ChunkedSentence, MSynC, MSynCConfig, Mode, Scheme};
use msync_core::Error;

use crate::run::{read, resolve, show, snapshot, usage, write, Outcome};
use crate::Common;

const NO_CONFIG: Option<&()> = None;

fn bio_strings(spans: &[ChunkSpan], n: usize) -> Outcome<Vec<String>> {
    Ok(encode_bio(spans, n)?.iter().map(ToString::to_string).collect())
}

pub fn derive_chunks(c: &Common, trees: &Path, out: &Path) -> Outcome {
    let parsed = read_ptb(&read(trees)?)?;
    let mut sents = Vec::with_capacity(parsed.len());
    for t in &parsed {
        let spans = chunk::derive_chunks(t)?;
        let n = t.num_leaves();
        sents.push(TaggedSentence::new(t.words(), Some(t.pos_tags()), Some(bio_strings(&spans, n)?))?);
    }
    write(out, &write_conll2000(&sents)?)?;
    eprintln!("{} trees -> {}", sents.len(), show(out));
    snapshot(out, false, "derive-chunks", c, &[("trees", show(trees))], NO_CONFIG)
}

pub fn chunker_train(c: &Common, train: &Path, dev: &Path, out: &Path) -> Outcome {
    let config: ChunkerConfig = resolve(c, ChunkerConfig::default(), Some("seed"))?;
    config.validate()?;
    let train_set = read_conll2000(&read(train)?)?;
    let dev_set = read_conll2000(&read(dev)?)?;
    let mut log = String::from("epoch\tmean_nll\tdev_precision\tdev_recall\tdev_f1\n");
    let (model, _) = train_chunker::<f32>(&train_set, &dev_set, config.clone(), |e| {
        eprintln!("epoch {} mean_nll {:.4} dev_f1 {:.4}", e.epoch, e.mean_nll, e.dev.f1);
        log.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            e.epoch, e.mean_nll, e.dev.precision, e.dev.recall, e.dev.f1
        ));
    })?;
    model.save(out)?;
    write(&out.join("train_log.tsv"), &log)?;
    snapshot(
        out,
        true,
        "chunker-train",
        c,
        &[("train", show(train)), ("dev", show(dev))],
        Some(&config),
    )
}

pub fn chunker_predict(c: &Common, model: &Path, input: &Path, out: &Path) -> Outcome {
    let chunker = Chunker::load(model)?;
    let sents = read_raw(&read(input)?);
    let spans = chunker.chunk_corpus(&sents, c.workers)?;
    let tagged = sents
        .iter()
        .zip(&spans)
        .map(|(t, s)| Ok(TaggedSentence::new(t.clone(), None, Some(bio_strings(s, t.len())?))?))
        .collect::<Outcome<Vec<_>>>()?;
    write(out, &write_conll2000(&tagged)?)?;
    eprintln!("chunked {} sentences", tagged.len());
    snapshot(
        out,
        false,
        "chunker-predict",
        c,
        &[("model", show(model)), ("input", show(input))],
        Some(&chunker.config),
    )
}

fn scores_line(p: &msync_core::chunk::Prf) -> String {
    format!(
        "precision\t{:.6}\nrecall\t{:.6}\nf1\t{:.6}\ncorrect\t{}\npredicted\t{}\ngold\t{}\n",
        p.precision, p.recall, p.f1, p.correct, p.predicted, p.gold
    )
}

pub fn chunker_eval(c: &Common, model: &Path, test: &Path, out: Option<&Path>) -> Outcome {
    let chunker = Chunker::load(model)?;
    let prf = evaluate_chunker(&chunker, &read_conll2000(&read(test)?)?)?;
    let text = scores_line(&prf);
    print!("{text}");
    if let Some(o) = out {
        write(o, &text)?;
        snapshot(o, false, "chunker-eval", c, &[("model", show(model)), ("test", show(test))], NO_CONFIG)?;
    }
    Ok(())
}

/// Spans for `sents` from a parallel chunk file or a chunker.
fn spans_for(
    c: &Common,
    sents: &[Vec<String>],
    chunks: Option<&Path>,
    chunker: Option<&Path>,
) -> Outcome<Option<Vec<Vec<ChunkSpan>>>> {
    if let Some(p) = chunks {
        let tagged = read_task_columns(&read(p)?)?;
        if tagged.len() != sents.len() {
            return Err(Error::LengthMismatch {
                gold: sents.len(),
                pred: tagged.len(),
            }
            .into());
        }
        let mut out = Vec::with_capacity(sents.len());
        for (i, (s, t)) in sents.iter().zip(&tagged).enumerate() {
            if s != &t.tokens {
                return Err(usage(format!("{}: sentence {} does not match the text", show(p), i + 1)));
            }
            let tags = t.chunk_tags.as_ref().ok_or(Error::MissingTags(i))?;
            out.push(chunk_spans(tags)?);
        }
        return Ok(Some(out));
    }
    if let Some(p) = chunker {
        let model = Chunker::load(p)?;
        return Ok(Some(model.chunk_corpus(sents, c.workers)?));
    }
    Ok(None)
}

fn chunked(sents: Vec<Vec<String>>, spans: Option<Vec<Vec<ChunkSpan>>>) -> Vec<ChunkedSentence> {
    match spans {
        Some(sp) => sents.into_iter().zip(sp).map(|(t, s)| ChunkedSentence::new(t, s)).collect(),
        None => sents.into_iter().map(ChunkedSentence::plain).collect(),
    }
}

fn parse_mode(s: &str) -> Outcome<Mode> {
    s.parse::<Mode>().map_err(|e| usage(e.to_string()))
}

#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    c: &Common,
    train: &Path,
    chunks: Option<&Path>,
    chunker: Option<&Path>,
    scheme: Option<String>,
    init: Option<&Path>,
    out: &Path,
) -> Outcome {
    let mut config: MSynCConfig = resolve(c, MSynCConfig::default(), Some("seed"))?;
    if let Some(s) = scheme {
        config.scheme = s.parse::<Scheme>().map_err(|e| usage(e.to_string()))?;
    }
    config.validate()?;
    if config.scheme.needs_init() && init.is_none() {
        return Err(usage(format!("the `{}` scheme requires --init <baseline checkpoint>", config.scheme)));
    }
    if config.scheme.has_chunk_path() && chunks.is_none() && chunker.is_none() {
        return Err(usage(format!("the `{}` scheme requires --chunks or --chunker", config.scheme)));
    }
    let sents = read_raw(&read(train)?);
    let spans = spans_for(c, &sents, chunks, chunker)?;
    let corpus = chunked(sents, spans);
    let base = match init {
        Some(p) => Some(MSynC::load(p).map_err(|e| match e {
            Error::IncompatibleCheckpoint(m) => Error::IncompatibleInit(m),
            other => other,
        })?),
        None => None,
    };
    let result = run_pretrain::<f32>(&corpus, config.clone(), base.as_ref(), Some(out), |s| {
        eprintln!("epoch {} step {} lr {:.3e} mean_nll {:.4}", s.epoch, s.step, s.lr, s.mean_nll);
    })?;
    eprintln!(
        "mean_nll initial {:.4} final {:.4}",
        result.initial_nll, result.final_nll
    );
    write(&out.join("loss_curve.tsv"), &write_curve(&result.curve))?;
    let mut inputs = vec![("train", show(train))];
    if let Some(p) = chunks {
        inputs.push(("chunks", show(p)));
    }
    if let Some(p) = chunker {
        inputs.push(("chunker", show(p)));
    }
    if let Some(p) = init {
        inputs.push(("init", show(p)));
    }
    snapshot(out, true, "pretrain", c, &inputs, Some(&config))
}

pub fn extract_reps(
    c: &Common,
    model: &Path,
    input: &Path,
    chunks: Option<&Path>,
    chunker: Option<&Path>,
    mode: &str,
    out: &Path,
) -> Outcome {
    let mode = parse_mode(mode)?;
    let lm = MSynC::load(model)?;
    let sents = read_raw(&read(input)?);
    if mode == Mode::Msync && chunks.is_none() && chunker.is_none() {
        return Err(usage("--mode msync requires --chunks or --chunker"));
    }
    let spans = spans_for(c, &sents, chunks, chunker)?;
    let corpus = chunked(sents, spans);
    let mut text = String::new();
    for s in &corpus {
        let stack = lm.extract_reps(s, mode)?;
        let layers: Vec<Vec<&[f32]>> = stack
            .layers
            .iter()
            .map(|l| (0..l.rows()).map(|r| l.row(r)).collect())
            .collect();
        let line = serde_json::json!({
            "tokens": s.tokens,
            "layers": stack.names,
            "reps": layers,
        });
        text.push_str(&line.to_string());
        text.push('\n');
    }
    write(out, &text)?;
    let mut inputs = vec![("model", show(model)), ("input", show(input)), ("mode", mode.to_string())];
    if let Some(p) = chunks.or(chunker) {
        inputs.push(("spans", show(p)));
    }
    snapshot(out, false, "extract-reps", c, &inputs, Some(&lm.config))
}

#[allow(clippy::too_many_arguments)]
pub fn tagger_train(
    c: &Common,
    train: &Path,
    dev: &Path,
    reps: Option<&Path>,
    mode: Option<String>,
    chunker: Option<&Path>,
    chunk_features: bool,
    out: &Path,
) -> Outcome {
    let mut config: TaskConfig = resolve(c, TaskConfig::default(), Some("seed"))?;
    if let Some(p) = reps {
        config.rep_checkpoint = Some(show(p));
    }
    if let Some(m) = mode {
        config.rep_mode = parse_mode(&m)?;
    }
    if let Some(p) = chunker {
        config.chunker_checkpoint = Some(show(p));
    }
    config.use_chunk_features |= chunk_features;
    config.validate()?;
    let features = Features::<f32>::load(&config)?;
    let train_set = read_task_columns(&read(train)?)?;
    let dev_set = read_task_columns(&read(dev)?)?;
    let mut log = String::from("epoch\tmean_nll\tdev_precision\tdev_recall\tdev_f1\n");
    let (model, _) = train_tagger(&train_set, &dev_set, config.clone(), &features, |e| {
        eprintln!("epoch {} mean_nll {:.4} dev_f1 {:.4}", e.epoch, e.mean_nll, e.dev.f1);
        log.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            e.epoch, e.mean_nll, e.dev.precision, e.dev.recall, e.dev.f1
        ));
    })?;
    model.save(out)?;
    write(&out.join("train_log.tsv"), &log)?;
    snapshot(
        out,
        true,
        "tagger-train",
        c,
        &[("train", show(train)), ("dev", show(dev))],
        Some(&config),
    )
}

pub fn tagger_eval(c: &Common, model: &Path, test: &Path, out: Option<&Path>) -> Outcome {
    let tagger = Tagger::load(model)?;
    let features = Features::<f32>::load(&tagger.config)?;
    let prf = evaluate_tagger(&tagger, &features, &read_task_columns(&read(test)?)?)?;
    let text = scores_line(&prf);
    print!("{text}");
    if let Some(o) = out {
        write(o, &text)?;
        snapshot(o, false, "tagger-eval", c, &[("model", show(model)), ("test", show(test))], Some(&tagger.config))?;
    }
    Ok(())
}

/// Stacks and per-token labels of a three-column probe file.
fn probe_data(
    lm: &MSynC,
    mode: Mode,
    data: &[TaggedSentence],
    task: ProbeTask,
    chunker: Option<&Chunker>,
    workers: Option<usize>,
) -> Outcome<(Vec<msync_core::msync::RepStack<f32>>, Vec<Vec<String>>)> {
    let gold = gold_spans(data)?;
    let spans = match chunker {
        Some(ch) => {
            let toks: Vec<Vec<String>> = data.iter().map(|s| s.tokens.clone()).collect();
            ch.chunk_corpus(&toks, workers)?
        }
        None => gold.clone(),
    };
    let mut stacks = Vec::with_capacity(data.len());
    let mut labels = Vec::with_capacity(data.len());
    for (i, (s, sp)) in data.iter().zip(spans).enumerate() {
        let sent = ChunkedSentence::new(s.tokens.clone(), sp);
        stacks.push(lm.extract_reps(&sent, mode)?);
        labels.push(match task {
            ProbeTask::PosTags => s.pos.clone().ok_or_else(|| usage(format!("sentence {} has no POS column", i + 1)))?,
            ProbeTask::ChunkTags => encode_bioul(&gold[i], s.tokens.len())?
                .iter()
                .map(ToString::to_string)
                .collect(),
        });
    }
    Ok((stacks, labels))
}

#[allow(clippy::too_many_arguments)]
pub fn probe(
    c: &Common,
    model: &Path,
    mode: &str,
    train: &Path,
    test: &Path,
    task: &str,
    chunker: Option<&Path>,
    out: &Path,
) -> Outcome {
    let mode = parse_mode(mode)?;
    let task: ProbeTask = task.parse().map_err(|e: Error| usage(e.to_string()))?;
    let config: ProbeConfig = resolve(c, ProbeConfig::default(), Some("seed"))?;
    let lm = MSynC::load(model)?;
    let chunker = chunker.map(Chunker::load).transpose()?;
    let train_set = read_conll2000(&read(train)?)?;
    let test_set = read_conll2000(&read(test)?)?;
    let (tr_stacks, tr_labels) = probe_data(&lm, mode, &train_set, task, chunker.as_ref(), c.workers)?;
    let (te_stacks, te_labels) = probe_data(&lm, mode, &test_set, task, chunker.as_ref(), c.workers)?;
    let result = probe_report((&tr_stacks, &tr_labels), (&te_stacks, &te_labels), task, &config)?;
    eprintln!(
        "best layer {} ({}) score {:.4}",
        result.best_layer, result.layer_names[result.best_layer], result.best_score
    );
    write(out, &result.to_tsv())?;
    snapshot(
        out,
        false,
        "probe",
        c,
        &[
            ("model", show(model)),
            ("mode", mode.to_string()),
            ("train", show(train)),
            ("test", show(test)),
        ],
        Some(&config),
    )
}

/// Primitive and CRF checks fail at this relative error.
pub const PRIMITIVE_TOL: f64 = 1e-5;
/// The end-to-end language-model check fails at this relative error.
pub const LM_TOL: f64 = 1e-4;

pub fn gradcheck(c: &Common, scope: &str) -> Outcome {
    let (prims, crf, lm) = match scope {
        "primitives" => (true, false, false),
        "crf" => (false, true, false),
        "lm" => (false, false, true),
        "all" => (true, true, true),
        other => return Err(usage(format!("unknown scope `{other}` (primitives, crf, lm, all)"))),
    };
    let mut rows: Vec<(String, f64, f64)> = Vec::new();
    if prims {
        for (n, e) in msync_autodiff::primitive_suite(10) {
            rows.push((n, e, PRIMITIVE_TOL));
        }
    }
    if crf {
        for r in crf_checks(40, c.seed)? {
            rows.push((r.name, r.max_rel_error, PRIMITIVE_TOL));
        }
    }
    if lm {
        for mode in [Mode::Baseline, Mode::Msync] {
            let results = lm_checks(mode, 6, c.seed)?;
            let worst = results.iter().fold(0.0f64, |w, r| w.max(r.max_rel_error));
            rows.push((format!("lm[{mode}]"), worst, LM_TOL));
        }
    }
    let mut failed = Vec::new();
    for (name, err, tol) in &rows {
        let ok = *err < *tol;
        println!("{name}\t{err:.3e}\t{}", if ok { "ok" } else { "FAIL" });
        if !ok {
            failed.push(name.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(crate::run::Failure::Numerical(format!("gradient check failed: {}", failed.join(", "))))
    }
}

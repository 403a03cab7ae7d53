//! Finite-difference gradient checks of the CRF loss and of the full
//! language-model loss, in `f64`.

use msync_autodiff::{grad_check_params, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chunk::{encode_bioul, Span, TagScheme, TagSet};
use crate::crf::{crf_nll_var, transition_mask};
use crate::error::{Error, Result};
use crate::msync::{ChunkedSentence, MSynCConfig, MSynCModel, Mode, Scheme};
use crate::nn::Filters;

/// One checked quantity and its maximum relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// CRF negative log-likelihood against all four of its inputs, over
/// `instances` random lattices, with and without the BIOUL mask. Lattices
/// have at least two tags: with one the loss is identically zero.
pub fn crf_checks(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tags = TagSet::new(vec!["A".to_string(), "B".to_string()], TagScheme::Bioul);
    let mask = transition_mask(&tags);
    let mut worst = [0.0f64; 4];
    let names = ["emissions", "transitions", "start", "end"];
    for i in 0..instances {
        let masked = i % 2 == 1;
        let (k, len) = if masked {
            (tags.len(), rng.gen_range(1..6))
        } else {
            (rng.gen_range(2..5), rng.gen_range(1..6))
        };
        let gold: Vec<usize> = if masked {
            let b = rng.gen_range(0..len);
            let e = rng.gen_range(b..len);
            let label = if rng.gen_bool(0.5) { "A" } else { "B" };
            let t = encode_bioul(&[Span::new(b, e, label.to_string())], len)?;
            t.iter().map(|t| tags.id(t).unwrap()).collect()
        } else {
            (0..len).map(|_| rng.gen_range(0..k)).collect()
        };
        let mut store = ParamStore::<f64>::new();
        let ids = [
            store.add("emissions", random(&mut rng, vec![len, k]))?,
            store.add("transitions", random(&mut rng, vec![k, k]))?,
            store.add("start", random(&mut rng, vec![k]))?,
            store.add("end", random(&mut rng, vec![k]))?,
        ];
        let m = masked.then_some(&mask);
        let report = grad_check_params(
            &store,
            |g, s| {
                let v: Vec<_> = ids.iter().map(|&id| g.param(s, id)).collect();
                crf_nll_var(g, v[0], v[1], v[2], v[3], &gold, m).expect("valid gold path")
            },
            1e-5,
            1e-8,
            None,
        )?;
        for (w, r) in worst.iter_mut().zip(&report) {
            *w = w.max(r.max_rel_error);
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, e)| CheckResult {
            name: format!("crf_nll({n})"),
            max_rel_error: e,
        })
        .collect())
}

/// Small configuration used by the end-to-end check.
pub fn toy_lm_config(scheme: Scheme, seed: u64) -> MSynCConfig {
    MSynCConfig {
        d_model: 8,
        seq_layers: 2,
        syn_layers: 2,
        label_emb_dim: 4,
        heads: 2,
        ff_dim: 12,
        char_emb_dim: 3,
        char_filters: Filters(vec![(1, 2), (2, 3)]),
        dropout: 0.0,
        scheme,
        seed,
        ..MSynCConfig::default()
    }
}

/// Two sentences with chunk spans used by the end-to-end check.
pub fn toy_batch() -> Vec<ChunkedSentence> {
    use crate::chunk::ChunkLabel::*;
    let words = |s: &str| s.split(' ').map(str::to_string).collect::<Vec<_>>();
    vec![
        ChunkedSentence::new(
            words("the cat sat on mats ."),
            vec![Span::new(0, 1, Np), Span::new(2, 2, Vp), Span::new(3, 3, Pp), Span::new(4, 4, Np)],
        ),
        ChunkedSentence::new(words("dogs bark"), vec![Span::new(0, 0, Np), Span::new(1, 1, Vp)]),
    ]
}

/// Denominator floor of the language-model check. Some coordinates have an
/// exactly zero gradient (an attention key bias shifts every score of a row
/// equally), where the central difference is pure rounding noise near 1e-11.
pub const LM_FLOOR: f64 = 1e-6;

/// Full language-model loss on [`toy_batch`] against every parameter, at most
/// `per_param` coordinates each.
pub fn lm_checks(mode: Mode, per_param: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let scheme = match mode {
        Mode::Baseline => Scheme::Baseline,
        Mode::Msync => Scheme::EndToEnd,
    };
    let batch = toy_batch();
    let vocab = crate::corpus::Vocabulary::from_tokens(batch.iter().flat_map(|s| s.tokens.iter()).filter(|t| *t != "."));
    let model = MSynCModel::<f64>::new(toy_lm_config(scheme, seed), vocab)?;
    let report = grad_check_params(
        &model.store,
        |g, s| {
            let mut m = model.clone();
            m.store = s.clone();
            m.loss_var(g, &batch, mode, 0.0, None).expect("toy batch is valid")
        },
        1e-5,
        LM_FLOOR,
        Some(per_param),
    )?;
    if report.is_empty() {
        return Err(Error::Numerical("no parameters checked".into()));
    }
    Ok(report
        .into_iter()
        .map(|r| CheckResult {
            name: format!("lm[{mode}]({})", r.name),
            max_rel_error: r.max_rel_error,
        })
        .collect())
}

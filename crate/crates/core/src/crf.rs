//! Linear-chain CRF: forward algorithm, Viterbi decoding, negative
//! log-likelihood with exact gradients, and tagging-scheme constraints.
//!
//! A path `y` over `L` positions scores
//! `start[y0] + sum_t emit[t, yt] + sum_t trans[y(t-1), yt] + end[y(L-1)]`.
//! Disallowed transitions add [`MASK_PENALTY`].

use std::hash::Hash;

use msync_autodiff::{CustomOp, Graph, Scalar, Tensor, Var};

use crate::chunk::{Tag, TagScheme, TagSet};
use crate::error::{Error, Result};

pub const MASK_PENALTY: f64 = -1e9;

/// Allowed transitions over `K` tags plus virtual start (`K`) and end (`K+1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionMask {
    k: usize,
    allowed: Vec<bool>,
}

impl TransitionMask {
    pub fn allow_all(k: usize) -> Self {
        let mut m = TransitionMask {
            k,
            allowed: vec![false; (k + 2) * (k + 2)],
        };
        for a in 0..k {
            for b in 0..k {
                m.set(a, b, true);
            }
            m.set(k, a, true);
            m.set(a, k + 1, true);
        }
        m
    }

    pub fn num_tags(&self) -> usize {
        self.k
    }

    pub fn start(&self) -> usize {
        self.k
    }

    pub fn end(&self) -> usize {
        self.k + 1
    }

    pub fn set(&mut self, from: usize, to: usize, allowed: bool) {
        self.allowed[from * (self.k + 2) + to] = allowed;
    }

    /// Whether `to` may follow `from`; either may be a virtual boundary id.
    pub fn allowed(&self, from: usize, to: usize) -> bool {
        self.allowed[from * (self.k + 2) + to]
    }

    fn penalty(&self, from: usize, to: usize) -> f64 {
        if self.allowed(from, to) {
            0.0
        } else {
            MASK_PENALTY
        }
    }
}

/// Constraints of `scheme` over the tag numbering of [`TagSet`].
pub fn transition_mask<L: Clone + Eq + Hash>(tags: &TagSet<L>) -> TransitionMask {
    let k = tags.len();
    let all: Vec<Tag<L>> = (0..k).map(|i| tags.tag(i).unwrap()).collect();
    let mut m = TransitionMask {
        k,
        allowed: vec![false; (k + 2) * (k + 2)],
    };
    let opens = |t: &Tag<L>| match tags.scheme() {
        TagScheme::Bioul => matches!(t, Tag::Outside | Tag::Begin(_) | Tag::Unit(_)),
        TagScheme::Bio => matches!(t, Tag::Outside | Tag::Begin(_)),
    };
    let closes = |t: &Tag<L>| match tags.scheme() {
        TagScheme::Bioul => matches!(t, Tag::Outside | Tag::Last(_) | Tag::Unit(_)),
        TagScheme::Bio => true,
    };
    for (a, ta) in all.iter().enumerate() {
        for (b, tb) in all.iter().enumerate() {
            let continues = match (ta, tb) {
                (Tag::Begin(x) | Tag::Inside(x), Tag::Inside(y)) => x == y,
                (Tag::Begin(x) | Tag::Inside(x), Tag::Last(y)) => x == y && tags.scheme() == TagScheme::Bioul,
                _ => false,
            };
            m.set(a, b, continues || (closes(ta) && opens(tb)));
        }
        m.set(k, a, opens(ta));
        m.set(a, k + 1, closes(ta));
    }
    m
}

/// Plain-value CRF parameters.
#[derive(Debug, Clone)]
pub struct CrfParams<T> {
    pub transitions: Tensor<T>,
    pub start: Tensor<T>,
    pub end: Tensor<T>,
    pub mask: Option<TransitionMask>,
}

impl<T: Scalar> CrfParams<T> {
    pub fn zeros(k: usize) -> Self {
        CrfParams {
            transitions: Tensor::zeros(vec![k, k]),
            start: Tensor::zeros(vec![k]),
            end: Tensor::zeros(vec![k]),
            mask: None,
        }
    }

    pub fn num_tags(&self) -> usize {
        self.start.len()
    }

    fn scores(&self) -> Scores {
        Scores::new(
            self.transitions.data(),
            self.start.data(),
            self.end.data(),
            self.mask.as_ref(),
        )
    }
}

/// Effective scores in `f64` with the mask penalty folded in.
struct Scores {
    k: usize,
    trans: Vec<f64>,
    start: Vec<f64>,
    end: Vec<f64>,
}

impl Scores {
    fn new<T: Scalar>(trans: &[T], start: &[T], end: &[T], mask: Option<&TransitionMask>) -> Self {
        let k = start.len();
        assert_eq!(trans.len(), k * k, "transition matrix must be [K, K]");
        assert_eq!(end.len(), k, "end scores must have K entries");
        if let Some(m) = mask {
            assert_eq!(m.num_tags(), k, "mask size differs from tag count");
        }
        let pen = |a: usize, b: usize| mask.map_or(0.0, |m| m.penalty(a, b));
        Scores {
            k,
            trans: (0..k * k).map(|i| trans[i].f64() + pen(i / k, i % k)).collect(),
            start: (0..k).map(|i| start[i].f64() + pen(k, i)).collect(),
            end: (0..k).map(|i| end[i].f64() + pen(i, k + 1)).collect(),
        }
    }

    fn path_score(&self, emit: &[f64], path: &[usize]) -> f64 {
        let k = self.k;
        let mut s = self.start[path[0]] + self.end[path[path.len() - 1]];
        for (t, &y) in path.iter().enumerate() {
            s += emit[t * k + y];
            if t > 0 {
                s += self.trans[path[t - 1] * k + y];
            }
        }
        s
    }

    fn alpha(&self, emit: &[f64], len: usize) -> Vec<f64> {
        let k = self.k;
        let mut alpha = vec![0.0; len * k];
        for j in 0..k {
            alpha[j] = self.start[j] + emit[j];
        }
        let mut buf = vec![0.0; k];
        for t in 1..len {
            for j in 0..k {
                for i in 0..k {
                    buf[i] = alpha[(t - 1) * k + i] + self.trans[i * k + j];
                }
                alpha[t * k + j] = lse(&buf) + emit[t * k + j];
            }
        }
        alpha
    }

    fn beta(&self, emit: &[f64], len: usize) -> Vec<f64> {
        let k = self.k;
        let mut beta = vec![0.0; len * k];
        beta[(len - 1) * k..].copy_from_slice(&self.end);
        let mut buf = vec![0.0; k];
        for t in (0..len - 1).rev() {
            for i in 0..k {
                for j in 0..k {
                    buf[j] = self.trans[i * k + j] + emit[(t + 1) * k + j] + beta[(t + 1) * k + j];
                }
                beta[t * k + i] = lse(&buf);
            }
        }
        beta
    }

    fn log_z(&self, alpha: &[f64], len: usize) -> f64 {
        let k = self.k;
        let last: Vec<f64> = (0..k).map(|j| alpha[(len - 1) * k + j] + self.end[j]).collect();
        lse(&last)
    }
}

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn emissions_f64<T: Scalar>(emissions: &Tensor<T>, k: usize) -> Result<(Vec<f64>, usize)> {
    if emissions.rank() != 2 || emissions.cols() != k {
        return Err(Error::Tensor(msync_autodiff::Error::ShapeMismatch(format!(
            "emissions {:?} for {k} tags",
            emissions.shape()
        ))));
    }
    let len = emissions.rows();
    if len == 0 {
        return Err(Error::EmptySequence);
    }
    Ok((emissions.data().iter().map(|v| v.f64()).collect(), len))
}

/// Log of the summed exponentiated scores of all paths.
pub fn log_partition<T: Scalar>(emissions: &Tensor<T>, params: &CrfParams<T>) -> Result<T> {
    let s = params.scores();
    let (emit, len) = emissions_f64(emissions, s.k)?;
    let alpha = s.alpha(&emit, len);
    Ok(T::lit(s.log_z(&alpha, len)))
}

/// Score of one path.
pub fn path_score<T: Scalar>(emissions: &Tensor<T>, path: &[usize], params: &CrfParams<T>) -> Result<T> {
    let s = params.scores();
    let (emit, len) = emissions_f64(emissions, s.k)?;
    check_path(path, len, s.k)?;
    Ok(T::lit(s.path_score(&emit, path)))
}

fn check_path(path: &[usize], len: usize, k: usize) -> Result<()> {
    if path.len() != len {
        return Err(Error::Tensor(msync_autodiff::Error::ShapeMismatch(format!(
            "path of length {} for {len} positions",
            path.len()
        ))));
    }
    if let Some(&bad) = path.iter().find(|&&y| y >= k) {
        return Err(Error::TagOutOfRange { tag: bad, size: k });
    }
    Ok(())
}

/// Highest-scoring path and its score. Disallowed transitions are never
/// taken; ties go to the lower tag id.
pub fn viterbi<T: Scalar>(emissions: &Tensor<T>, params: &CrfParams<T>) -> Result<(Vec<usize>, T)> {
    let s = params.scores();
    let k = s.k;
    let (emit, len) = emissions_f64(emissions, k)?;
    let mask = params.mask.as_ref();
    let ok = |a: usize, b: usize| mask.is_none_or(|m| m.allowed(a, b));
    let neg = f64::NEG_INFINITY;

    let mut delta: Vec<f64> = (0..k)
        .map(|j| if ok(k, j) { s.start[j] + emit[j] } else { neg })
        .collect();
    let mut back = vec![0usize; len * k];
    for t in 1..len {
        let mut next = vec![neg; k];
        for j in 0..k {
            let mut best = neg;
            let mut arg = 0;
            for i in 0..k {
                if delta[i] == neg || !ok(i, j) {
                    continue;
                }
                let v = delta[i] + s.trans[i * k + j];
                if v > best {
                    best = v;
                    arg = i;
                }
            }
            if best > neg {
                next[j] = best + emit[t * k + j];
            }
            back[t * k + j] = arg;
        }
        delta = next;
    }
    let mut best = neg;
    let mut last = 0;
    for j in 0..k {
        if delta[j] == neg || !ok(j, k + 1) {
            continue;
        }
        let v = delta[j] + s.end[j];
        if v > best {
            best = v;
            last = j;
        }
    }
    if best == neg {
        return Err(Error::NoValidPath);
    }
    let mut path = vec![last; len];
    for t in (1..len).rev() {
        path[t - 1] = back[t * k + path[t]];
    }
    Ok((path, T::lit(best)))
}

fn check_gold(gold: &[usize], mask: Option<&TransitionMask>) -> Result<()> {
    let Some(m) = mask else { return Ok(()) };
    if !m.allowed(m.start(), gold[0]) {
        return Err(Error::GoldPathMasked(0));
    }
    for t in 1..gold.len() {
        if !m.allowed(gold[t - 1], gold[t]) {
            return Err(Error::GoldPathMasked(t));
        }
    }
    if !m.allowed(gold[gold.len() - 1], m.end()) {
        return Err(Error::GoldPathMasked(gold.len() - 1));
    }
    Ok(())
}

/// `log Z - score(gold)` as a plain value.
pub fn crf_nll<T: Scalar>(emissions: &Tensor<T>, gold: &[usize], params: &CrfParams<T>) -> Result<T> {
    let s = params.scores();
    let (emit, len) = emissions_f64(emissions, s.k)?;
    check_path(gold, len, s.k)?;
    check_gold(gold, params.mask.as_ref())?;
    let alpha = s.alpha(&emit, len);
    Ok(T::lit(s.log_z(&alpha, len) - s.path_score(&emit, gold)))
}

/// Posterior tag marginals `[L, K]`.
pub fn marginals<T: Scalar>(emissions: &Tensor<T>, params: &CrfParams<T>) -> Result<Tensor<T>> {
    let s = params.scores();
    let (emit, len) = emissions_f64(emissions, s.k)?;
    let alpha = s.alpha(&emit, len);
    let beta = s.beta(&emit, len);
    let z = s.log_z(&alpha, len);
    let data = (0..len * s.k).map(|i| T::lit((alpha[i] + beta[i] - z).exp())).collect();
    Ok(Tensor::new(vec![len, s.k], data)?)
}

struct CrfNllOp<T> {
    d_emit: Tensor<T>,
    d_trans: Tensor<T>,
    d_start: Tensor<T>,
    d_end: Tensor<T>,
}

impl<T: Scalar> CustomOp<T> for CrfNllOp<T> {
    fn name(&self) -> &str {
        "crf_nll"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad_output: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let g = grad_output.item();
        [&self.d_emit, &self.d_trans, &self.d_start, &self.d_end]
            .into_iter()
            .map(|d| {
                let mut d = d.clone();
                d.scale_assign(g);
                Some(d)
            })
            .collect()
    }
}

/// Differentiable CRF negative log-likelihood of `gold` on the tape.
///
/// `emissions` is `[L, K]`, `transitions` `[K, K]`, `start` and `end` `[K]`.
/// The gradient with respect to the emissions is the tag marginals minus the
/// gold one-hot rows; transition gradients are expected minus gold counts.
pub fn crf_nll_var<T: Scalar>(
    g: &mut Graph<T>,
    emissions: Var,
    transitions: Var,
    start: Var,
    end: Var,
    gold: &[usize],
    mask: Option<&TransitionMask>,
) -> Result<Var> {
    let s = Scores::new(
        g.value(transitions).data(),
        g.value(start).data(),
        g.value(end).data(),
        mask,
    );
    let k = s.k;
    let (emit, len) = emissions_f64(g.value(emissions), k)?;
    check_path(gold, len, k)?;
    check_gold(gold, mask)?;

    let alpha = s.alpha(&emit, len);
    let beta = s.beta(&emit, len);
    let z = s.log_z(&alpha, len);
    let nll = z - s.path_score(&emit, gold);

    let mut d_emit = vec![0.0; len * k];
    for i in 0..len * k {
        d_emit[i] = (alpha[i] + beta[i] - z).exp();
    }
    let mut d_trans = vec![0.0; k * k];
    for t in 1..len {
        for a in 0..k {
            let left = alpha[(t - 1) * k + a];
            for b in 0..k {
                d_trans[a * k + b] += (left + s.trans[a * k + b] + emit[t * k + b] + beta[t * k + b] - z).exp();
            }
        }
    }
    let d_start: Vec<f64> = (0..k).map(|j| d_emit[j]).collect();
    let mut d_end: Vec<f64> = (0..k).map(|j| d_emit[(len - 1) * k + j]).collect();
    for (t, &y) in gold.iter().enumerate() {
        d_emit[t * k + y] -= 1.0;
        if t > 0 {
            d_trans[gold[t - 1] * k + y] -= 1.0;
        }
    }
    let mut d_start = d_start;
    d_start[gold[0]] -= 1.0;
    d_end[gold[len - 1]] -= 1.0;

    let cast = |v: Vec<f64>, shape: Vec<usize>| Tensor::new(shape, v.into_iter().map(T::lit).collect()).unwrap();
    let op = CrfNllOp {
        d_emit: cast(d_emit, vec![len, k]),
        d_trans: cast(d_trans, vec![k, k]),
        d_start: cast(d_start, vec![k]),
        d_end: cast(d_end, vec![k]),
    };
    Ok(g.custom(
        &[emissions, transitions, start, end],
        Tensor::scalar(T::lit(nll)),
        Box::new(op),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunk::{ChunkLabel, TagSet};

    fn tags() -> TagSet<ChunkLabel> {
        TagSet::chunks()
    }

    fn id(s: &str) -> usize {
        tags().id(&s.parse().unwrap()).unwrap()
    }

    #[test]
    fn uniform_partitions() {
        let p = CrfParams::<f64>::zeros(2);
        let z1 = log_partition(&Tensor::zeros(vec![1, 2]), &p).unwrap();
        assert!((z1 - 2f64.ln()).abs() < 1e-12);
        let z2 = log_partition(&Tensor::zeros(vec![2, 2]), &p).unwrap();
        assert!((z2 - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(
            log_partition(&Tensor::<f64>::zeros(vec![0, 2]), &p),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn single_tag() {
        let p = CrfParams::<f64>::zeros(1);
        let e = Tensor::matrix(3, 1, vec![0.5, -1.0, 2.0]).unwrap();
        let (path, score) = viterbi(&e, &p).unwrap();
        assert_eq!(path, vec![0, 0, 0]);
        assert!((score - 1.5).abs() < 1e-12);
        assert_eq!(crf_nll(&e, &[0, 0, 0], &p).unwrap(), 0.0);
    }

    #[test]
    fn peaked_emissions_pick_argmax() {
        let p = CrfParams::<f64>::zeros(3);
        let e = Tensor::matrix(3, 3, vec![9.0, 0.0, 0.0, 0.0, 0.0, 9.0, 0.0, 9.0, 0.0]).unwrap();
        let (path, _) = viterbi(&e, &p).unwrap();
        assert_eq!(path, vec![0, 2, 1]);
        let nll = crf_nll(&e, &path, &p).unwrap();
        assert!(nll > 0.0 && nll < 1e-3);
    }

    #[test]
    fn ties_go_low() {
        let p = CrfParams::<f64>::zeros(3);
        let (path, _) = viterbi(&Tensor::zeros(vec![4, 3]), &p).unwrap();
        assert_eq!(path, vec![0, 0, 0, 0]);
    }

    #[test]
    fn bioul_mask_semantics() {
        let m = transition_mask(&tags());
        assert!(m.allowed(id("B-NP"), id("I-NP")));
        assert!(m.allowed(id("B-NP"), id("L-NP")));
        assert!(!m.allowed(id("B-NP"), id("I-VP")));
        assert!(!m.allowed(id("O"), id("I-NP")));
        assert!(!m.allowed(id("B-NP"), m.end()));
        assert!(m.allowed(id("L-NP"), m.end()));
        assert!(m.allowed(m.start(), id("U-VP")));
        assert!(!m.allowed(m.start(), id("L-VP")));
        assert!(m.allowed(id("U-NP"), id("B-PP")));
        assert!(!m.allowed(id("I-NP"), id("O")));
    }

    #[test]
    fn bio_mask_semantics() {
        let ts = TagSet::new(vec!["PER".to_string(), "LOC".to_string()], TagScheme::Bio);
        let m = transition_mask(&ts);
        let id = |s: &str| ts.id(&s.parse().unwrap()).unwrap();
        assert!(m.allowed(id("B-PER"), id("I-PER")));
        assert!(!m.allowed(id("O"), id("I-PER")));
        assert!(m.allowed(id("I-PER"), m.end()));
        assert!(!m.allowed(m.start(), id("I-LOC")));
    }

    #[test]
    fn fully_masked_has_no_path() {
        let mut p = CrfParams::<f64>::zeros(2);
        let mut m = TransitionMask::allow_all(2);
        m.set(m.start(), 0, false);
        m.set(m.start(), 1, false);
        p.mask = Some(m);
        assert!(matches!(viterbi(&Tensor::zeros(vec![2, 2]), &p), Err(Error::NoValidPath)));
    }

    #[test]
    fn masked_gold_rejected() {
        let mut p = CrfParams::<f64>::zeros(tags().len());
        p.mask = Some(transition_mask(&tags()));
        let e = Tensor::zeros(vec![2, tags().len()]);
        assert!(matches!(
            crf_nll(&e, &[id("O"), id("I-NP")], &p),
            Err(Error::GoldPathMasked(1))
        ));
        assert!(matches!(
            crf_nll(&e, &[id("O"), id("B-NP")], &p),
            Err(Error::GoldPathMasked(1))
        ));
    }

    #[test]
    fn nll_zero_when_one_path_survives() {
        let mut m = TransitionMask::allow_all(2);
        m.set(m.start(), 1, false);
        m.set(0, 0, false);
        m.set(1, 1, false);
        m.set(0, m.end(), false);
        let mut p = CrfParams::<f64>::zeros(2);
        p.mask = Some(m);
        let e = Tensor::matrix(2, 2, vec![0.3, -0.2, 1.0, 0.1]).unwrap();
        let nll = crf_nll(&e, &[0, 1], &p).unwrap();
        assert!(nll.abs() < 1e-12, "{nll}");
    }
}

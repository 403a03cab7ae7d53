//! Chunk labels, labeled spans, BIO/BIOUL tag algebra, span scoring and
//! derivation of flat chunks from constituency trees.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::hash::Hash;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::ParseTree;
use crate::error::{Error, Result};

/// The eleven chunk phrase types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChunkLabel {
    Np,
    Vp,
    Pp,
    Advp,
    Sbar,
    Adjp,
    Prt,
    Conjp,
    Intj,
    Lst,
    Ucp,
}

impl ChunkLabel {
    pub const ALL: [ChunkLabel; 11] = [
        ChunkLabel::Np,
        ChunkLabel::Vp,
        ChunkLabel::Pp,
        ChunkLabel::Advp,
        ChunkLabel::Sbar,
        ChunkLabel::Adjp,
        ChunkLabel::Prt,
        ChunkLabel::Conjp,
        ChunkLabel::Intj,
        ChunkLabel::Lst,
        ChunkLabel::Ucp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ChunkLabel::Np => "NP",
            ChunkLabel::Vp => "VP",
            ChunkLabel::Pp => "PP",
            ChunkLabel::Advp => "ADVP",
            ChunkLabel::Sbar => "SBAR",
            ChunkLabel::Adjp => "ADJP",
            ChunkLabel::Prt => "PRT",
            ChunkLabel::Conjp => "CONJP",
            ChunkLabel::Intj => "INTJ",
            ChunkLabel::Lst => "LST",
            ChunkLabel::Ucp => "UCP",
        }
    }

    /// Position in [`ChunkLabel::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ChunkLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ChunkLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "CONJ" {
            return Ok(ChunkLabel::Conjp);
        }
        ChunkLabel::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

/// Inclusive token span `begin..=end` with a label.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span<L> {
    pub begin: usize,
    pub end: usize,
    pub label: L,
}

pub type ChunkSpan = Span<ChunkLabel>;

impl<L> Span<L> {
    pub fn new(begin: usize, end: usize, label: L) -> Self {
        Span { begin, end, label }
    }

    pub fn len(&self) -> usize {
        self.end - self.begin + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl<L: fmt::Display> fmt::Display for Span<L> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{},{}>", self.begin, self.end, self.label)
    }
}

/// Checks that spans are in range, sorted and pairwise disjoint.
pub fn validate_spans<L>(spans: &[Span<L>], n: usize) -> Result<()> {
    for (i, s) in spans.iter().enumerate() {
        if s.begin > s.end || s.end >= n {
            return Err(Error::SpanOutOfRange {
                begin: s.begin,
                end: s.end,
                len: n,
            });
        }
        if i > 0 && spans[i - 1].end >= s.begin {
            return Err(Error::OverlappingSpans(i));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    Bio,
    Bioul,
}

impl FromStr for TagScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" => Ok(TagScheme::Bio),
            "bioul" => Ok(TagScheme::Bioul),
            _ => Err(Error::Config(format!("unknown tag scheme `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Tag<L> {
    Outside,
    Begin(L),
    Inside(L),
    Last(L),
    Unit(L),
}

impl<L> Tag<L> {
    pub fn label(&self) -> Option<&L> {
        match self {
            Tag::Outside => None,
            Tag::Begin(l) | Tag::Inside(l) | Tag::Last(l) | Tag::Unit(l) => Some(l),
        }
    }

    fn prefix(&self) -> &'static str {
        match self {
            Tag::Outside => "O",
            Tag::Begin(_) => "B",
            Tag::Inside(_) => "I",
            Tag::Last(_) => "L",
            Tag::Unit(_) => "U",
        }
    }

    /// Parses `O` or `P-LABEL` with `P` one of `B I L U`, plus the `E`/`S`
    /// spellings of the BIOES scheme.
    pub fn parse_with(s: &str, label: impl Fn(&str) -> Result<L>) -> Result<Self> {
        if s == "O" {
            return Ok(Tag::Outside);
        }
        let (p, rest) = s.split_once('-').ok_or_else(|| Error::BadTag(s.to_string()))?;
        if rest.is_empty() {
            return Err(Error::BadTag(s.to_string()));
        }
        let l = label(rest)?;
        match p {
            "B" => Ok(Tag::Begin(l)),
            "I" => Ok(Tag::Inside(l)),
            "L" | "E" => Ok(Tag::Last(l)),
            "U" | "S" => Ok(Tag::Unit(l)),
            _ => Err(Error::BadTag(s.to_string())),
        }
    }
}

impl<L: fmt::Display> fmt::Display for Tag<L> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.label() {
            None => f.write_str("O"),
            Some(l) => write!(f, "{}-{l}", self.prefix()),
        }
    }
}

impl FromStr for Tag<ChunkLabel> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::parse_with(s, str::parse)
    }
}

impl FromStr for Tag<String> {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Tag::parse_with(s, |l| Ok(l.to_string()))
    }
}

/// Dense numbering of the tags of a scheme over a label set.
///
/// Id 0 is `O`; label `k` owns ids `1 + w*k ..` where `w` is 2 for BIO
/// (`B I`) and 4 for BIOUL (`B I L U`).
#[derive(Debug, Clone)]
pub struct TagSet<L> {
    labels: Vec<L>,
    scheme: TagScheme,
    index: HashMap<L, usize>,
}

impl<L: Clone + Eq + Hash> TagSet<L> {
    pub fn new(labels: Vec<L>, scheme: TagScheme) -> Self {
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        TagSet {
            labels,
            scheme,
            index,
        }
    }

    pub fn labels(&self) -> &[L] {
        &self.labels
    }

    pub fn scheme(&self) -> TagScheme {
        self.scheme
    }

    fn width(&self) -> usize {
        match self.scheme {
            TagScheme::Bio => 2,
            TagScheme::Bioul => 4,
        }
    }

    pub fn len(&self) -> usize {
        1 + self.width() * self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn label_index(&self, label: &L) -> Option<usize> {
        self.index.get(label).copied()
    }

    /// Id of `tag`, or `None` if its label is unknown or its prefix does not
    /// belong to the scheme.
    pub fn id(&self, tag: &Tag<L>) -> Option<usize> {
        let off = match (tag, self.scheme) {
            (Tag::Outside, _) => return Some(0),
            (Tag::Begin(_), _) => 0,
            (Tag::Inside(_), _) => 1,
            (Tag::Last(_), TagScheme::Bioul) => 2,
            (Tag::Unit(_), TagScheme::Bioul) => 3,
            _ => return None,
        };
        let k = self.label_index(tag.label()?)?;
        Some(1 + self.width() * k + off)
    }

    pub fn tag(&self, id: usize) -> Result<Tag<L>> {
        if id >= self.len() {
            return Err(Error::TagOutOfRange {
                tag: id,
                size: self.len(),
            });
        }
        if id == 0 {
            return Ok(Tag::Outside);
        }
        let l = self.labels[(id - 1) / self.width()].clone();
        Ok(match (id - 1) % self.width() {
            0 => Tag::Begin(l),
            1 => Tag::Inside(l),
            2 => Tag::Last(l),
            _ => Tag::Unit(l),
        })
    }

    pub fn ids(&self, tags: &[Tag<L>]) -> Option<Vec<usize>> {
        tags.iter().map(|t| self.id(t)).collect()
    }

    pub fn tags(&self, ids: &[usize]) -> Result<Vec<Tag<L>>> {
        ids.iter().map(|&i| self.tag(i)).collect()
    }
}

impl TagSet<ChunkLabel> {
    /// BIOUL tags over all eleven chunk labels (45 tags).
    pub fn chunks() -> Self {
        TagSet::new(ChunkLabel::ALL.to_vec(), TagScheme::Bioul)
    }
}

/// BIOUL tags for `spans` over `n` tokens.
pub fn encode_bioul<L: Clone>(spans: &[Span<L>], n: usize) -> Result<Vec<Tag<L>>> {
    validate_spans(spans, n)?;
    let mut tags = vec![Tag::Outside; n];
    for s in spans {
        if s.begin == s.end {
            tags[s.begin] = Tag::Unit(s.label.clone());
        } else {
            tags[s.begin] = Tag::Begin(s.label.clone());
            for t in &mut tags[s.begin + 1..s.end] {
                *t = Tag::Inside(s.label.clone());
            }
            tags[s.end] = Tag::Last(s.label.clone());
        }
    }
    Ok(tags)
}

/// BIO tags for `spans` over `n` tokens.
pub fn encode_bio<L: Clone>(spans: &[Span<L>], n: usize) -> Result<Vec<Tag<L>>> {
    validate_spans(spans, n)?;
    let mut tags = vec![Tag::Outside; n];
    for s in spans {
        tags[s.begin] = Tag::Begin(s.label.clone());
        for t in &mut tags[s.begin + 1..=s.end] {
            *t = Tag::Inside(s.label.clone());
        }
    }
    Ok(tags)
}

/// Spans of a BIOUL sequence.
///
/// In strict mode any invalid transition is an error. Otherwise `I`/`L` with
/// no open span of the same label open a new span, and an open span cut off
/// by `O`, `U`, `B`, a label change or the end of input is closed at the
/// previous position. A BIO sequence decodes to its spans in repair mode.
pub fn decode_bioul<L: Clone + PartialEq>(tags: &[Tag<L>], strict: bool) -> Result<Vec<Span<L>>> {
    let mut spans = Vec::new();
    let mut open: Option<(usize, L)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let continues = matches!((&open, tag.label()), (Some((_, a)), Some(b)) if a == b)
            && matches!(tag, Tag::Inside(_) | Tag::Last(_));
        if continues {
            if let Tag::Last(_) = tag {
                let (b, l) = open.take().unwrap();
                spans.push(Span::new(b, i, l));
            }
            continue;
        }
        let opens_midway = matches!(tag, Tag::Inside(_) | Tag::Last(_));
        if strict && (open.is_some() || opens_midway) {
            return Err(Error::InvalidSequence(i));
        }
        if let Some((b, l)) = open.take() {
            spans.push(Span::new(b, i - 1, l));
        }
        match tag {
            Tag::Outside => {}
            Tag::Begin(l) | Tag::Inside(l) => open = Some((i, l.clone())),
            Tag::Last(l) | Tag::Unit(l) => spans.push(Span::new(i, i, l.clone())),
        }
    }
    if let Some((b, l)) = open {
        if strict {
            return Err(Error::InvalidSequence(tags.len()));
        }
        spans.push(Span::new(b, tags.len() - 1, l));
    }
    Ok(spans)
}

/// Spans of a BIO sequence; in strict mode an `I` must continue a span of
/// the same label and `L`/`U` tags are rejected.
pub fn decode_bio<L: Clone + PartialEq>(tags: &[Tag<L>], strict: bool) -> Result<Vec<Span<L>>> {
    if strict {
        let mut prev: Option<&L> = None;
        for (i, t) in tags.iter().enumerate() {
            match t {
                Tag::Inside(l) if prev != Some(l) => return Err(Error::InvalidSequence(i)),
                Tag::Last(_) | Tag::Unit(_) => return Err(Error::InvalidSequence(i)),
                _ => {}
            }
            prev = t.label();
        }
    }
    let spans = decode_bioul(tags, false)?;
    Ok(spans)
}

/// Parses tag strings in either scheme and returns the spans they denote.
pub fn spans_from_strings<L, F>(tags: &[String], label: F) -> Result<Vec<Span<L>>>
where
    L: Clone + PartialEq,
    F: Fn(&str) -> Result<L>,
{
    let parsed = tags
        .iter()
        .map(|t| Tag::parse_with(t, &label))
        .collect::<Result<Vec<_>>>()?;
    decode_bioul(&parsed, false)
}

/// Rewrites a BIO (or already BIOUL) string sequence as BIOUL.
pub fn to_bioul_strings(tags: &[String]) -> Result<Vec<String>> {
    let spans = spans_from_strings(tags, |l| Ok(l.to_string()))?;
    Ok(encode_bioul(&spans, tags.len())?.iter().map(Tag::to_string).collect())
}

/// Chunk spans of each sentence's string tags.
pub fn chunk_spans(tags: &[String]) -> Result<Vec<ChunkSpan>> {
    spans_from_strings(tags, str::parse)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(correct: usize, predicted: usize, gold: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Prf {
            precision,
            recall,
            f1,
            correct,
            predicted,
            gold,
        }
    }
}

impl fmt::Display for Prf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "precision {:.4}  recall {:.4}  f1 {:.4}",
            self.precision, self.recall, self.f1
        )
    }
}

/// Percentage of all spans carrying each label, most frequent first (ties in
/// label order). Labels that never occur are listed with 0.
pub fn label_distribution(corpus: &[Vec<ChunkSpan>]) -> Vec<(ChunkLabel, f64)> {
    let mut counts = [0usize; ChunkLabel::ALL.len()];
    for s in corpus.iter().flatten() {
        counts[s.label.index()] += 1;
    }
    let total = counts.iter().sum::<usize>().max(1) as f64;
    let mut out: Vec<(ChunkLabel, f64)> = ChunkLabel::ALL
        .iter()
        .map(|&l| (l, 100.0 * counts[l.index()] as f64 / total))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    out
}

/// Exact-match span precision, recall and F1 over a corpus.
pub fn chunk_f1<L: Eq + Hash>(gold: &[Vec<Span<L>>], pred: &[Vec<Span<L>>]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::LengthMismatch {
            gold: gold.len(),
            pred: pred.len(),
        });
    }
    let (mut correct, mut npred, mut ngold) = (0, 0, 0);
    for (g, p) in gold.iter().zip(pred) {
        let gs: HashSet<&Span<L>> = g.iter().collect();
        let ps: HashSet<&Span<L>> = p.iter().collect();
        correct += ps.iter().filter(|s| gs.contains(*s)).count();
        npred += ps.len();
        ngold += gs.len();
    }
    Ok(Prf::from_counts(correct, npred, ngold))
}

/// Reading direction of a language model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Forward, Direction::Backward];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Forward => "fwd",
            Direction::Backward => "bwd",
        }
    }
}

/// For each position, the index into `spans` of its chunk context.
///
/// Forward: the span with the greatest `end < i`. Backward: the span with the
/// least `begin > i`. `None` where no such span exists.
pub fn context_indices<L>(spans: &[Span<L>], n: usize, direction: Direction) -> Vec<Option<usize>> {
    match direction {
        Direction::Forward => {
            let mut next = 0;
            (0..n)
                .map(|i| {
                    while next < spans.len() && spans[next].end < i {
                        next += 1;
                    }
                    next.checked_sub(1)
                })
                .collect()
        }
        Direction::Backward => {
            let mut first = 0;
            (0..n)
                .map(|i| {
                    while first < spans.len() && spans[first].begin <= i {
                        first += 1;
                    }
                    (first < spans.len()).then_some(first)
                })
                .collect()
        }
    }
}

/// Chunk context of each position; `None` is the empty context.
pub fn chunk_contexts<L: Clone>(spans: &[Span<L>], n: usize, direction: Direction) -> Vec<Option<Span<L>>> {
    context_indices(spans, n, direction)
        .into_iter()
        .map(|c| c.map(|k| spans[k].clone()))
        .collect()
}

/// POS tags whose tokens never belong to a chunk.
pub const PUNCTUATION_POS: [&str; 8] = [".", ",", ":", "``", "''", "-LRB-", "-RRB-", "#"];

pub fn is_punctuation(pos: &str) -> bool {
    PUNCTUATION_POS.contains(&pos)
}

/// Constituent category without function tags or indices (`NP-SBJ-1` to `NP`).
pub fn strip_function_tags(label: &str) -> &str {
    if label.starts_with('-') {
        return label;
    }
    let cut = label
        .char_indices()
        .skip(1)
        .find(|&(_, c)| c == '-' || c == '=')
        .map_or(label.len(), |(i, _)| i);
    &label[..cut]
}

/// Flat chunks of a tree: each token joins its lowest ancestor whose category
/// is a chunk label, and maximal runs of tokens sharing that node form a span.
/// Punctuation tokens and tokens with no such ancestor are left outside.
pub fn derive_chunks(tree: &ParseTree) -> Result<Vec<ChunkSpan>> {
    let mut owners: Vec<Option<(usize, ChunkLabel)>> = Vec::new();
    let mut counter = 0;
    assign_owners(tree, None, &mut counter, &mut owners);
    if owners.is_empty() {
        return Err(Error::EmptyTree { line: 0 });
    }
    let mut spans: Vec<ChunkSpan> = Vec::new();
    let mut prev: Option<usize> = None;
    for (i, owner) in owners.iter().enumerate() {
        match owner {
            Some((node, label)) => {
                if prev == Some(*node) {
                    spans.last_mut().unwrap().end = i;
                } else {
                    spans.push(Span::new(i, i, *label));
                }
                prev = Some(*node);
            }
            None => prev = None,
        }
    }
    Ok(spans)
}

fn assign_owners(
    tree: &ParseTree,
    owner: Option<(usize, ChunkLabel)>,
    counter: &mut usize,
    out: &mut Vec<Option<(usize, ChunkLabel)>>,
) {
    match tree {
        ParseTree::Leaf { pos, .. } => out.push(if is_punctuation(pos) { None } else { owner }),
        ParseTree::Node { label, children } => {
            let id = *counter;
            *counter += 1;
            let owner = match strip_function_tags(label).parse::<ChunkLabel>() {
                Ok(l) => Some((id, l)),
                Err(_) => owner,
            };
            for c in children {
                assign_owners(c, owner, counter, out);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::read_ptb;
    use ChunkLabel::*;

    fn sp(b: usize, e: usize, l: ChunkLabel) -> ChunkSpan {
        Span::new(b, e, l)
    }

    fn tags(s: &str) -> Vec<Tag<ChunkLabel>> {
        s.split(' ').map(|t| t.parse().unwrap()).collect()
    }

    fn derive(s: &str) -> Vec<ChunkSpan> {
        derive_chunks(&read_ptb(s).unwrap()[0]).unwrap()
    }

    #[test]
    fn label_parsing() {
        assert_eq!("SBAR".parse::<ChunkLabel>().unwrap(), Sbar);
        assert_eq!("CONJ".parse::<ChunkLabel>().unwrap(), Conjp);
        assert!(matches!("S".parse::<ChunkLabel>(), Err(Error::UnknownLabel(_))));
        for l in ChunkLabel::ALL {
            assert_eq!(l.as_str().parse::<ChunkLabel>().unwrap(), l);
        }
    }

    #[test]
    fn tagset_inventory() {
        let ts = TagSet::chunks();
        assert_eq!(ts.len(), 45);
        for id in 0..ts.len() {
            let t = ts.tag(id).unwrap();
            let s = t.to_string();
            assert_eq!(ts.id(&s.parse().unwrap()), Some(id));
        }
        assert!(ts.tag(45).is_err());
        assert_eq!(TagSet::new(vec![Np], TagScheme::Bio).len(), 3);
    }

    #[test]
    fn encode_examples() {
        let t = encode_bioul(&[sp(0, 1, Np), sp(2, 2, Vp)], 4).unwrap();
        assert_eq!(t, tags("B-NP L-NP U-VP O"));
        assert_eq!(encode_bioul::<ChunkLabel>(&[], 3).unwrap(), vec![Tag::Outside; 3]);
        assert!(matches!(
            encode_bioul(&[sp(0, 2, Np)], 2),
            Err(Error::SpanOutOfRange { .. })
        ));
        assert!(matches!(
            encode_bioul(&[sp(0, 2, Np), sp(2, 3, Vp)], 5),
            Err(Error::OverlappingSpans(1))
        ));
        let long = encode_bioul(&[sp(1, 4, Pp)], 5).unwrap();
        assert_eq!(long, tags("O B-PP I-PP I-PP L-PP"));
    }

    #[test]
    fn decode_examples() {
        assert_eq!(
            decode_bioul(&tags("B-NP L-NP U-VP O"), true).unwrap(),
            vec![sp(0, 1, Np), sp(2, 2, Vp)]
        );
        assert_eq!(decode_bioul(&tags("I-NP O"), false).unwrap(), vec![sp(0, 0, Np)]);
        assert!(matches!(
            decode_bioul(&tags("I-NP O"), true),
            Err(Error::InvalidSequence(0))
        ));
        assert!(matches!(
            decode_bioul(&tags("B-NP"), true),
            Err(Error::InvalidSequence(1))
        ));
        assert!(matches!(
            decode_bioul(&tags("B-NP I-VP L-VP"), true),
            Err(Error::InvalidSequence(1))
        ));
    }

    #[test]
    fn repair_cases() {
        assert_eq!(
            decode_bioul(&tags("B-NP I-NP U-VP L-NP"), false).unwrap(),
            vec![sp(0, 1, Np), sp(2, 2, Vp), sp(3, 3, Np)]
        );
        assert_eq!(
            decode_bioul(&tags("B-NP I-VP L-VP"), false).unwrap(),
            vec![sp(0, 0, Np), sp(1, 2, Vp)]
        );
        assert_eq!(decode_bioul(&tags("O B-PP"), false).unwrap(), vec![sp(1, 1, Pp)]);
    }

    #[test]
    fn bio_conversion() {
        let bio: Vec<String> = "B-NP I-NP B-VP O B-NP B-NP"
            .split(' ')
            .map(str::to_string)
            .collect();
        let bioul = to_bioul_strings(&bio).unwrap();
        assert_eq!(bioul.join(" "), "B-NP L-NP U-VP O U-NP U-NP");
        let spans = chunk_spans(&bio).unwrap();
        let back: Vec<String> = encode_bio(&spans, 6).unwrap().iter().map(Tag::to_string).collect();
        assert_eq!(back, bio);
        assert!(decode_bio(&tags("O I-NP"), true).is_err());
        assert_eq!(decode_bio(&tags("B-NP I-NP"), true).unwrap(), vec![sp(0, 1, Np)]);
    }

    #[test]
    fn distribution_sums_to_100() {
        let d = label_distribution(&[vec![sp(0, 0, Vp), sp(1, 2, Np)], vec![sp(0, 1, Np), sp(3, 3, Pp)]]);
        assert_eq!(d[0], (Np, 50.0));
        assert_eq!(d[1], (Vp, 25.0));
        assert_eq!(d[2], (Pp, 25.0));
        assert_eq!(d.len(), 11);
        assert!(label_distribution(&[]).iter().all(|(_, p)| *p == 0.0));
    }

    #[test]
    fn f1_examples() {
        let gold = vec![vec![sp(0, 1, Np), sp(2, 2, Vp)]];
        let p = chunk_f1(&gold, &gold).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = chunk_f1(&gold, &[vec![sp(0, 1, Np)]]).unwrap();
        assert_eq!((p.precision, p.recall), (1.0, 0.5));
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-12);
        let p = chunk_f1(&gold, &[vec![]]).unwrap();
        assert_eq!((p.precision, p.recall, p.f1), (0.0, 0.0, 0.0));
        assert!(matches!(
            chunk_f1(&gold, &[]),
            Err(Error::LengthMismatch { gold: 1, pred: 0 })
        ));
        let p = chunk_f1(&gold, &[vec![sp(0, 1, Vp)]]).unwrap();
        assert_eq!(p.correct, 0);
    }

    #[test]
    fn contexts() {
        let spans = [sp(0, 1, Np)];
        assert_eq!(
            chunk_contexts(&spans, 3, Direction::Forward),
            vec![None, None, Some(sp(0, 1, Np))]
        );
        // "He will join the board": NP=He, VP=will join, NP=the board.
        let s = [sp(0, 0, Np), sp(1, 2, Vp), sp(3, 4, Np)];
        let fwd = context_indices(&s, 5, Direction::Forward);
        assert_eq!(fwd, vec![None, Some(0), Some(0), Some(1), Some(1)]);
        let bwd = context_indices(&s, 5, Direction::Backward);
        assert_eq!(bwd, vec![Some(1), Some(2), Some(2), None, None]);
    }

    #[test]
    fn derive_simple() {
        assert_eq!(
            derive("(S (NP (DT the) (NN dog)) (VP (VBZ barks)) (. .))"),
            vec![sp(0, 1, Np), sp(2, 2, Vp)]
        );
        assert_eq!(derive("(NP (NN dogs))"), vec![sp(0, 0, Np)]);
    }

    #[test]
    fn derive_embedded() {
        // the dog in the yard barked
        let s = derive(
            "(S (NP-SBJ (NP (DT the) (NN dog)) (PP-LOC (IN in) (NP (DT the) (NN yard)))) (VP (VBD barked)))",
        );
        assert_eq!(s, vec![sp(0, 1, Np), sp(2, 2, Pp), sp(3, 4, Np), sp(5, 5, Vp)]);
        // An NP whose head follows an embedded phrase splits into two runs.
        let s = derive("(NP (DT a) (ADJP (RB very) (JJ big)) (NN dog))");
        assert_eq!(s, vec![sp(0, 0, Np), sp(1, 2, Adjp), sp(3, 3, Np)]);
    }

    #[test]
    fn derive_punctuation_and_unlabeled() {
        let s = derive("(S (NP (NNP Mr.) (, ,) (NNP Smith)) (VP (VBD left)) (. .))");
        assert_eq!(s, vec![sp(0, 0, Np), sp(2, 2, Np), sp(3, 3, Vp)]);
        let s = derive("(S (CC But) (NP (PRP he)) (VP (VBD left)))");
        assert_eq!(s, vec![sp(1, 1, Np), sp(2, 2, Vp)]);
        let s = derive("(S (NP ($ $) (CD 5)))");
        assert_eq!(s, vec![sp(0, 1, Np)]);
    }

    #[test]
    fn strip_tags() {
        assert_eq!(strip_function_tags("NP-SBJ-1"), "NP");
        assert_eq!(strip_function_tags("NP=2"), "NP");
        assert_eq!(strip_function_tags("-NONE-"), "-NONE-");
        assert_eq!(strip_function_tags("ADVP"), "ADVP");
    }
}

//! Readers and writers for bracketed treebank files, CoNLL-2000 chunk
//! columns and raw tokenized text, plus vocabulary construction.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Constituency tree with POS-tagged word leaves.
///
/// Labels are stored exactly as read, function tags and coindexation included.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseTree {
    Node { label: String, children: Vec<ParseTree> },
    Leaf { word: String, pos: String },
}

impl ParseTree {
    pub fn node(label: impl Into<String>, children: Vec<ParseTree>) -> Self {
        ParseTree::Node {
            label: label.into(),
            children,
        }
    }

    pub fn leaf(pos: impl Into<String>, word: impl Into<String>) -> Self {
        ParseTree::Leaf {
            word: word.into(),
            pos: pos.into(),
        }
    }

    /// `(word, pos)` pairs in sentence order.
    pub fn leaves(&self) -> Vec<(&str, &str)> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<(&'a str, &'a str)>) {
        match self {
            ParseTree::Leaf { word, pos } => out.push((word, pos)),
            ParseTree::Node { children, .. } => {
                for c in children {
                    c.collect_leaves(out);
                }
            }
        }
    }

    pub fn words(&self) -> Vec<String> {
        self.leaves().into_iter().map(|(w, _)| w.to_string()).collect()
    }

    pub fn pos_tags(&self) -> Vec<String> {
        self.leaves().into_iter().map(|(_, p)| p.to_string()).collect()
    }

    pub fn num_leaves(&self) -> usize {
        match self {
            ParseTree::Leaf { .. } => 1,
            ParseTree::Node { children, .. } => children.iter().map(Self::num_leaves).sum(),
        }
    }

    /// Drops `-NONE-` leaves and any constituent left without children.
    fn without_traces(self) -> Option<ParseTree> {
        match self {
            ParseTree::Leaf { ref pos, .. } if pos == "-NONE-" => None,
            leaf @ ParseTree::Leaf { .. } => Some(leaf),
            ParseTree::Node { label, children } => {
                let children: Vec<ParseTree> =
                    children.into_iter().filter_map(Self::without_traces).collect();
                if children.is_empty() {
                    None
                } else {
                    Some(ParseTree::Node { label, children })
                }
            }
        }
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParseTree::Leaf { word, pos } => write!(f, "({pos} {word})"),
            ParseTree::Node { label, children } => {
                write!(f, "({label}")?;
                for c in children {
                    write!(f, " {c}")?;
                }
                f.write_str(")")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Token<'a> {
    Open,
    Close,
    Atom(&'a str),
}

struct Lexeme<'a> {
    token: Token<'a>,
    line: usize,
    offset: usize,
}

fn lex(text: &str) -> Vec<Lexeme<'_>> {
    let mut out = Vec::new();
    let mut line = 1;
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'\n' => {
                line += 1;
                i += 1;
            }
            b if b.is_ascii_whitespace() => i += 1,
            b'(' => {
                out.push(Lexeme {
                    token: Token::Open,
                    line,
                    offset: i,
                });
                i += 1;
            }
            b')' => {
                out.push(Lexeme {
                    token: Token::Close,
                    line,
                    offset: i,
                });
                i += 1;
            }
            _ => {
                let start = i;
                while i < bytes.len()
                    && !bytes[i].is_ascii_whitespace()
                    && bytes[i] != b'('
                    && bytes[i] != b')'
                {
                    i += 1;
                }
                out.push(Lexeme {
                    token: Token::Atom(&text[start..i]),
                    line,
                    offset: start,
                });
            }
        }
    }
    out
}

enum Item {
    Tree(ParseTree),
    Atom(String),
}

struct Frame {
    label: Option<String>,
    items: Vec<Item>,
    line: usize,
    offset: usize,
}

fn close_frame(frame: Frame) -> Result<ParseTree> {
    let Frame {
        label,
        items,
        line,
        ..
    } = frame;
    let label = label.unwrap_or_default();
    let atoms = items.iter().filter(|i| matches!(i, Item::Atom(_))).count();
    match (atoms, items.len()) {
        (1, 1) => {
            let Some(Item::Atom(word)) = items.into_iter().next() else {
                unreachable!()
            };
            if label.is_empty() {
                return Err(Error::MalformedTree {
                    line,
                    message: format!("word `{word}` has no POS tag"),
                });
            }
            Ok(ParseTree::Leaf { word, pos: label })
        }
        (0, _) => Ok(ParseTree::Node {
            label,
            children: items
                .into_iter()
                .map(|i| match i {
                    Item::Tree(t) => t,
                    Item::Atom(_) => unreachable!(),
                })
                .collect(),
        }),
        _ => Err(Error::MalformedTree {
            line,
            message: format!("constituent `{label}` mixes words and subtrees"),
        }),
    }
}

/// Parses every top-level s-expression in `text`.
///
/// A unary wrapper with an empty, `ROOT` or `TOP` label is removed, `-NONE-`
/// trace leaves are deleted and constituents emptied by that are pruned.
pub fn read_ptb(text: &str) -> Result<Vec<ParseTree>> {
    let mut trees = Vec::new();
    let mut stack: Vec<Frame> = Vec::new();
    let mut tree_line = 0;
    for lx in lex(text) {
        match lx.token {
            Token::Open => {
                if stack.is_empty() {
                    tree_line = lx.line;
                }
                stack.push(Frame {
                    label: None,
                    items: Vec::new(),
                    line: lx.line,
                    offset: lx.offset,
                });
            }
            Token::Atom(a) => {
                let Some(top) = stack.last_mut() else {
                    return Err(Error::MalformedTree {
                        line: lx.line,
                        message: format!("atom `{a}` outside any bracket"),
                    });
                };
                if top.label.is_none() && top.items.is_empty() {
                    top.label = Some(a.to_string());
                } else {
                    top.items.push(Item::Atom(a.to_string()));
                }
            }
            Token::Close => {
                let Some(frame) = stack.pop() else {
                    return Err(Error::UnbalancedParens {
                        line: lx.line,
                        offset: lx.offset,
                    });
                };
                let tree = close_frame(frame)?;
                match stack.last_mut() {
                    Some(parent) => {
                        if parent.label.is_none() && parent.items.is_empty() {
                            parent.label = Some(String::new());
                        }
                        parent.items.push(Item::Tree(tree));
                    }
                    None => trees.push(finish_tree(tree, tree_line)?),
                }
            }
        }
    }
    if let Some(open) = stack.first() {
        return Err(Error::UnbalancedParens {
            line: open.line,
            offset: open.offset,
        });
    }
    Ok(trees)
}

fn finish_tree(tree: ParseTree, line: usize) -> Result<ParseTree> {
    let tree = match tree {
        ParseTree::Node { label, mut children }
            if children.len() == 1 && matches!(label.as_str(), "" | "ROOT" | "TOP") =>
        {
            children.pop().unwrap()
        }
        t => t,
    };
    tree.without_traces().ok_or(Error::EmptyTree { line })
}

/// One tree per line in bracketed notation.
pub fn write_ptb(trees: &[ParseTree]) -> String {
    let mut out = String::new();
    for t in trees {
        out.push_str(&t.to_string());
        out.push('\n');
    }
    out
}

/// Tokens with optional parallel POS and span-tag columns.
///
/// For chunking data the tags are chunk tags; for downstream span tasks the
/// same field holds the task's span tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub pos: Option<Vec<String>>,
    pub chunk_tags: Option<Vec<String>>,
}

impl TaggedSentence {
    pub fn new(
        tokens: Vec<String>,
        pos: Option<Vec<String>>,
        chunk_tags: Option<Vec<String>>,
    ) -> Result<Self> {
        let s = TaggedSentence {
            tokens,
            pos,
            chunk_tags,
        };
        s.validate(0)?;
        Ok(s)
    }

    pub fn untagged(tokens: Vec<String>) -> Self {
        TaggedSentence {
            tokens,
            pos: None,
            chunk_tags: None,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn validate(&self, index: usize) -> Result<()> {
        let n = self.tokens.len();
        let ragged = n == 0
            || self.pos.as_ref().is_some_and(|p| p.len() != n)
            || self.chunk_tags.as_ref().is_some_and(|t| t.len() != n);
        if ragged {
            return Err(Error::RaggedSentence { sentence: index });
        }
        Ok(())
    }
}

/// Reads `token POS chunk-tag` lines; a blank line ends a sentence.
pub fn read_conll2000(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut sents = Vec::new();
    let mut cur = (Vec::new(), Vec::new(), Vec::new());
    let flush = |cur: &mut (Vec<String>, Vec<String>, Vec<String>), sents: &mut Vec<TaggedSentence>| {
        if !cur.0.is_empty() {
            let (t, p, c) = std::mem::take(cur);
            sents.push(TaggedSentence {
                tokens: t,
                pos: Some(p),
                chunk_tags: Some(c),
            });
        }
    };
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            flush(&mut cur, &mut sents);
            continue;
        }
        let cols: Vec<&str> = line.split(' ').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.is_empty()) {
            return Err(Error::BadColumnCount {
                line: i + 1,
                found: cols.iter().filter(|c| !c.is_empty()).count(),
            });
        }
        cur.0.push(cols[0].to_string());
        cur.1.push(cols[1].to_string());
        cur.2.push(cols[2].to_string());
    }
    flush(&mut cur, &mut sents);
    if sents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(sents)
}

/// Placeholder written in the POS column when a sentence has no POS tags.
pub const DUMMY_POS: &str = "_";

/// Inverse of [`read_conll2000`]; every sentence is followed by a blank line.
pub fn write_conll2000(sents: &[TaggedSentence]) -> Result<String> {
    let mut out = String::new();
    for (i, s) in sents.iter().enumerate() {
        s.validate(i)?;
        let tags = s.chunk_tags.as_ref().ok_or(Error::MissingTags(i))?;
        for (j, tok) in s.tokens.iter().enumerate() {
            let pos = s.pos.as_ref().map_or(DUMMY_POS, |p| p[j].as_str());
            out.push_str(tok);
            out.push(' ');
            out.push_str(pos);
            out.push(' ');
            out.push_str(&tags[j]);
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Reads whitespace-separated column data for downstream span tasks.
///
/// The first column is the token and the last the span tag; with three or
/// more columns the second is taken as POS. `-DOCSTART-` lines are skipped.
pub fn read_task_columns(text: &str) -> Result<Vec<TaggedSentence>> {
    let mut sents = Vec::new();
    let mut tokens = Vec::new();
    let mut pos = Vec::new();
    let mut tags = Vec::new();
    let mut with_pos = true;
    let mut flush = |tokens: &mut Vec<String>, pos: &mut Vec<String>, tags: &mut Vec<String>, with_pos: bool| {
        if !tokens.is_empty() {
            sents.push(TaggedSentence {
                tokens: std::mem::take(tokens),
                pos: if with_pos { Some(std::mem::take(pos)) } else { None },
                chunk_tags: Some(std::mem::take(tags)),
            });
        }
        pos.clear();
    };
    for (i, line) in text.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut tokens, &mut pos, &mut tags, with_pos);
            with_pos = true;
            continue;
        }
        if cols[0] == "-DOCSTART-" {
            continue;
        }
        if cols.len() < 2 {
            return Err(Error::BadColumnCount {
                line: i + 1,
                found: cols.len(),
            });
        }
        tokens.push(cols[0].to_string());
        tags.push(cols[cols.len() - 1].to_string());
        if cols.len() >= 3 {
            pos.push(cols[1].to_string());
        } else {
            with_pos = false;
        }
    }
    flush(&mut tokens, &mut pos, &mut tags, with_pos);
    if sents.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(sents)
}

/// One tokenized sentence per line; empty lines are skipped.
pub fn read_raw(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect()
}

pub fn write_raw(sents: &[Vec<String>]) -> String {
    let mut out = String::new();
    for s in sents {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    out
}

/// Token/id map with the three reserved symbols at fixed ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub const UNK: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const RESERVED: [&'static str; 3] = ["<unk>", "<s>", "</s>"];

    /// A vocabulary from an explicit token list; reserved symbols are prepended
    /// and duplicates dropped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in Self::RESERVED.iter().map(|s| s.to_string()).chain(tokens.into_iter().map(Into::into)) {
            if !v.index.contains_key(&t) {
                v.index.insert(t.clone(), v.tokens.len());
                v.tokens.push(t);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, or [`Vocabulary::UNK`].
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// All tokens in id order, reserved symbols first.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Tokens seen at least `min_count` times, most frequent first (ties broken
/// alphabetically), truncated so the whole vocabulary has at most `max_size`
/// entries including the reserved ones.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>], min_count: usize, max_size: usize) -> Vocabulary {
    let min_count = min_count.max(1);
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sent in corpus {
        for tok in sent {
            let t = tok.as_ref();
            if !Vocabulary::RESERVED.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let room = max_size.saturating_sub(Vocabulary::RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().take(room).map(|(t, _)| t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split(' ').map(str::to_string).collect()
    }

    #[test]
    fn reads_minimal_tree() {
        let trees = read_ptb("(S (NP (DT the) (NN dog)) (VP (VBZ barks)))").unwrap();
        assert_eq!(trees.len(), 1);
        let expected = ParseTree::node(
            "S",
            vec![
                ParseTree::node("NP", vec![ParseTree::leaf("DT", "the"), ParseTree::leaf("NN", "dog")]),
                ParseTree::node("VP", vec![ParseTree::leaf("VBZ", "barks")]),
            ],
        );
        assert_eq!(trees[0], expected);
    }

    #[test]
    fn empty_input_gives_no_trees() {
        assert!(read_ptb("").unwrap().is_empty());
        assert!(read_ptb("  \n\n").unwrap().is_empty());
    }

    #[test]
    fn unclosed_paren_is_located() {
        match read_ptb("(S (NP (DT the)") {
            Err(Error::UnbalancedParens { line: 1, offset: 0 }) => {}
            other => panic!("{other:?}"),
        }
        match read_ptb("(NP (DT a))\n)") {
            Err(Error::UnbalancedParens { line: 2, offset: 12 }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrapper_and_traces_removed() {
        let text = "( (S (NP-SBJ-1 (-NONE- *)) (NP-SBJ (PRP He)) (VP (VBZ barks) (S (NP (-NONE- *T*-1)))) (. .)) )";
        let trees = read_ptb(text).unwrap();
        assert_eq!(trees[0].to_string(), "(S (NP-SBJ (PRP He)) (VP (VBZ barks)) (. .))");
        assert_eq!(trees[0].words(), toks("He barks ."));
        let rooted = read_ptb("(ROOT (NP (NN dogs)))").unwrap();
        assert_eq!(rooted[0].to_string(), "(NP (NN dogs))");
    }

    #[test]
    fn all_trace_tree_is_empty() {
        assert!(matches!(
            read_ptb("(S (NP (-NONE- *)))"),
            Err(Error::EmptyTree { line: 1 })
        ));
    }

    #[test]
    fn several_trees_per_file() {
        let trees = read_ptb("(NP (NN a))\n(NP (NN b))\n\n(VP (VB c))").unwrap();
        assert_eq!(trees.len(), 3);
        assert_eq!(trees[2].words(), vec!["c"]);
    }

    #[test]
    fn reads_conll() {
        let s = read_conll2000("He PRP B-NP\nbarks VBZ B-VP\n. . O\n\n").unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].tokens, toks("He barks ."));
        assert_eq!(s[0].chunk_tags.as_ref().unwrap(), &toks("B-NP B-VP O"));
        let two = read_conll2000("a DT B-NP\n\nb NN B-NP\n").unwrap();
        assert_eq!(two.len(), 2);
    }

    #[test]
    fn conll_column_errors() {
        assert!(matches!(
            read_conll2000("He PRP"),
            Err(Error::BadColumnCount { line: 1, found: 2 })
        ));
        assert!(matches!(read_conll2000("\n\n"), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn conll_round_trip() {
        let text = "He PRP B-NP\nbarks VBZ B-VP\n. . O\n\n";
        let s = read_conll2000(text).unwrap();
        assert_eq!(write_conll2000(&s).unwrap(), text);
        assert_eq!(write_conll2000(&[]).unwrap(), "");
        let untagged = TaggedSentence::untagged(toks("a b"));
        assert!(matches!(write_conll2000(&[untagged]), Err(Error::MissingTags(0))));
    }

    #[test]
    fn task_columns_skip_docstart() {
        let text = "-DOCSTART- -X- -X- O\n\nEU NNP B-NP B-ORG\nrejects VBZ B-VP O\n\nPeter B-PER\n";
        let s = read_task_columns(text).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].chunk_tags.as_ref().unwrap(), &toks("B-ORG O"));
        assert_eq!(s[0].pos.as_ref().unwrap(), &toks("NNP VBZ"));
        assert!(s[1].pos.is_none());
    }

    #[test]
    fn vocab_min_count() {
        let v = build_vocab(&[toks("a a b")], 2, 100);
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        assert_eq!(v.id("b"), Vocabulary::UNK);
    }

    #[test]
    fn vocab_reserved_only() {
        let v = build_vocab::<String>(&[], 1, 100);
        assert_eq!(v.len(), 3);
        assert_eq!(v.id("<s>"), Vocabulary::BOS);
        assert_eq!(v.id("</s>"), Vocabulary::EOS);
    }

    #[test]
    fn vocab_truncation() {
        let mut sent = toks("a b c d e f g h i j");
        sent.push("e".into());
        let v = build_vocab(&[sent], 1, 4);
        assert_eq!(v.len(), 4);
        assert_eq!(v.token(3), "e");
    }

    #[test]
    fn literal_unk_maps_to_reserved() {
        let v = build_vocab(&[toks("<unk> x <unk>")], 1, 10);
        assert_eq!(v.len(), 4);
        assert_eq!(v.id("<unk>"), 0);
    }
}

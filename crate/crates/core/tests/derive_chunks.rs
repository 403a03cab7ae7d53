//! Tree-to-chunk derivation: structural invariants on generated trees, an
//! independent re-derivation, and comparisons against reference chunk files
//! when they are available.

use std::path::Path;

use msync_core::chunk::{derive_chunks, is_punctuation, label_distribution, validate_spans, ChunkLabel, ChunkSpan, Span};
use msync_core::chunker::gold_spans;
use msync_core::corpus::{read_conll2000, read_ptb, ParseTree};
use msync_core::synth::generate;

fn trees(n: usize, seed: u64) -> Vec<ParseTree> {
    generate(n, seed)
        .iter()
        .map(|s| read_ptb(&s.tree.to_string()).unwrap().remove(0))
        .collect()
}

/// Leaf-by-leaf: the innermost enclosing node whose bare category is a chunk
/// type, identified by its pre-order number.
fn reference(tree: &ParseTree) -> Vec<ChunkSpan> {
    fn bare(label: &str) -> &str {
        if label.starts_with('-') {
            return label;
        }
        let end = label[1..].find(['-', '=']).map_or(label.len(), |i| i + 1);
        &label[..end]
    }
    fn walk(t: &ParseTree, path: &mut Vec<(usize, String)>, next: &mut usize, leaves: &mut Vec<(String, Vec<(usize, String)>)>) {
        match t {
            ParseTree::Leaf { pos, .. } => leaves.push((pos.clone(), path.clone())),
            ParseTree::Node { label, children } => {
                path.push((*next, bare(label).to_string()));
                *next += 1;
                for c in children {
                    walk(c, path, next, leaves);
                }
                path.pop();
            }
        }
    }
    let mut leaves = Vec::new();
    walk(tree, &mut Vec::new(), &mut 0, &mut leaves);
    let owner: Vec<Option<(usize, ChunkLabel)>> = leaves
        .iter()
        .map(|(pos, path)| {
            if is_punctuation(pos) {
                return None;
            }
            path.iter()
                .rev()
                .find_map(|(id, l)| l.parse::<ChunkLabel>().ok().map(|c| (*id, c)))
        })
        .collect();
    let mut spans: Vec<ChunkSpan> = Vec::new();
    for i in 0..owner.len() {
        let Some((id, label)) = owner[i] else { continue };
        if i > 0 && owner[i - 1].map(|o| o.0) == Some(id) {
            spans.last_mut().unwrap().end = i;
        } else {
            spans.push(Span::new(i, i, label));
        }
    }
    spans
}

#[test]
fn punctuation_is_never_chunked() {
    let trees = trees(200, 41);
    assert!(trees.len() >= 50);
    let mut punct = 0;
    for t in &trees {
        let spans = derive_chunks(t).unwrap();
        validate_spans(&spans, t.num_leaves()).unwrap();
        let pos = t.pos_tags();
        for s in &spans {
            for p in &pos[s.begin..=s.end] {
                assert!(!is_punctuation(p), "{t}: {s}");
            }
        }
        punct += pos.iter().filter(|p| is_punctuation(p)).count();
    }
    assert!(punct > 50, "generated trees should contain punctuation");
}

#[test]
fn matches_independent_rederivation() {
    for t in trees(300, 5) {
        assert_eq!(derive_chunks(&t).unwrap(), reference(&t), "{t}");
    }
}

#[test]
fn lowest_ancestor_cases() {
    let cases = [
        (
            "(S (NP-SBJ (DT The) (NN cat)) (VP (VBD sat) (PP-LOC (IN on) (NP (DT the) (NN mat)))) (. .))",
            vec![(0, 1, "NP"), (2, 2, "VP"), (3, 3, "PP"), (4, 5, "NP")],
        ),
        (
            "(S (NP (NP (DT the) (NN end)) (PP (IN of) (NP (NN year)))) (VP (VBD came)))",
            vec![(0, 1, "NP"), (2, 2, "PP"), (3, 3, "NP"), (4, 4, "VP")],
        ),
        (
            "(S (NP (NNS rates)) (, ,) (ADVP (RB however)) (, ,) (VP (VBD fell)))",
            vec![(0, 0, "NP"), (2, 2, "ADVP"), (4, 4, "VP")],
        ),
        (
            "(S (NP (PRP He)) (VP (VBD gave) (PRT (RP up))) (S (VP (TO to) (VP (VB rest)))))",
            vec![(0, 0, "NP"), (1, 1, "VP"), (2, 2, "PRT"), (3, 3, "VP"), (4, 4, "VP")],
        ),
    ];
    for (tree, want) in cases {
        let t = read_ptb(tree).unwrap().remove(0);
        let want: Vec<ChunkSpan> = want
            .into_iter()
            .map(|(b, e, l)| Span::new(b, e, l.parse().unwrap()))
            .collect();
        assert_eq!(derive_chunks(&t).unwrap(), want, "{tree}");
    }
}

/// `CHUNKLINK_ORACLE_DIR` holds `<name>.mrg` trees with `<name>.chunks`
/// three-column files produced from them by the reference converter.
#[test]
fn reference_converter_output() {
    let Ok(dir) = std::env::var("CHUNKLINK_ORACLE_DIR") else {
        eprintln!("CHUNKLINK_ORACLE_DIR unset; skipped");
        return;
    };
    let mut checked = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "mrg") {
            continue;
        }
        let trees = read_ptb(&std::fs::read_to_string(&path).unwrap()).unwrap();
        let gold = gold_spans(&read_conll2000(&std::fs::read_to_string(path.with_extension("chunks")).unwrap()).unwrap()).unwrap();
        assert_eq!(trees.len(), gold.len(), "{}", path.display());
        for (t, g) in trees.iter().zip(&gold) {
            assert_eq!(&derive_chunks(t).unwrap(), g, "{t}");
            checked += 1;
        }
    }
    assert!(checked >= 50, "only {checked} reference trees in {dir}");
}

/// `CONLL2000_TRAIN` points at the shared-task training file.
#[test]
fn conll2000_label_distribution() {
    let Ok(path) = std::env::var("CONLL2000_TRAIN") else {
        eprintln!("CONLL2000_TRAIN unset; skipped");
        return;
    };
    let corpus = read_conll2000(&std::fs::read_to_string(Path::new(&path)).unwrap()).unwrap();
    let d = label_distribution(&gold_spans(&corpus).unwrap());
    let labels: Vec<ChunkLabel> = d.iter().take(3).map(|x| x.0).collect();
    assert_eq!(labels, [ChunkLabel::Np, ChunkLabel::Vp, ChunkLabel::Pp]);
    for ((_, got), want) in d.iter().zip([51.7, 20.0, 19.8]) {
        assert!((got - want).abs() <= 1.0, "{d:?}");
    }
}
